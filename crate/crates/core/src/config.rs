//! Experiment configuration document.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{build_protocol, default_class_names, DatasetConfig, SessionProtocol};
use crate::error::{HcpError, Result};
use crate::loss::LossConfig;
use crate::probe::ProbeConfig;
use crate::purifier::PurifierConfig;
use crate::recall::{PseudoLabelConfig, QueueUpdate};

pub const SEED_ENV: &str = "HCP_SEED";

/// `B{base}-C{increment}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub base: usize,
    pub increment: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig { base: 10, increment: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Feature purification (class embeddings, freezing, split heads). Off means
    /// the pooled fine-tuning baseline.
    pub fp: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub incremental_lr: f64,
    pub weight_decay: f64,
    pub heads: usize,
    pub blocks: usize,
    pub pre_norm: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            fp: true,
            epochs: 15,
            batch_size: 32,
            base_lr: 1e-3,
            incremental_lr: 5e-4,
            weight_decay: 1e-4,
            heads: 2,
            blocks: 3,
            pre_norm: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReConfig {
    pub enabled: bool,
    /// Strategy used when `enabled`.
    pub pseudo: PseudoLabelConfig,
    /// Strategy used when recall enhancement is off; `null` disables
    /// pseudo-labeling entirely.
    pub baseline: Option<PseudoLabelConfig>,
    pub queue: QueueUpdate,
}

impl Default for ReConfig {
    fn default() -> Self {
        ReConfig {
            enabled: true,
            pseudo: PseudoLabelConfig::Re { sigma_scale: 0.0 },
            baseline: Some(PseudoLabelConfig::Static { epsilon: 0.9 }),
            queue: QueueUpdate::Replace,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutConfig {
    pub dir: PathBuf,
    pub checkpoints: bool,
}

impl Default for OutConfig {
    fn default() -> Self {
        OutConfig {
            dir: PathBuf::from("runs"),
            checkpoints: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub protocol: ProtocolConfig,
    pub train: TrainConfig,
    pub re: ReConfig,
    pub probe_unknown: ProbeConfig,
    pub loss: LossConfig,
    pub out: OutConfig,
}

/// The five ablation configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "FP")]
    Fp,
    #[serde(rename = "FP+RE")]
    FpRe,
    #[serde(rename = "FP+PU")]
    FpPu,
    #[serde(rename = "FP+RE+PU")]
    FpRePu,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Ft, Variant::Fp, Variant::FpRe, Variant::FpPu, Variant::FpRePu];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Ft => "FT",
            Variant::Fp => "FP",
            Variant::FpRe => "FP+RE",
            Variant::FpPu => "FP+PU",
            Variant::FpRePu => "FP+RE+PU",
        }
    }

    /// File-name friendly label.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Ft => "ft",
            Variant::Fp => "fp",
            Variant::FpRe => "fp_re",
            Variant::FpPu => "fp_pu",
            Variant::FpRePu => "fp_re_pu",
        }
    }

    fn toggles(self) -> (bool, bool, bool) {
        match self {
            Variant::Ft => (false, false, false),
            Variant::Fp => (true, false, false),
            Variant::FpRe => (true, true, false),
            Variant::FpPu => (true, false, true),
            Variant::FpRePu => (true, true, true),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| HcpError::from_json(e, text))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| HcpError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.loss.validate()?;
        self.probe_unknown.validate()?;
        self.re.pseudo.validate()?;
        if let Some(b) = &self.re.baseline {
            b.validate()?;
        }
        let t = &self.train;
        if !t.fp && (self.re.enabled || self.probe_unknown.enabled) {
            return Err(HcpError::Config(
                "recall enhancement and unknown probing require feature purification (train.fp)".into(),
            ));
        }
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(HcpError::Config("epochs and batch_size must be positive".into()));
        }
        if !(t.base_lr > 0.0 && t.incremental_lr > 0.0 && t.weight_decay >= 0.0) {
            return Err(HcpError::Config("learning rates must be positive, weight decay >= 0".into()));
        }
        if t.blocks == 0 || t.heads == 0 || self.dataset.d % t.heads != 0 {
            return Err(HcpError::Config(format!(
                "width {} must split evenly across {} heads with >= 1 block",
                self.dataset.d, t.heads
            )));
        }
        self.protocol()?;
        Ok(())
    }

    pub fn protocol(&self) -> Result<SessionProtocol> {
        let names = default_class_names(self.dataset.num_classes);
        build_protocol(self.dataset.num_classes, self.protocol.base, self.protocol.increment, &names)
    }

    pub fn sessions(&self) -> usize {
        self.protocol().map_or(0, |p| p.sessions())
    }

    pub fn model_config(&self) -> PurifierConfig {
        PurifierConfig {
            d: self.dataset.d,
            heads: self.train.heads,
            blocks: self.train.blocks,
            pre_norm: self.train.pre_norm,
        }
    }

    /// Old-class pseudo-labeling strategy of incremental sessions. FT has none.
    pub fn pseudo_labeler(&self) -> Option<PseudoLabelConfig> {
        match (self.train.fp, self.re.enabled) {
            (false, _) => None,
            (true, true) => Some(self.re.pseudo),
            (true, false) => self.re.baseline,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let (fp, re, pu) = variant.toggles();
        let mut cfg = self.clone();
        cfg.train.fp = fp;
        cfg.re.enabled = re;
        if re && !matches!(cfg.re.pseudo, PseudoLabelConfig::Re { .. }) {
            cfg.re.pseudo = PseudoLabelConfig::Re { sigma_scale: 0.0 };
        }
        cfg.probe_unknown.enabled = pu;
        cfg
    }

    /// Seed precedence: explicit flag, then `HCP_SEED`, then `train.seed`.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<u64> {
        let seed = match (flag, env) {
            (Some(s), _) => s,
            (None, Some(v)) => v
                .trim()
                .parse()
                .map_err(|_| HcpError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            (None, None) => self.train.seed,
        };
        self.train.seed = seed;
        Ok(seed)
    }
}
