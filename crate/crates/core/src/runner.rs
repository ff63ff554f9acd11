//! Incremental session pipeline: expansion, pseudo-labeling, unknown probing,
//! training, evaluation, confidence bookkeeping, merging and checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::config::{ExperimentConfig, Variant};
use crate::data::{assign_sessions, mask_labels, MultiLabelSample, SessionProtocol, SyntheticDataset};
use crate::error::{HcpError, Result};
use crate::loss::{new_class_weight, wasl};
use crate::metrics::{
    calinski_harabasz, f1_scores, map_over_classes, session_accuracies, Accuracies, ChIndex, PredictionMatrix,
    SessionResult, F1_THRESHOLD,
};
use crate::optim::{Adam, AdamConfig};
use crate::probe::{partition_features, sample_weights, unknown_feature_on_tape};
use crate::purifier::{BoundPurifier, PurifierModel};
use crate::recall::{drift_adjusted, fit_distributions, ConfidenceDistributionTable, ConfidenceHistory};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

/// Purposes of the derived random streams.
pub mod purpose {
    pub const INIT: u64 = 0;
    pub const EXPAND: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const PROBE: u64 = 3;
}

/// Random stream for one `(seed, session, purpose)` triple. Streams never
/// share state, so a run can restart at any session boundary.
pub fn stream(seed: u64, session: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((session as u64) << 8) | purpose);
    rng
}

/// Mutable experiment state carried across sessions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    /// Number of completed sessions.
    pub session: usize,
    pub model: PurifierModel,
    pub table: ConfidenceDistributionTable,
    /// Mean test-positive confidence per class after each session.
    pub eval_history: ConfidenceHistory,
    pub results: Vec<SessionResult>,
}

/// Documents how the random streams are derived; no generator state is stored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub seed: u64,
    pub next_session: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub rng: RngStreams,
    pub state: RunState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| HcpError::State(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Checks the schema version before decoding the rest of the document.
    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Head {
            schema_version: u32,
        }
        let head: Head = serde_json::from_str(text).map_err(|e| HcpError::from_json(e, text))?;
        if head.schema_version != SCHEMA_VERSION {
            return Err(HcpError::Version {
                found: head.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| HcpError::from_json(e, text))?;
        ck.config.validate()?;
        Ok(ck)
    }
}

/// Contents of `results.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub variant: Option<Variant>,
    pub seed: u64,
    pub protocol: String,
    pub config: ExperimentConfig,
    pub sessions: Vec<SessionResult>,
    pub accuracies: Accuracies,
    /// Final-session confidence forgetting per old class.
    pub forgetting: BTreeMap<usize, f64>,
    pub mean_forgetting: Option<f64>,
    pub final_ch: Option<ChIndex>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| HcpError::State(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: RunReport = serde_json::from_str(text).map_err(|e| HcpError::from_json(e, text))?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(HcpError::Version {
                found: r.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        Ok(r)
    }
}

/// Points at which [`Experiment::run_session_with`] exposes the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionStage {
    Expanded,
    Trained,
}

/// Immutable context of one run: configuration, seed, data and protocol.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub dataset: SyntheticDataset,
    pub protocol: SessionProtocol,
    pub pools: Vec<Vec<usize>>,
}

/// Per-session training inputs, fixed before the first step.
struct SessionPlan {
    pool: Vec<usize>,
    /// Targets in bank order for each pool sample.
    targets: Vec<Vec<bool>>,
    weights: Vec<f64>,
    /// Snapshot probabilities on old classes for each pool sample.
    before: Vec<Vec<f64>>,
}

impl Experiment {
    /// Generates the data for `seed`. The dataset seed is `dataset.seed + seed`,
    /// so every variant run with the same seed sees the same samples.
    pub fn new(config: ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let protocol = config.protocol()?;
        let mut dcfg = config.dataset.clone();
        dcfg.seed = dcfg.seed.wrapping_add(seed);
        let dataset = SyntheticDataset::generate(&dcfg, protocol.sessions())?;
        let pools = assign_sessions(&dataset.train, &protocol)?;
        Ok(Experiment {
            config,
            seed,
            dataset,
            protocol,
            pools,
        })
    }

    pub fn initial_state(&self) -> Result<RunState> {
        let model = PurifierModel::new(self.config.model_config(), &mut stream(self.seed, 0, purpose::INIT))?;
        Ok(RunState {
            session: 0,
            model,
            table: ConfidenceDistributionTable::new(self.config.re.queue),
            eval_history: ConfidenceHistory::default(),
            results: Vec::new(),
        })
    }

    pub fn checkpoint(&self, state: &RunState) -> Checkpoint {
        Checkpoint {
            schema_version: SCHEMA_VERSION,
            config: self.config.clone(),
            rng: RngStreams {
                seed: self.seed,
                next_session: state.session + 1,
            },
            state: state.clone(),
        }
    }

    /// Rebuilds the context of a checkpoint.
    pub fn resume(ck: &Checkpoint) -> Result<(Self, RunState)> {
        let exp = Experiment::new(ck.config.clone(), ck.rng.seed)?;
        if ck.state.session > exp.protocol.sessions() {
            return Err(HcpError::State(format!(
                "checkpoint at session {} but protocol has {}",
                ck.state.session,
                exp.protocol.sessions()
            )));
        }
        Ok((exp, ck.state.clone()))
    }

    /// Runs every remaining session; with `checkpoint_dir` each session ends
    /// with `checkpoint_s{t}.json`.
    pub fn run(&self, state: &mut RunState, checkpoint_dir: Option<&Path>) -> Result<()> {
        for t in state.session + 1..=self.protocol.sessions() {
            self.run_session(state, t)?;
            if let Some(dir) = checkpoint_dir {
                self.checkpoint(state).save(&dir.join(format!("checkpoint_s{t}.json")))?;
            }
        }
        Ok(())
    }

    pub fn run_session(&self, state: &mut RunState, t: usize) -> Result<()> {
        self.run_session_with(state, t, |_, _| {})
    }

    /// Like [`Experiment::run_session`], calling `inspect` after the model is
    /// expanded and again after training, before the classifiers are merged.
    pub fn run_session_with(
        &self,
        state: &mut RunState,
        t: usize,
        mut inspect: impl FnMut(SessionStage, &PurifierModel),
    ) -> Result<()> {
        if t != state.session + 1 || t > self.protocol.sessions() {
            return Err(HcpError::State(format!(
                "session {t} requested after session {} of {}",
                state.session,
                self.protocol.sessions()
            )));
        }
        let started = Instant::now();
        let cfg = &self.config;
        let new_ids = self.protocol.classes(t)?.to_vec();
        let snapshot = (t > 1 && cfg.pseudo_labeler().is_some()).then(|| state.model.clone());

        state.model.expand_for_session(&new_ids, &mut stream(self.seed, t, purpose::EXPAND))?;
        if !cfg.train.fp {
            state.model.unfreeze();
        }
        inspect(SessionStage::Expanded, &state.model);

        let plan = self.plan(state, snapshot.as_ref(), t)?;
        self.train(&mut state.model, &plan, t)?;
        inspect(SessionStage::Trained, &state.model);

        let mut result = self.evaluate(&state.model, t, &mut state.eval_history)?;
        if cfg.re.enabled {
            self.update_confidence(state, &plan, t)?;
        }
        result.confidence = state.table.stats.clone();
        state.model.merge_classifiers()?;
        result.wall_time = started.elapsed().as_secs_f64();
        info!(
            "session {t}: mAP {:.2} CF1 {:.2} OF1 {:.2} ({:.1}s)",
            100.0 * result.map,
            100.0 * result.cf1,
            100.0 * result.of1,
            result.wall_time
        );
        state.results.push(result);
        state.session = t;
        Ok(())
    }

    fn plan(&self, state: &RunState, snapshot: Option<&PurifierModel>, t: usize) -> Result<SessionPlan> {
        let model = &state.model;
        let n_old = model.old_count();
        let n_total = model.known_classes().len();
        let w_new = new_class_weight(n_total, n_total - n_old)?;
        let mut weights = vec![1.0; n_old];
        weights.resize(n_total, w_new);

        let pool = self.pools[t - 1].clone();
        let old_ids = &model.known_classes()[..n_old];
        let mut targets = Vec::with_capacity(pool.len());
        let mut before = Vec::with_capacity(pool.len());
        let pseudo = self.config.pseudo_labeler();
        for &i in &pool {
            let sample = &self.dataset.train[i];
            let mut y = vec![false; n_old];
            if let (Some(snap), Some(strategy), true) = (snapshot, pseudo, n_old > 0) {
                let probs = probabilities(snap, &sample.tokens)?;
                y = strategy.label(&probs, old_ids, &state.table);
                before.push(probs);
            }
            y.extend(mask_labels(sample, t, &self.protocol)?);
            targets.push(y);
        }
        Ok(SessionPlan {
            pool,
            targets,
            weights,
            before,
        })
    }

    fn train(&self, model: &mut PurifierModel, plan: &SessionPlan, t: usize) -> Result<()> {
        let cfg = &self.config;
        let lr = if t == 1 { cfg.train.base_lr } else { cfg.train.incremental_lr };
        let mut adam = Adam::new(AdamConfig {
            weight_decay: cfg.train.weight_decay,
            ..AdamConfig::default().with_lr(lr)
        });
        let mut shuffle = stream(self.seed, t, purpose::SHUFFLE);
        let mut probe = stream(self.seed, t, purpose::PROBE);
        let mut order: Vec<usize> = (0..plan.pool.len()).collect();
        for epoch in 0..cfg.train.epochs {
            order.shuffle(&mut shuffle);
            let mut epoch_loss = 0.0;
            for (b, batch) in order.chunks(cfg.train.batch_size).enumerate() {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape)?;
                let mut total: Option<Var> = None;
                for &j in batch {
                    let sample = &self.dataset.train[plan.pool[j]];
                    let l = self.sample_loss(&mut tape, &bound, &sample.tokens, &plan.targets[j], &plan.weights, &mut probe)?;
                    total = Some(match total {
                        Some(acc) => tape.add(acc, l)?,
                        None => l,
                    });
                }
                let total = total.expect("chunks are non-empty");
                let loss = tape.scale(total, 1.0 / batch.len() as f64);
                let value = tape.scalar_value(loss);
                if !value.is_finite() {
                    let ids: Vec<usize> = batch.iter().map(|&j| self.dataset.train[plan.pool[j]].sample_id).collect();
                    log::error!("non-finite loss: session {t} epoch {epoch} batch {b} samples {ids:?}");
                    return Err(HcpError::NonFinite(format!(
                        "loss {value} at session {t}, epoch {epoch}, batch {b}, samples {ids:?}"
                    )));
                }
                epoch_loss += value * batch.len() as f64;
                let grads = tape.backward(loss)?;
                model.accumulate_grads(&bound, &grads)?;
                adam.step(&mut model.params_mut())?;
                model.zero_grads();
            }
            debug!("session {t} epoch {epoch}: loss {:.5}", epoch_loss / plan.pool.len() as f64);
        }
        Ok(())
    }

    fn sample_loss(
        &self,
        tape: &mut Tape,
        bound: &BoundPurifier,
        tokens: &Tensor,
        targets: &[bool],
        class_weights: &[f64],
        probe: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let p = tape.leaf(tokens);
        let out = bound.forward_purify(tape, p)?;
        let mut logits = bound.classify(tape, out.classes)?;
        let mut y = targets.to_vec();
        let mut w = class_weights.to_vec();
        let pu = &self.config.probe_unknown;
        if pu.enabled {
            let m = targets.len();
            let ids: Vec<usize> = (0..m).collect();
            let part = partition_features(m, targets, &ids)?;
            let lambda = sample_weights(part.absent.len(), pu.alpha, pu.beta, probe)?;
            if let Some(u) = unknown_feature_on_tape(tape, out.classes, &part, &lambda)? {
                let ul = bound.unknown_logits(tape, u)?;
                logits = tape.concat_rows(logits, ul)?;
                y.push(true);
                w.push(1.0);
            }
            if pu.real_negative_targets && !part.present.is_empty() {
                let mut sel = vec![0.0; part.present.len() * m];
                for (r, &row) in part.present.iter().enumerate() {
                    sel[r * m + row] = 1.0;
                }
                let sel = tape.constant(part.present.len(), m, sel)?;
                let present = tape.matmul(sel, out.classes)?;
                let nl = bound.unknown_logits(tape, present)?;
                logits = tape.concat_rows(logits, nl)?;
                y.extend(std::iter::repeat(false).take(part.present.len()));
                w.extend(std::iter::repeat(1.0).take(part.present.len()));
            }
        }
        let probs = tape.sigmoid(logits);
        wasl(tape, probs, &y, &w, &self.config.loss)
    }

    /// Scores the test split on every seen class.
    pub fn evaluate(&self, model: &PurifierModel, t: usize, history: &mut ConfidenceHistory) -> Result<SessionResult> {
        evaluate_model(model, &self.dataset.test, t, self.config.train.fp, history)
    }

    /// Fits the current classes on the session pool's ground truth and shifts
    /// old-class statistics by the confidence drift seen on pseudo-positives.
    fn update_confidence(&self, state: &mut RunState, plan: &SessionPlan, t: usize) -> Result<()> {
        let model = &state.model;
        let n_old = model.old_count();
        let ids = model.known_classes().to_vec();
        let mut after = Vec::with_capacity(plan.pool.len());
        for &i in &plan.pool {
            after.push(probabilities(model, &self.dataset.train[i].tokens)?);
        }
        let new_probs: Vec<Vec<f64>> = after.iter().map(|p| p[n_old..].to_vec()).collect();
        let new_truths: Vec<Vec<bool>> = plan.targets.iter().map(|y| y[n_old..].to_vec()).collect();
        let mut fresh = fit_distributions(&new_probs, &new_truths, &ids[n_old..])?;
        if !plan.before.is_empty() {
            for (c, &k) in ids[..n_old].iter().enumerate() {
                let Some(prior) = state.table.stats.get(&k) else { continue };
                let (b, a): (Vec<f64>, Vec<f64>) = plan
                    .targets
                    .iter()
                    .zip(&plan.before)
                    .zip(&after)
                    .filter(|((y, _), _)| y[c])
                    .map(|((_, before), after)| (before[c], after[c]))
                    .unzip();
                if let Some(stats) = drift_adjusted(prior, &b, &a) {
                    fresh.insert(k, stats);
                }
            }
        }
        state.table.update_queue(&fresh, t)
    }

    pub fn report(&self, state: &RunState, variant: Option<Variant>) -> Result<RunReport> {
        let accuracies = session_accuracies(&state.results)?;
        let last = state.results.last().expect("non-empty after accuracies");
        let forgetting = last.forgetting.clone();
        let mean_forgetting =
            (!forgetting.is_empty()).then(|| forgetting.values().sum::<f64>() / forgetting.len() as f64);
        Ok(RunReport {
            schema_version: SCHEMA_VERSION,
            variant,
            seed: self.seed,
            protocol: self.protocol.label(),
            config: self.config.clone(),
            sessions: state.results.clone(),
            accuracies,
            forgetting,
            mean_forgetting,
            final_ch: last.ch_index,
        })
    }
}

/// Scores `test` on every class the model knows, records per-class mean
/// confidence on positives into `history` and derives forgetting from it.
/// With `class_features` the Calinski-Harabasz index of the present-class
/// rows of `O_S` is included.
pub fn evaluate_model(
    model: &PurifierModel,
    test: &[MultiLabelSample],
    t: usize,
    class_features: bool,
    history: &mut ConfidenceHistory,
) -> Result<SessionResult> {
    let class_ids = model.known_classes().to_vec();
    let m = class_ids.len();
    let mut scores = Vec::with_capacity(test.len() * m);
    let mut truths = Vec::with_capacity(test.len() * m);
    let mut sample_ids = Vec::with_capacity(test.len());
    let mut features = Vec::new();
    let mut feature_labels = Vec::new();
    let fp = class_features;
    for s in test {
        let (_, o_s, logits) = crate::purifier::infer(model, &s.tokens)?;
        for (r, &k) in class_ids.iter().enumerate() {
            let y = s.labels_full[k];
            scores.push(sigmoid(logits[r]));
            truths.push(y);
            if y && fp {
                features.push(o_s.row(r).to_vec());
                feature_labels.push(k);
            }
        }
        sample_ids.push(s.sample_id);
    }
    let pm = PredictionMatrix::new(scores, truths, sample_ids, class_ids.clone(), t)?;
    let maps = map_over_classes(&pm)?;
    let f1 = f1_scores(&pm, F1_THRESHOLD);

    let mut forgetting = BTreeMap::new();
    for (j, &k) in class_ids.iter().enumerate() {
        let col: Vec<f64> = pm
            .score_column(j)
            .into_iter()
            .zip(pm.truth_column(j))
            .filter_map(|(p, y)| y.then_some(p))
            .collect();
        if col.is_empty() {
            continue;
        }
        history.record(k, t, col.iter().sum::<f64>() / col.len() as f64)?;
        if history.of(k).len() > 1 {
            forgetting.insert(k, history.forgetting(k, t)?);
        }
    }

    let distinct = feature_labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    let ch_index = if fp && distinct >= 2 && features.len() > distinct {
        Some(calinski_harabasz(&features, &feature_labels)?)
    } else {
        None
    };
    Ok(SessionResult {
        session: t,
        map: maps.map,
        cf1: f1.cf1,
        of1: f1.of1,
        per_class_ap: maps.per_class,
        forgetting,
        confidence: BTreeMap::new(),
        ch_index,
        wall_time: 0.0,
    })
}

/// Sigmoid probabilities of every real class, in bank order.
pub fn probabilities(model: &PurifierModel, tokens: &Tensor) -> Result<Vec<f64>> {
    let (_, _, logits) = crate::purifier::infer(model, tokens)?;
    Ok(logits.into_iter().map(sigmoid).collect())
}

/// Per-session CSV: headline metrics then per-class AP, forgetting, mean and
/// variance columns for every class id in `0..num_classes`. Percentages for
/// mAP, CF1, OF1 and AP.
pub fn session_csv(report: &RunReport) -> Result<String> {
    let n = report.config.dataset.num_classes;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["session".to_string(), "mAP".into(), "CF1".into(), "OF1".into(), "CH_index".into()];
    for prefix in ["AP", "F", "mu", "var"] {
        header.extend((0..n).map(|k| format!("{prefix}_{k}")));
    }
    w.write_record(&header).map_err(csv_error)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for s in &report.sessions {
        let ch = match s.ch_index {
            Some(c) if c.capped => "inf".to_string(),
            Some(c) => opt(c.value),
            None => String::new(),
        };
        let mut row = vec![
            s.session.to_string(),
            (100.0 * s.map).to_string(),
            (100.0 * s.cf1).to_string(),
            (100.0 * s.of1).to_string(),
            ch,
        ];
        row.extend((0..n).map(|k| opt(s.per_class_ap.get(&k).map(|v| 100.0 * v))));
        row.extend((0..n).map(|k| opt(s.forgetting.get(&k).copied())));
        row.extend((0..n).map(|k| opt(s.confidence.get(&k).map(|c| c.mean))));
        row.extend((0..n).map(|k| opt(s.confidence.get(&k).map(|c| c.variance))));
        w.write_record(&row).map_err(csv_error)?;
    }
    finish_csv(w)
}

fn csv_error(e: csv::Error) -> HcpError {
    HcpError::Io(std::io::Error::other(e))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| HcpError::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| HcpError::Io(std::io::Error::other(e)))
}

/// Fails early when `dir` cannot be created or written.
pub fn prepare_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let probe = dir.join(".write_test");
    fs::write(&probe, b"")?;
    fs::remove_file(probe)?;
    Ok(())
}

/// Files written by [`run_experiment`].
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub results: PathBuf,
    pub csv: PathBuf,
    pub timings: PathBuf,
    pub report: RunReport,
}

/// Full run into `out`: `results.json`, `sessions.csv`, `timings.json` and,
/// when enabled, per-session checkpoints.
pub fn run_experiment(config: &ExperimentConfig, seed: u64, out: &Path, variant: Option<Variant>) -> Result<RunOutputs> {
    prepare_out_dir(out)?;
    let exp = Experiment::new(config.clone(), seed)?;
    let mut state = exp.initial_state()?;
    exp.run(&mut state, config.out.checkpoints.then_some(out))?;
    write_outputs(&exp, &state, out, variant)
}

/// Continues a checkpointed run to the last session and writes its outputs.
pub fn resume_experiment(ck: &Checkpoint, out: &Path, variant: Option<Variant>) -> Result<RunOutputs> {
    prepare_out_dir(out)?;
    let (exp, mut state) = Experiment::resume(ck)?;
    exp.run(&mut state, exp.config.out.checkpoints.then_some(out))?;
    write_outputs(&exp, &state, out, variant)
}

fn write_outputs(exp: &Experiment, state: &RunState, out: &Path, variant: Option<Variant>) -> Result<RunOutputs> {
    let report = exp.report(state, variant.or_else(|| variant_of(&exp.config)))?;
    let results = out.join("results.json");
    fs::write(&results, report.to_json()?)?;
    let csv = out.join("sessions.csv");
    fs::write(&csv, session_csv(&report)?)?;
    let timings = out.join("timings.json");
    let times: Vec<f64> = state.results.iter().map(|r| r.wall_time).collect();
    fs::write(&timings, serde_json::to_string(&times).map_err(|e| HcpError::State(e.to_string()))?)?;
    Ok(RunOutputs {
        results,
        csv,
        timings,
        report,
    })
}

/// One ablation cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub avg_acc: f64,
    pub last_acc: f64,
    pub last_cf1: f64,
    pub last_of1: f64,
    pub mean_forgetting: Option<f64>,
    pub final_ch: Option<f64>,
}

impl AblationRow {
    pub fn from_report(r: &RunReport) -> Option<Self> {
        Some(AblationRow {
            variant: r.variant?,
            seed: r.seed,
            avg_acc: r.accuracies.avg_acc,
            last_acc: r.accuracies.last_acc,
            last_cf1: r.accuracies.last_cf1,
            last_of1: r.accuracies.last_of1,
            mean_forgetting: r.mean_forgetting,
            final_ch: r.final_ch.map(|c| c.as_f64()),
        })
    }
}

/// Runs every variant for each seed into `out/<variant>/seed_<s>/` and
/// returns one row per run.
pub fn run_ablation(config: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<Vec<AblationRow>> {
    prepare_out_dir(out)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for v in Variant::ALL {
            let dir = out.join(v.slug()).join(format!("seed_{seed}"));
            let outputs = run_experiment(&config.with_variant(v), seed, &dir, Some(v))?;
            info!("{} seed {seed}: Avg {:.2}", v.label(), 100.0 * outputs.report.accuracies.avg_acc);
            rows.extend(AblationRow::from_report(&outputs.report));
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Md,
}

/// Tabulates ablation rows plus per-variant means.
pub fn format_rows(rows: &[AblationRow], format: ReportFormat) -> Result<String> {
    let mut means: BTreeMap<Variant, (f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = means.entry(r.variant).or_insert((0.0, 0.0, 0));
        e.0 += r.avg_acc;
        e.1 += r.last_acc;
        e.2 += 1;
    }
    let pct = |x: f64| format!("{:.2}", 100.0 * x);
    let opt = |x: Option<f64>, digits: usize| x.map_or("-".to_string(), |v| format!("{v:.digits$}"));
    Ok(match format {
        ReportFormat::Json => {
            #[derive(Serialize)]
            struct Summary<'a> {
                rows: &'a [AblationRow],
                means: BTreeMap<&'static str, (f64, f64)>,
            }
            let means = means
                .iter()
                .map(|(v, (a, l, n))| (v.label(), (a / *n as f64, l / *n as f64)))
                .collect();
            serde_json::to_string_pretty(&Summary { rows, means }).map_err(|e| HcpError::State(e.to_string()))?
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "variant",
                "seed",
                "avg_acc",
                "last_acc",
                "last_cf1",
                "last_of1",
                "mean_forgetting",
                "final_ch",
            ])
            .map_err(csv_error)?;
            for r in rows {
                w.write_record([
                    r.variant.label().to_string(),
                    r.seed.to_string(),
                    pct(r.avg_acc),
                    pct(r.last_acc),
                    pct(r.last_cf1),
                    pct(r.last_of1),
                    opt(r.mean_forgetting, 4),
                    opt(r.final_ch, 3),
                ])
                .map_err(csv_error)?;
            }
            finish_csv(w)?
        }
        ReportFormat::Md => {
            let mut s = String::from(
                "| variant | seed | Avg. Acc | Last Acc | CF1 | OF1 | mean F_k | C-H |\n|---|---|---|---|---|---|---|---|\n",
            );
            for r in rows {
                s.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
                    r.variant.label(),
                    r.seed,
                    pct(r.avg_acc),
                    pct(r.last_acc),
                    pct(r.last_cf1),
                    pct(r.last_of1),
                    opt(r.mean_forgetting, 4),
                    opt(r.final_ch, 3)
                ));
            }
            s.push_str("\n| variant | runs | mean Avg. Acc | mean Last Acc |\n|---|---|---|---|\n");
            for (v, (a, l, n)) in &means {
                s.push_str(&format!(
                    "| {} | {n} | {} | {} |\n",
                    v.label(),
                    pct(a / *n as f64),
                    pct(l / *n as f64)
                ));
            }
            s
        }
    })
}

/// Loads every `results.json` under `dir` (recursively), sorted by variant
/// then seed.
pub fn collect_reports(dir: &Path) -> Result<Vec<RunReport>> {
    let mut found = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| HcpError::Io(std::io::Error::other(e)))?;
        if entry.file_type().is_file() && entry.file_name() == "results.json" {
            found.push(RunReport::from_json(&fs::read_to_string(entry.path())?)?);
        }
    }
    if found.is_empty() {
        return Err(HcpError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no results.json under {}", dir.display()),
        )));
    }
    found.sort_by(|a, b| (a.variant, a.seed).cmp(&(b.variant, b.seed)));
    Ok(found)
}

pub fn variant_of(config: &ExperimentConfig) -> Option<Variant> {
    Variant::ALL.into_iter().find(|&v| {
        let c = config.with_variant(v);
        c.train.fp == config.train.fp
            && c.re.enabled == config.re.enabled
            && c.probe_unknown.enabled == config.probe_unknown.enabled
    })
}
