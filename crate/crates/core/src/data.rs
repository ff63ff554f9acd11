//! Synthetic multi-label patch-token data and Bi-Cj session splitting.
//!
//! Each class owns a unit-norm prototype. A sample's label set is drawn from an
//! anchor/co-occurrence model; every present class writes its prototype (with a
//! per-sample amplitude) into `occupancy` disjoint patches and the rest of the
//! grid is isotropic Gaussian noise.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HcpError, Result};
use crate::tensor::Tensor;

const VOC_NAMES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

/// Default class names: the twenty VOC categories, then `class_NNN`.
pub fn default_class_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match VOC_NAMES.get(i) {
            Some(name) if n <= VOC_NAMES.len() => name.to_string(),
            _ => format!("class_{i:03}"),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    /// Training samples generated per protocol session.
    pub samples_per_session: usize,
    /// Held-out evaluation samples (never masked).
    pub test_samples: usize,
    /// Symmetric co-presence matrix. The diagonal holds each class's anchor
    /// probability; entry (a, b) is the chance an anchor `a` brings `b` along.
    /// `None` means the seeded default built by [`default_cooccurrence`].
    pub cooccurrence: Option<Vec<Vec<f64>>>,
    pub noise_std: f64,
    pub occupancy: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_classes: 20,
            d: 16,
            h: 4,
            w: 4,
            samples_per_session: 600,
            test_samples: 600,
            cooccurrence: None,
            noise_std: 0.3,
            occupancy: 2,
            seed: 0,
        }
    }
}

/// Seeded default label model: every class is an anchor with probability 0.06 and
/// roughly one in eight class pairs co-occur strongly (0.3).
pub fn default_cooccurrence(num_classes: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0_0CC0);
    let mut m = vec![vec![0.0; num_classes]; num_classes];
    for a in 0..num_classes {
        m[a][a] = 0.06;
        for b in a + 1..num_classes {
            let p = if rng.gen_bool(0.12) { 0.3 } else { 0.0 };
            m[a][b] = p;
            m[b][a] = p;
        }
    }
    m
}

impl DatasetConfig {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn resolved_cooccurrence(&self) -> Vec<Vec<f64>> {
        self.cooccurrence
            .clone()
            .unwrap_or_else(|| default_cooccurrence(self.num_classes, self.seed))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.d == 0 || self.h == 0 || self.w == 0 {
            return Err(HcpError::Config("class count and grid sizes must be positive".into()));
        }
        if self.occupancy == 0 || self.occupancy > self.tokens() {
            return Err(HcpError::Config(format!(
                "occupancy {} does not fit in {} patches",
                self.occupancy,
                self.tokens()
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(HcpError::Config("noise_std must be >= 0".into()));
        }
        let m = self.resolved_cooccurrence();
        if m.len() != self.num_classes || m.iter().any(|r| r.len() != self.num_classes) {
            return Err(HcpError::Config("co-occurrence matrix must be square over all classes".into()));
        }
        for a in 0..self.num_classes {
            for b in 0..self.num_classes {
                let v = m[a][b];
                if !(0.0..=1.0).contains(&v) {
                    return Err(HcpError::Config(format!("co-occurrence[{a}][{b}] = {v} outside [0,1]")));
                }
                if m[b][a] != v {
                    return Err(HcpError::Config("co-occurrence matrix must be symmetric".into()));
                }
            }
        }
        if m.iter().enumerate().all(|(k, r)| r[k] == 0.0) {
            return Err(HcpError::Config("at least one anchor probability must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    pub name: String,
    pub prototype: Vec<f64>,
    pub occupancy: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelSample {
    pub sample_id: usize,
    /// `L × d` patch tokens.
    pub tokens: Tensor,
    /// Ground truth over every class id.
    pub labels_full: Vec<bool>,
}

impl MultiLabelSample {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels_full
            .iter()
            .enumerate()
            .filter_map(|(k, &y)| y.then_some(k))
    }
}

/// Ordered class partition `C_1 .. C_T` under the Bi-Cj notation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionProtocol {
    pub base: usize,
    pub increment: usize,
    /// Class names in lexicographic order; position is the class id.
    pub names: Vec<String>,
    pub partitions: Vec<Vec<usize>>,
}

impl SessionProtocol {
    pub fn sessions(&self) -> usize {
        self.partitions.len()
    }

    /// Classes of session `t` (1-based).
    pub fn classes(&self, t: usize) -> Result<&[usize]> {
        if t == 0 || t > self.partitions.len() {
            return Err(HcpError::Protocol(format!(
                "session {t} outside 1..={}",
                self.partitions.len()
            )));
        }
        Ok(&self.partitions[t - 1])
    }

    /// All classes seen up to and including session `t`, in session order.
    pub fn seen(&self, t: usize) -> Result<Vec<usize>> {
        self.classes(t)?;
        Ok(self.partitions[..t].iter().flatten().copied().collect())
    }

    pub fn session_of(&self, class_id: usize) -> Option<usize> {
        self.partitions
            .iter()
            .position(|p| p.contains(&class_id))
            .map(|i| i + 1)
    }

    pub fn label(&self) -> String {
        format!("B{}-C{}", self.base, self.increment)
    }
}

/// Sorts `names` lexicographically, assigns class ids by rank and partitions
/// them into sessions of sizes `[i, j, j, ..]` (or `[j, j, ..]` when `i == 0`).
pub fn build_protocol(num_classes: usize, i: usize, j: usize, names: &[String]) -> Result<SessionProtocol> {
    if j == 0 {
        return Err(HcpError::Protocol("increment must be >= 1".into()));
    }
    if names.len() != num_classes {
        return Err(HcpError::Protocol(format!(
            "{} names for {num_classes} classes",
            names.len()
        )));
    }
    let unique: BTreeSet<&String> = names.iter().collect();
    if unique.len() != names.len() {
        return Err(HcpError::Protocol("class names must be unique".into()));
    }
    if i > num_classes || (num_classes - i) % j != 0 || num_classes == 0 {
        return Err(HcpError::Protocol(format!(
            "B{i}-C{j} does not evenly split {num_classes} classes"
        )));
    }
    let mut sorted = names.to_vec();
    sorted.sort();
    let mut partitions = Vec::new();
    let mut next = 0;
    if i > 0 {
        partitions.push((0..i).collect());
        next = i;
    }
    while next < num_classes {
        partitions.push((next..next + j).collect());
        next += j;
    }
    Ok(SessionProtocol {
        base: i,
        increment: j,
        names: sorted,
        partitions,
    })
}

/// Builds class specs (ids by lexicographic name) with seeded unit prototypes.
pub fn make_classes(config: &DatasetConfig) -> Vec<ClassSpec> {
    let mut names = default_class_names(config.num_classes);
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    names
        .into_iter()
        .enumerate()
        .map(|(class_id, name)| {
            let mut v: Vec<f64> = (0..config.d).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            ClassSpec {
                class_id,
                name,
                prototype: v,
                occupancy: config.occupancy,
            }
        })
        .collect()
}

/// One draw of the label model before the "at least one positive" rejection.
fn draw_labels(m: &[Vec<f64>], rng: &mut impl Rng) -> Vec<bool> {
    let n = m.len();
    let anchors: Vec<bool> = (0..n).map(|k| rng.gen_bool(m[k][k])).collect();
    let mut labels = anchors.clone();
    for a in (0..n).filter(|&a| anchors[a]) {
        for b in 0..n {
            if b != a && m[a][b] > 0.0 && rng.gen_bool(m[a][b]) {
                labels[b] = true;
            }
        }
    }
    labels
}

/// Expected label count per sample under the label model, conditioned on at
/// least one positive.
pub fn expected_cardinality(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut total = 0.0;
    for b in 0..n {
        let mut absent = 1.0 - m[b][b];
        for a in (0..n).filter(|&a| a != b) {
            absent *= 1.0 - m[a][a] * m[a][b];
        }
        total += 1.0 - absent;
    }
    let empty: f64 = (0..n).map(|k| 1.0 - m[k][k]).product();
    total / (1.0 - empty)
}

/// Draws `n` label vectors from the label model (with the ≥1-positive rejection).
pub fn sample_label_sets(config: &DatasetConfig, n: usize, rng: &mut impl Rng) -> Vec<Vec<bool>> {
    let m = config.resolved_cooccurrence();
    let max_labels = config.tokens() / config.occupancy;
    (0..n)
        .map(|_| loop {
            let labels = draw_labels(&m, rng);
            let count = labels.iter().filter(|&&y| y).count();
            if count >= 1 && count <= max_labels {
                break labels;
            }
        })
        .collect()
}

/// Generates `n` samples with ids starting at `first_id`.
pub fn generate_samples(
    config: &DatasetConfig,
    classes: &[ClassSpec],
    n: usize,
    first_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MultiLabelSample>> {
    config.validate()?;
    let l = config.tokens();
    let d = config.d;
    let labels = sample_label_sets(config, n, rng);
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).expect("noise std");
    let mut out = Vec::with_capacity(n);
    for (offset, labels_full) in labels.into_iter().enumerate() {
        let mut tokens = vec![0.0; l * d];
        let mut free: Vec<usize> = (0..l).collect();
        free.shuffle(rng);
        let mut cursor = 0;
        for k in (0..classes.len()).filter(|&k| labels_full[k]) {
            let spec = &classes[k];
            if cursor + spec.occupancy > l {
                return Err(HcpError::Config(format!(
                    "occupancy demand exceeds {l} patches"
                )));
            }
            let amp = rng.gen_range(0.8..=1.2);
            for &patch in &free[cursor..cursor + spec.occupancy] {
                for (t, p) in tokens[patch * d..(patch + 1) * d].iter_mut().zip(&spec.prototype) {
                    *t = amp * p;
                }
            }
            cursor += spec.occupancy;
        }
        if config.noise_std > 0.0 {
            for &patch in &free[cursor..] {
                for t in &mut tokens[patch * d..(patch + 1) * d] {
                    *t = noise.sample(rng);
                }
            }
        }
        out.push(MultiLabelSample {
            sample_id: first_id + offset,
            tokens: Tensor::matrix(l, d, tokens)?,
            labels_full,
        });
    }
    Ok(out)
}

/// Generated classes plus disjoint train/test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    pub classes: Vec<ClassSpec>,
    pub train: Vec<MultiLabelSample>,
    pub test: Vec<MultiLabelSample>,
}

impl SyntheticDataset {
    /// Generates `samples_per_session × sessions` training samples followed by
    /// the test split. Test generation continues until every class has a
    /// positive in the test split (bounded).
    pub fn generate(config: &DatasetConfig, sessions: usize) -> Result<Self> {
        config.validate()?;
        let classes = make_classes(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n_train = config.samples_per_session * sessions.max(1);
        let train = generate_samples(config, &classes, n_train, 0, &mut rng)?;
        let mut test = generate_samples(config, &classes, config.test_samples, n_train, &mut rng)?;
        let mut rounds = 0;
        while !covers_all(&test, config.num_classes) {
            rounds += 1;
            if rounds > 50 {
                return Err(HcpError::Dataset(
                    "test split lacks positives for some class; raise test_samples".into(),
                ));
            }
            let next = n_train + test.len();
            let extra = generate_samples(config, &classes, config.test_samples.max(1) / 4 + 1, next, &mut rng)?;
            test.extend(extra);
        }
        Ok(SyntheticDataset {
            config: config.clone(),
            classes,
            train,
            test,
        })
    }
}

fn covers_all(samples: &[MultiLabelSample], num_classes: usize) -> bool {
    let mut seen = vec![false; num_classes];
    for s in samples {
        for k in s.positives() {
            seen[k] = true;
        }
    }
    seen.into_iter().all(|x| x)
}

/// Training pool per session (0-based vector over sessions 1..=T): indices into
/// `train` of samples with at least one positive in that session's classes.
pub fn assign_sessions(train: &[MultiLabelSample], protocol: &SessionProtocol) -> Result<Vec<Vec<usize>>> {
    let mut pools = vec![Vec::new(); protocol.sessions()];
    for (idx, s) in train.iter().enumerate() {
        if s.labels_full.len() < protocol.names.len() {
            return Err(HcpError::Dataset(format!(
                "sample {} has {} labels, protocol covers {} classes",
                s.sample_id,
                s.labels_full.len(),
                protocol.names.len()
            )));
        }
        for (t, part) in protocol.partitions.iter().enumerate() {
            if part.iter().any(|&k| s.labels_full[k]) {
                pools[t].push(idx);
            }
        }
    }
    if let Some(t) = pools.iter().position(Vec::is_empty) {
        return Err(HcpError::Dataset(format!(
            "session {} has an empty training pool; increase samples_per_session",
            t + 1
        )));
    }
    Ok(pools)
}

/// Training targets for session `t`: the sample's labels restricted to `C_t`,
/// in partition order.
pub fn mask_labels(sample: &MultiLabelSample, t: usize, protocol: &SessionProtocol) -> Result<Vec<bool>> {
    Ok(protocol
        .classes(t)?
        .iter()
        .map(|&k| sample.labels_full.get(k).copied().unwrap_or(false))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct ClassEntry {
    id: usize,
    name: String,
    prototype: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    id: usize,
    split: String,
    tokens: Vec<f64>,
    labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetDocument {
    config: DatasetConfig,
    classes: Vec<ClassEntry>,
    samples: Vec<SampleEntry>,
}

impl SyntheticDataset {
    pub fn to_json(&self) -> Result<String> {
        let entry = |s: &MultiLabelSample, split: &str| SampleEntry {
            id: s.sample_id,
            split: split.to_string(),
            tokens: s.tokens.data().to_vec(),
            labels: s.positives().collect(),
        };
        let doc = DatasetDocument {
            config: self.config.clone(),
            classes: self
                .classes
                .iter()
                .map(|c| ClassEntry {
                    id: c.class_id,
                    name: c.name.clone(),
                    prototype: c.prototype.clone(),
                })
                .collect(),
            samples: self
                .train
                .iter()
                .map(|s| entry(s, "train"))
                .chain(self.test.iter().map(|s| entry(s, "test")))
                .collect(),
        };
        serde_json::to_string(&doc).map_err(|e| HcpError::Dataset(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DatasetDocument = serde_json::from_str(text).map_err(|e| HcpError::from_json(e, text))?;
        let config = doc.config;
        let (l, d, n) = (config.tokens(), config.d, config.num_classes);
        let classes = doc
            .classes
            .into_iter()
            .map(|c| ClassSpec {
                class_id: c.id,
                name: c.name,
                prototype: c.prototype,
                occupancy: config.occupancy,
            })
            .collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for s in doc.samples {
            let mut labels_full = vec![false; n];
            for k in s.labels {
                *labels_full
                    .get_mut(k)
                    .ok_or_else(|| HcpError::Dataset(format!("label {k} out of range")))? = true;
            }
            let sample = MultiLabelSample {
                sample_id: s.id,
                tokens: Tensor::matrix(l, d, s.tokens)?,
                labels_full,
            };
            match s.split.as_str() {
                "train" => train.push(sample),
                "test" => test.push(sample),
                other => return Err(HcpError::Dataset(format!("unknown split {other:?}"))),
            }
        }
        Ok(SyntheticDataset {
            config,
            classes,
            train,
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        default_class_names(n)
    }

    #[test]
    fn protocol_shapes() {
        let p = build_protocol(20, 10, 2, &names(20)).unwrap();
        assert_eq!(
            p.partitions.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![10, 2, 2, 2, 2, 2]
        );
        let p = build_protocol(80, 0, 10, &names(80)).unwrap();
        assert_eq!(p.sessions(), 8);
        assert!(p.partitions.iter().all(|c| c.len() == 10));
        let p = build_protocol(4, 0, 4, &names(4)).unwrap();
        assert_eq!(p.sessions(), 1);
        assert!(matches!(build_protocol(20, 10, 3, &names(20)), Err(HcpError::Protocol(_))));
        let mut dup = names(4);
        dup[1] = dup[0].clone();
        assert!(build_protocol(4, 0, 4, &dup).is_err());
    }

    #[test]
    fn protocol_orders_by_name() {
        let raw: Vec<String> = ["zebra", "apple", "mango", "kiwi"].iter().map(|s| s.to_string()).collect();
        let p = build_protocol(4, 2, 1, &raw).unwrap();
        assert_eq!(p.names, vec!["apple", "kiwi", "mango", "zebra"]);
        assert_eq!(p.partitions, vec![vec![0, 1], vec![2], vec![3]]);
    }

    fn noiseless() -> DatasetConfig {
        let mut m = vec![vec![0.0; 4]; 4];
        m[2][2] = 1.0;
        DatasetConfig {
            num_classes: 4,
            d: 3,
            h: 2,
            w: 3,
            samples_per_session: 5,
            test_samples: 0,
            cooccurrence: Some(m),
            noise_std: 0.0,
            occupancy: 2,
            seed: 3,
        }
    }

    #[test]
    fn noiseless_sample_writes_exact_prototype_patches() {
        let cfg = noiseless();
        let classes = make_classes(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = generate_samples(&cfg, &classes, 10, 0, &mut rng).unwrap();
        for s in samples {
            assert_eq!(s.positives().collect::<Vec<_>>(), vec![2]);
            let proto = &classes[2].prototype;
            let mut hits = 0;
            let mut scale = None;
            for p in 0..cfg.tokens() {
                let row = s.tokens.row(p);
                if row.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let a = row[0] / proto[0];
                assert!((0.8..=1.2).contains(&a));
                for (x, q) in row.iter().zip(proto) {
                    assert!((x - a * q).abs() < 1e-12);
                }
                if let Some(prev) = scale {
                    assert_eq!(prev, a);
                }
                scale = Some(a);
                hits += 1;
            }
            assert_eq!(hits, cfg.occupancy);
        }
    }

    #[test]
    fn prototypes_unit_and_distinct() {
        let classes = make_classes(&DatasetConfig::default());
        for (i, c) in classes.iter().enumerate() {
            let n = c.prototype.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            for other in &classes[..i] {
                assert_ne!(other.prototype, c.prototype);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = DatasetConfig {
            samples_per_session: 50,
            test_samples: 200,
            ..DatasetConfig::default()
        };
        let a = SyntheticDataset::generate(&cfg, 2).unwrap();
        let b = SyntheticDataset::generate(&cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 100);
        let ids: BTreeSet<usize> = a.train.iter().map(|s| s.sample_id).collect();
        assert!(a.test.iter().all(|s| !ids.contains(&s.sample_id)));
    }

    #[test]
    fn label_cardinality_matches_analytic_expectation() {
        let cfg = DatasetConfig::default();
        let m = cfg.resolved_cooccurrence();
        let expected = expected_cardinality(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let sets = sample_label_sets(&cfg, 10_000, &mut rng);
        let mean = sets.iter().map(|s| s.iter().filter(|&&y| y).count() as f64).sum::<f64>() / 1e4;
        assert!((mean - expected).abs() / expected < 0.10, "mean {mean} vs {expected}");
    }

    #[test]
    fn occupancy_overflow_is_config_error() {
        let cfg = DatasetConfig {
            occupancy: 17,
            ..DatasetConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(HcpError::Config(_))));
    }

    fn sample_with(labels: &[usize], n: usize) -> MultiLabelSample {
        let mut full = vec![false; n];
        labels.iter().for_each(|&k| full[k] = true);
        MultiLabelSample {
            sample_id: 0,
            tokens: Tensor::zeros(vec![1, 1]),
            labels_full: full,
        }
    }

    #[test]
    fn pools_follow_membership_rule() {
        let p = build_protocol(6, 2, 2, &names(6)).unwrap();
        let train = vec![sample_with(&[0, 4], 6), sample_with(&[2], 6), sample_with(&[1, 3, 5], 6)];
        let pools = assign_sessions(&train, &p).unwrap();
        assert_eq!(pools, vec![vec![0, 2], vec![1, 2], vec![0, 2]]);
        let lonely = vec![sample_with(&[0], 6)];
        assert!(matches!(assign_sessions(&lonely, &p), Err(HcpError::Dataset(_))));
    }

    #[test]
    fn masking_examples() {
        let p = build_protocol(4, 2, 1, &names(4)).unwrap();
        let s = sample_with(&[0, 2], 4);
        assert_eq!(mask_labels(&s, 2, &p).unwrap(), vec![true]);
        assert_eq!(mask_labels(&s, 3, &p).unwrap(), vec![false]);
        let all = build_protocol(4, 0, 4, &names(4)).unwrap();
        assert_eq!(mask_labels(&s, 1, &all).unwrap(), s.labels_full);
    }

    #[test]
    fn json_round_trip() {
        let cfg = DatasetConfig {
            samples_per_session: 10,
            test_samples: 80,
            ..DatasetConfig::default()
        };
        let ds = SyntheticDataset::generate(&cfg, 1).unwrap();
        let back = SyntheticDataset::from_json(&ds.to_json().unwrap()).unwrap();
        assert_eq!(back, ds);
        assert!(matches!(SyntheticDataset::from_json("{\"config\": ["), Err(HcpError::Parse { .. })));
    }

    proptest! {
        #[test]
        fn protocol_partitions_are_exact(base in 0usize..12, inc in 1usize..6, steps in 1usize..6) {
            let n = base + inc * steps;
            let p = build_protocol(n, base, inc, &names(n)).unwrap();
            let mut all: Vec<usize> = p.partitions.iter().flatten().copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let first = if base == 0 { inc } else { base };
            prop_assert_eq!(p.partitions[0].len(), first);
            prop_assert!(p.partitions[1..].iter().all(|c| c.len() == inc));
        }

        #[test]
        fn masking_never_leaks(labels in proptest::collection::vec(any::<bool>(), 12), t in 1usize..=5) {
            let p = build_protocol(12, 4, 2, &names(12)).unwrap();
            let s = MultiLabelSample { sample_id: 0, tokens: Tensor::zeros(vec![1, 1]), labels_full: labels.clone() };
            let masked = mask_labels(&s, t, &p).unwrap();
            let classes = p.classes(t).unwrap();
            prop_assert_eq!(masked.len(), classes.len());
            for (m, &k) in masked.iter().zip(classes) {
                prop_assert_eq!(*m, labels[k]);
            }
        }
    }
}
