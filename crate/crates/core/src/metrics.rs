//! Multi-label evaluation: AP/mAP, CF1/OF1, session accuracies and the
//! Calinski-Harabasz index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{HcpError, Result};
use crate::recall::ClassStats;

pub const F1_THRESHOLD: f64 = 0.5;

/// Scores and truths for `n` samples over `m` classes, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMatrix {
    pub scores: Vec<f64>,
    pub truths: Vec<bool>,
    pub sample_ids: Vec<usize>,
    pub class_ids: Vec<usize>,
    pub session: usize,
}

impl PredictionMatrix {
    pub fn new(scores: Vec<f64>, truths: Vec<bool>, sample_ids: Vec<usize>, class_ids: Vec<usize>, session: usize) -> Result<Self> {
        let (n, m) = (sample_ids.len(), class_ids.len());
        if scores.len() != n * m || truths.len() != n * m {
            return Err(HcpError::Shape(format!(
                "prediction matrix {n}x{m} with {} scores and {} truths",
                scores.len(),
                truths.len()
            )));
        }
        Ok(PredictionMatrix {
            scores,
            truths,
            sample_ids,
            class_ids,
            session,
        })
    }

    /// Builds from per-sample rows; sample ids default to row order.
    pub fn from_rows(scores: &[Vec<f64>], truths: &[Vec<bool>], class_ids: &[usize], session: usize) -> Result<Self> {
        let m = class_ids.len();
        if scores.len() != truths.len() || scores.iter().any(|r| r.len() != m) || truths.iter().any(|r| r.len() != m) {
            return Err(HcpError::Shape("ragged prediction rows".into()));
        }
        Self::new(
            scores.concat(),
            truths.concat(),
            (0..scores.len()).collect(),
            class_ids.to_vec(),
            session,
        )
    }

    pub fn samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn score_column(&self, j: usize) -> Vec<f64> {
        let m = self.classes();
        (0..self.samples()).map(|i| self.scores[i * m + j]).collect()
    }

    pub fn truth_column(&self, j: usize) -> Vec<bool> {
        let m = self.classes();
        (0..self.samples()).map(|i| self.truths[i * m + j]).collect()
    }
}

/// Non-interpolated AP of one column. Ranking is by descending score with
/// ties broken by lower sample id. `None` when the column has no positives.
pub fn average_precision(scores: &[f64], truths: &[bool], sample_ids: &[usize]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(sample_ids[a].cmp(&sample_ids[b])));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truths[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    pub per_class: BTreeMap<usize, f64>,
    pub excluded: Vec<usize>,
}

pub fn map_over_classes(pm: &PredictionMatrix) -> Result<MapResult> {
    let mut per_class = BTreeMap::new();
    let mut excluded = Vec::new();
    for (j, &c) in pm.class_ids.iter().enumerate() {
        match average_precision(&pm.score_column(j), &pm.truth_column(j), &pm.sample_ids) {
            Some(ap) => {
                per_class.insert(c, ap);
            }
            None => {
                log::warn!("class {c} has no positives in the evaluation split; excluded from mAP");
                excluded.push(c);
            }
        }
    }
    if per_class.is_empty() {
        return Err(HcpError::Metric("no class has a positive sample".into()));
    }
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MapResult { map, per_class, excluded })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub cf1: f64,
    pub of1: f64,
}

fn f1(tp: usize, fp: usize, fne: usize) -> f64 {
    let denom = 2 * tp + fp + fne;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

pub fn f1_scores(pm: &PredictionMatrix, threshold: f64) -> F1Scores {
    let m = pm.classes();
    let mut counts = vec![(0usize, 0usize, 0usize); m];
    for (k, (&s, &y)) in pm.scores.iter().zip(&pm.truths).enumerate() {
        let c = &mut counts[k % m];
        match (s >= threshold, y) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => {}
        }
    }
    let cf1 = if m == 0 {
        0.0
    } else {
        counts.iter().map(|&(tp, fp, fne)| f1(tp, fp, fne)).sum::<f64>() / m as f64
    };
    let (tp, fp, fne) = counts
        .iter()
        .fold((0, 0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1, acc.2 + c.2));
    F1Scores { cf1, of1: f1(tp, fp, fne) }
}

/// Calinski-Harabasz index. An infinite value (zero within-group dispersion)
/// is stored as `value: None, capped: true`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChIndex {
    pub value: Option<f64>,
    pub capped: bool,
}

impl ChIndex {
    pub fn finite(value: f64) -> Self {
        ChIndex {
            value: Some(value),
            capped: false,
        }
    }

    pub fn infinite() -> Self {
        ChIndex { value: None, capped: true }
    }

    pub fn as_f64(&self) -> f64 {
        if self.capped {
            f64::INFINITY
        } else {
            self.value.unwrap_or(f64::NAN)
        }
    }
}

pub fn calinski_harabasz(features: &[Vec<f64>], labels: &[usize]) -> Result<ChIndex> {
    let n = features.len();
    if labels.len() != n {
        return Err(HcpError::Shape(format!("{n} features, {} labels", labels.len())));
    }
    let d = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != d) {
        return Err(HcpError::Shape("ragged feature rows".into()));
    }
    let mut groups: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
    let mut center = vec![0.0; d];
    for (f, &l) in features.iter().zip(labels) {
        let g = groups.entry(l).or_insert_with(|| (0, vec![0.0; d]));
        g.0 += 1;
        for k in 0..d {
            g.1[k] += f[k];
            center[k] += f[k];
        }
    }
    let g = groups.len();
    if g < 2 {
        return Err(HcpError::Metric("Calinski-Harabasz needs at least two groups".into()));
    }
    if n <= g {
        return Err(HcpError::Metric(format!("Calinski-Harabasz needs more than {g} samples, got {n}")));
    }
    for c in center.iter_mut() {
        *c /= n as f64;
    }
    for (count, sum) in groups.values_mut() {
        for s in sum.iter_mut() {
            *s /= *count as f64;
        }
    }
    let between: f64 = groups
        .values()
        .map(|(count, mean)| *count as f64 * sq_dist(mean, &center))
        .sum();
    let within: f64 = features
        .iter()
        .zip(labels)
        .map(|(f, l)| sq_dist(f, &groups[l].1))
        .sum();
    if within == 0.0 {
        if between == 0.0 {
            log::warn!("all features identical; Calinski-Harabasz defined as 0");
            return Ok(ChIndex::finite(0.0));
        }
        return Ok(ChIndex::infinite());
    }
    Ok(ChIndex::finite((between / (g - 1) as f64) / (within / (n - g) as f64)))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub session: usize,
    pub map: f64,
    pub cf1: f64,
    pub of1: f64,
    pub per_class_ap: BTreeMap<usize, f64>,
    pub forgetting: BTreeMap<usize, f64>,
    /// Confidence-table statistics after the session.
    pub confidence: BTreeMap<usize, ClassStats>,
    pub ch_index: Option<ChIndex>,
    /// Seconds; kept out of serialized results so reruns compare bitwise.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub avg_acc: f64,
    pub last_acc: f64,
    pub last_cf1: f64,
    pub last_of1: f64,
}

pub fn average_accuracy(maps: &[f64]) -> Result<f64> {
    if maps.is_empty() {
        return Err(HcpError::Metric("no sessions to average".into()));
    }
    Ok(maps.iter().sum::<f64>() / maps.len() as f64)
}

pub fn session_accuracies(results: &[SessionResult]) -> Result<Accuracies> {
    let maps: Vec<f64> = results.iter().map(|r| r.map).collect();
    let avg_acc = average_accuracy(&maps)?;
    let last = results.last().expect("non-empty");
    Ok(Accuracies {
        avg_acc,
        last_acc: last.map,
        last_cf1: last.cf1,
        last_of1: last.of1,
    })
}
