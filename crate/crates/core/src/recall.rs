//! Per-class confidence priors and old-class pseudo-labeling.
//!
//! After each session the model's sigmoid confidences on the positives of the
//! session's classes are summarized as (mean, variance, count). One session later
//! those means become class-specific pseudo-label thresholds for the frozen
//! snapshot's predictions on new data.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{HcpError, Result};

/// Threshold used for classes that have no fitted statistics.
pub const FALLBACK_THRESHOLD: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mean: f64,
    pub variance: f64,
    pub count: usize,
}

/// Mean and population variance of `values`. `None` for an empty slice.
pub fn summarize(values: &[f64]) -> Option<ClassStats> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(ClassStats {
        mean,
        variance,
        count: values.len(),
    })
}

/// Confidence statistics for each class in `class_ids`, computed over the
/// samples whose ground truth marks the class present.
///
/// `probs[i][c]` and `truths[i][c]` refer to sample `i` and `class_ids[c]`.
/// Classes without positives are left out (and logged).
pub fn fit_distributions(
    probs: &[Vec<f64>],
    truths: &[Vec<bool>],
    class_ids: &[usize],
) -> Result<BTreeMap<usize, ClassStats>> {
    if probs.len() != truths.len() {
        return Err(HcpError::Shape(format!(
            "{} probability rows for {} label rows",
            probs.len(),
            truths.len()
        )));
    }
    let mut out = BTreeMap::new();
    for (c, &class) in class_ids.iter().enumerate() {
        let mut values = Vec::new();
        for (p, y) in probs.iter().zip(truths) {
            if p.len() != class_ids.len() || y.len() != class_ids.len() {
                return Err(HcpError::Shape("row width differs from class list".into()));
            }
            if y[c] {
                values.push(p[c]);
            }
        }
        match summarize(&values) {
            Some(stats) => {
                out.insert(class, stats);
            }
            None => warn!("class {class} has no positives; its threshold falls back to {FALLBACK_THRESHOLD}"),
        }
    }
    Ok(out)
}

/// Statistics for an old class re-estimated without ground truth: the prior mean
/// is shifted by how much the newer model's confidence moved on the samples the
/// older model pseudo-labeled positive.
pub fn drift_adjusted(prior: &ClassStats, before: &[f64], after: &[f64]) -> Option<ClassStats> {
    if before.is_empty() || before.len() != after.len() {
        return None;
    }
    let shift = after.iter().zip(before).map(|(a, b)| a - b).sum::<f64>() / before.len() as f64;
    let spread = summarize(after)?;
    Some(ClassStats {
        mean: (prior.mean + shift).clamp(0.0, 1.0),
        variance: spread.variance,
        count: before.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum QueueUpdate {
    /// Newest statistics replace the old ones.
    Replace,
    /// `mean <- rho * old + (1 - rho) * new` (same for the variance).
    Ema { rho: f64 },
}

impl Default for QueueUpdate {
    fn default() -> Self {
        QueueUpdate::Replace
    }
}

/// Per-class mean confidence per session, append-only.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistory {
    pub entries: BTreeMap<usize, Vec<(usize, f64)>>,
}

impl ConfidenceHistory {
    pub fn record(&mut self, class: usize, session: usize, mean: f64) -> Result<()> {
        let list = self.entries.entry(class).or_default();
        if let Some(&(last, _)) = list.last() {
            if session <= last {
                return Err(HcpError::State(format!(
                    "history for class {class} already has session {last}, got {session}"
                )));
            }
        }
        list.push((session, mean));
        Ok(())
    }

    pub fn of(&self, class: usize) -> &[(usize, f64)] {
        self.entries.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn forgetting(&self, class: usize, session: usize) -> Result<f64> {
        confidence_forgetting(self.of(class), session)
    }
}

/// `max_{t < T} (mu_t - mu_T)` for one class's `(session, mean)` history.
pub fn confidence_forgetting(history: &[(usize, f64)], session: usize) -> Result<f64> {
    let current = history
        .iter()
        .find(|(t, _)| *t == session)
        .map(|&(_, m)| m)
        .ok_or_else(|| HcpError::Metric(format!("no confidence recorded at session {session}")))?;
    history
        .iter()
        .filter(|(t, _)| *t < session)
        .map(|&(_, m)| m - current)
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))))
        .ok_or_else(|| HcpError::Metric(format!("no confidence recorded before session {session}")))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceDistributionTable {
    pub stats: BTreeMap<usize, ClassStats>,
    pub history: ConfidenceHistory,
    pub last_session: usize,
    #[serde(default)]
    pub update: QueueUpdate,
}

impl ConfidenceDistributionTable {
    pub fn new(update: QueueUpdate) -> Self {
        ConfidenceDistributionTable {
            update,
            ..Default::default()
        }
    }

    /// Folds statistics computed after `session` into the queue.
    pub fn update_queue(&mut self, fresh: &BTreeMap<usize, ClassStats>, session: usize) -> Result<()> {
        if session <= self.last_session {
            return Err(HcpError::State(format!(
                "queue already updated for session {}, got {session}",
                self.last_session
            )));
        }
        for (&class, new) in fresh {
            let merged = match (self.update, self.stats.get(&class)) {
                (QueueUpdate::Ema { rho }, Some(old)) => ClassStats {
                    mean: rho * old.mean + (1.0 - rho) * new.mean,
                    variance: rho * old.variance + (1.0 - rho) * new.variance,
                    count: new.count,
                },
                _ => *new,
            };
            self.stats.insert(class, merged);
            self.history.record(class, session, merged.mean)?;
        }
        self.last_session = session;
        Ok(())
    }

    /// `mu_k - sigma_scale * sigma_k`, or the fallback for untabulated classes.
    pub fn threshold(&self, class: usize, sigma_scale: f64) -> f64 {
        self.stats
            .get(&class)
            .map_or(FALLBACK_THRESHOLD, |s| s.mean - sigma_scale * s.variance.sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum PseudoLabelConfig {
    /// Class-specific thresholds from the confidence table.
    Re {
        #[serde(default)]
        sigma_scale: f64,
    },
    Static { epsilon: f64 },
    TopK { k: usize },
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PseudoLabelConfig::Static { epsilon } if !(epsilon > 0.0 && epsilon < 1.0) => {
                Err(HcpError::Config(format!("static threshold {epsilon} outside (0,1)")))
            }
            PseudoLabelConfig::TopK { k } if k == 0 => Err(HcpError::Config("top-k needs k >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Pseudo-labels for old classes `class_ids` given the snapshot's probabilities.
    pub fn label(&self, probs: &[f64], class_ids: &[usize], table: &ConfidenceDistributionTable) -> Vec<bool> {
        match *self {
            PseudoLabelConfig::Re { sigma_scale } => {
                let thresholds: Vec<f64> = class_ids.iter().map(|&k| table.threshold(k, sigma_scale)).collect();
                pseudo_label_thresholds(probs, &thresholds)
            }
            PseudoLabelConfig::Static { epsilon } => pseudo_label_static(probs, epsilon),
            PseudoLabelConfig::TopK { k } => pseudo_label_topk(probs, k),
        }
    }
}

/// `y_k = p_k >= threshold_k`.
pub fn pseudo_label_thresholds(probs: &[f64], thresholds: &[f64]) -> Vec<bool> {
    probs.iter().zip(thresholds).map(|(p, t)| p >= t).collect()
}

/// Class-specific thresholding with `threshold_k = mu_k` from the table.
pub fn pseudo_label_re(probs: &[f64], class_ids: &[usize], table: &ConfidenceDistributionTable) -> Vec<bool> {
    PseudoLabelConfig::Re { sigma_scale: 0.0 }.label(probs, class_ids, table)
}

pub fn pseudo_label_static(probs: &[f64], epsilon: f64) -> Vec<bool> {
    probs.iter().map(|&p| p >= epsilon).collect()
}

/// Marks the `k` largest probabilities; ties go to the lower index.
pub fn pseudo_label_topk(probs: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = vec![false; probs.len()];
    for &i in order.iter().take(k) {
        out[i] = true;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Beta, Distribution};

    fn table(means: &[(usize, f64)]) -> ConfidenceDistributionTable {
        let mut t = ConfidenceDistributionTable::new(QueueUpdate::Replace);
        let fresh = means
            .iter()
            .map(|&(k, m)| (k, ClassStats { mean: m, variance: 0.0, count: 1 }))
            .collect();
        t.update_queue(&fresh, 1).unwrap();
        t
    }

    #[test]
    fn two_point_statistics() {
        let s = fit_distributions(&[vec![0.8], vec![0.6], vec![0.1]], &[vec![true], vec![true], vec![false]], &[4]).unwrap();
        let s = s[&4];
        assert!((s.mean - 0.7).abs() < 1e-12);
        assert!((s.variance - 0.01).abs() < 1e-12);
        assert_eq!(s.count, 2);
        let c = fit_distributions(&vec![vec![0.3]; 5], &vec![vec![true]; 5], &[0]).unwrap();
        assert_eq!(c[&0].variance, 0.0);
        assert!((c[&0].mean - 0.3).abs() < 1e-15);
    }

    #[test]
    fn missing_positives_fall_back() {
        let s = fit_distributions(&[vec![0.9, 0.2]], &[vec![true, false]], &[0, 1]).unwrap();
        assert!(s.contains_key(&0) && !s.contains_key(&1));
        let mut t = ConfidenceDistributionTable::default();
        t.update_queue(&s, 1).unwrap();
        assert_eq!(t.threshold(1, 0.0), FALLBACK_THRESHOLD);
    }

    #[test]
    fn beta_mean_within_three_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let beta = Beta::new(2.0, 5.0).unwrap();
        let probs: Vec<Vec<f64>> = (0..1000).map(|_| vec![beta.sample(&mut rng)]).collect();
        let s = fit_distributions(&probs, &vec![vec![true]; 1000], &[0]).unwrap()[&0];
        let mean = 2.0 / 7.0;
        let var = 2.0 * 5.0 / (49.0 * 8.0);
        assert!((s.mean - mean).abs() < 3.0 * (var / 1000.0f64).sqrt());
    }

    #[test]
    fn re_examples() {
        let t = table(&[(0, 0.9), (1, 0.5)]);
        assert_eq!(pseudo_label_re(&[0.95, 0.3], &[0, 1], &t), vec![true, false]);
        assert_eq!(pseudo_label_re(&[0.9, 0.5], &[0, 1], &t), vec![true, true]);
    }

    #[test]
    fn static_and_topk_examples() {
        assert_eq!(pseudo_label_static(&[0.85, 0.75], 0.8), vec![true, false]);
        assert_eq!(pseudo_label_topk(&[0.9, 0.8, 0.7], 2), vec![true, true, false]);
        assert_eq!(pseudo_label_topk(&[0.9, 0.8, 0.7], 3), vec![true; 3]);
        assert_eq!(pseudo_label_topk(&[0.9, 0.8], 5), vec![true; 2]);
        assert_eq!(pseudo_label_topk(&[0.5, 0.5, 0.1], 1), vec![true, false, false]);
        assert!(PseudoLabelConfig::Static { epsilon: 1.0 }.validate().is_err());
        assert!(PseudoLabelConfig::TopK { k: 0 }.validate().is_err());
    }

    #[test]
    fn queue_modes_and_history() {
        let stat = |m| ClassStats { mean: m, variance: 0.0, count: 3 };
        let mut t = ConfidenceDistributionTable::new(QueueUpdate::Replace);
        t.update_queue(&BTreeMap::from([(0, stat(0.9))]), 1).unwrap();
        t.update_queue(&BTreeMap::from([(0, stat(0.7))]), 2).unwrap();
        assert_eq!(t.stats[&0].mean, 0.7);
        t.update_queue(&BTreeMap::from([(0, stat(0.6))]), 3).unwrap();
        assert_eq!(t.history.of(0).len(), 3);
        assert!(matches!(t.update_queue(&BTreeMap::new(), 3), Err(HcpError::State(_))));

        let mut e = ConfidenceDistributionTable::new(QueueUpdate::Ema { rho: 0.5 });
        e.update_queue(&BTreeMap::from([(0, stat(0.9))]), 1).unwrap();
        e.update_queue(&BTreeMap::from([(0, stat(0.7))]), 2).unwrap();
        assert!((e.stats[&0].mean - 0.8).abs() < 1e-12);
    }

    #[test]
    fn forgetting_examples() {
        let f = confidence_forgetting(&[(1, 0.9), (2, 0.7), (3, 0.5)], 3).unwrap();
        assert!((f - 0.4).abs() < 1e-12);
        let f = confidence_forgetting(&[(1, 0.5), (2, 0.6), (3, 0.8)], 3).unwrap();
        assert!(f <= 0.0);
        let f = confidence_forgetting(&[(1, 0.9), (2, 0.05)], 2).unwrap();
        assert!((f - 0.85).abs() < 1e-12);
        assert!(matches!(confidence_forgetting(&[(1, 0.9)], 2), Err(HcpError::Metric(_))));
        assert!(matches!(confidence_forgetting(&[(2, 0.9)], 2), Err(HcpError::Metric(_))));
    }

    #[test]
    fn drift_shifts_prior_mean() {
        let prior = ClassStats { mean: 0.8, variance: 0.01, count: 10 };
        let s = drift_adjusted(&prior, &[0.9, 0.7], &[0.7, 0.5]).unwrap();
        assert!((s.mean - 0.6).abs() < 1e-12);
        assert!(drift_adjusted(&prior, &[], &[]).is_none());
    }

    proptest! {
        #[test]
        fn static_threshold_monotone(p in proptest::collection::vec(0.0f64..=1.0, 1..12), a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let loose = pseudo_label_static(&p, lo);
            let strict = pseudo_label_static(&p, hi);
            for (s, l) in strict.iter().zip(&loose) {
                prop_assert!(!s || *l);
            }
        }

        #[test]
        fn re_with_equal_means_is_static(p in proptest::collection::vec(0.0f64..=1.0, 1..12), eps in 0.01f64..0.99) {
            let ids: Vec<usize> = (0..p.len()).collect();
            let t = table(&ids.iter().map(|&k| (k, eps)).collect::<Vec<_>>());
            prop_assert_eq!(pseudo_label_re(&p, &ids, &t), pseudo_label_static(&p, eps));
        }

        #[test]
        fn fit_is_order_invariant(p in proptest::collection::vec(0.0f64..=1.0, 2..30), rot in 0usize..30) {
            let probs: Vec<Vec<f64>> = p.iter().map(|&x| vec![x]).collect();
            let truths: Vec<Vec<bool>> = (0..p.len()).map(|i| vec![i % 3 != 0]).collect();
            let a = fit_distributions(&probs, &truths, &[0]).unwrap();
            let k = rot % probs.len();
            let mut rp = probs.clone();
            let mut rt = truths.clone();
            rp.rotate_left(k);
            rt.rotate_left(k);
            let b = fit_distributions(&rp, &rt, &[0]).unwrap();
            prop_assert!((a[&0].mean - b[&0].mean).abs() < 1e-12);
            prop_assert!((a[&0].variance - b[&0].variance).abs() < 1e-12);
        }
    }
}
