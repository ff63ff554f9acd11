//! Unknown-class probing: convex Beta-weighted mixtures of absent-class features.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{HcpError, Result};
use crate::tensor::Tensor;

const MAX_REDRAWS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub beta: f64,
    /// Also score present real-class features on the unknown output with target 0.
    pub real_negative_targets: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            enabled: true,
            alpha: 1.0,
            beta: 1.0,
            real_negative_targets: false,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(HcpError::Config("Beta parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Row indices of `O_S` split by the effective label vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePartition {
    pub present: Vec<usize>,
    pub absent: Vec<usize>,
    /// Class id of each `O_S` row.
    pub class_ids: Vec<usize>,
}

impl FeaturePartition {
    pub fn present_ids(&self) -> Vec<usize> {
        self.present.iter().map(|&r| self.class_ids[r]).collect()
    }

    pub fn absent_ids(&self) -> Vec<usize> {
        self.absent.iter().map(|&r| self.class_ids[r]).collect()
    }

    /// Copies the rows of `features` listed in `rows`.
    pub fn gather(features: &Tensor, rows: &[usize]) -> Result<Option<Tensor>> {
        if rows.is_empty() {
            return Ok(None);
        }
        let d = features.cols();
        let data = rows.iter().flat_map(|&r| features.row(r).to_vec()).collect();
        Ok(Some(Tensor::matrix(rows.len(), d, data)?))
    }
}

pub fn partition_features(rows: usize, labels: &[bool], class_ids: &[usize]) -> Result<FeaturePartition> {
    if labels.len() != rows || class_ids.len() != rows {
        return Err(HcpError::Shape(format!(
            "{rows} feature rows, {} labels, {} class ids",
            labels.len(),
            class_ids.len()
        )));
    }
    let (present, absent) = (0..rows).partition(|&i| labels[i]);
    Ok(FeaturePartition {
        present,
        absent,
        class_ids: class_ids.to_vec(),
    })
}

/// Normalized Beta weights over `m` absent features. All-zero draws are redrawn
/// a few times before falling back to uniform weights.
pub fn sample_weights(m: usize, alpha: f64, beta: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if m == 0 {
        return Ok(Vec::new());
    }
    let dist = Beta::new(alpha, beta).map_err(|e| HcpError::Config(format!("Beta({alpha}, {beta}): {e}")))?;
    for _ in 0..=MAX_REDRAWS {
        let raw: Vec<f64> = (0..m).map(|_| dist.sample(rng)).collect();
        let total: f64 = raw.iter().sum();
        if total > f64::MIN_POSITIVE && total.is_finite() {
            return Ok(normalize(raw, total));
        }
    }
    Ok(vec![1.0 / m as f64; m])
}

fn normalize(raw: Vec<f64>, total: f64) -> Vec<f64> {
    let mut w: Vec<f64> = raw.into_iter().map(|x| x / total).collect();
    // Push the rounding residue onto the largest weight so the sum is 1 to the ulp.
    let residue = 1.0 - w.iter().sum::<f64>();
    if let Some(big) = w.iter_mut().max_by(|a, b| a.total_cmp(b)) {
        *big += residue;
    }
    w
}

/// Weighted mixture of absent features.
#[derive(Clone, Debug, PartialEq)]
pub struct UnknownSample {
    pub feature: Vec<f64>,
    pub weights: Vec<f64>,
    pub target: bool,
}

/// Synthesizes one unknown feature from the rows of `absent` (`M₂ × d`).
/// Returns `None` when there are no absent features.
pub fn synthesize_unknown(absent: Option<&Tensor>, alpha: f64, beta: f64, rng: &mut impl Rng) -> Result<Option<UnknownSample>> {
    let Some(absent) = absent else { return Ok(None) };
    let (m, d) = absent.dims2()?;
    let weights = sample_weights(m, alpha, beta, rng)?;
    let mut feature = vec![0.0; d];
    for (i, w) in weights.iter().enumerate() {
        for (f, x) in feature.iter_mut().zip(absent.row(i)) {
            *f += w * x;
        }
    }
    Ok(Some(UnknownSample {
        feature,
        weights,
        target: true,
    }))
}

/// Differentiable unknown feature `[1×d]` built from rows of `class_features`
/// with constant mixing weights on `partition.absent`.
pub fn unknown_feature_on_tape(
    tape: &mut Tape,
    class_features: Var,
    partition: &FeaturePartition,
    weights: &[f64],
) -> Result<Option<Var>> {
    if partition.absent.is_empty() {
        return Ok(None);
    }
    if weights.len() != partition.absent.len() {
        return Err(HcpError::Shape("one weight per absent feature required".into()));
    }
    let m = tape.dims(class_features).0;
    let mut row = vec![0.0; m];
    for (&r, &w) in partition.absent.iter().zip(weights) {
        row[r] = w;
    }
    let mix = tape.constant(1, m, row)?;
    Ok(Some(tape.matmul(mix, class_features)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn partition_examples() {
        let p = partition_features(3, &[true, false, true], &[7, 8, 9]).unwrap();
        assert_eq!(p.present, vec![0, 2]);
        assert_eq!(p.absent, vec![1]);
        assert_eq!(p.absent_ids(), vec![8]);
        let all = partition_features(2, &[true, true], &[0, 1]).unwrap();
        assert!(all.absent.is_empty());
        assert!(matches!(partition_features(3, &[true], &[0, 1, 2]), Err(HcpError::Shape(_))));
    }

    #[test]
    fn partition_recombines_bitwise() {
        let feats = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0], vec![-1.0, 0.1]]).unwrap();
        let p = partition_features(3, &[false, true, false], &[0, 1, 2]).unwrap();
        let present = FeaturePartition::gather(&feats, &p.present).unwrap().unwrap();
        let absent = FeaturePartition::gather(&feats, &p.absent).unwrap().unwrap();
        let mut rebuilt = vec![Vec::new(); 3];
        for (i, &r) in p.present.iter().enumerate() {
            rebuilt[r] = present.row(i).to_vec();
        }
        for (i, &r) in p.absent.iter().enumerate() {
            rebuilt[r] = absent.row(i).to_vec();
        }
        assert_eq!(Tensor::from_rows(&rebuilt).unwrap().to_bytes(), feats.to_bytes());
    }

    #[test]
    fn single_absent_feature_is_copied() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let row = Tensor::from_rows(&[vec![0.3, -0.7, 2.0]]).unwrap();
        for _ in 0..10 {
            let u = synthesize_unknown(Some(&row), 0.5, 2.0, &mut rng).unwrap().unwrap();
            assert_eq!(u.weights, vec![1.0]);
            assert_eq!(u.feature, row.data());
            assert!(u.target);
        }
        assert!(synthesize_unknown(None, 1.0, 1.0, &mut rng).unwrap().is_none());
    }

    #[test]
    fn mixture_arithmetic() {
        let raw = vec![1.0, 3.0];
        let w = normalize(raw, 4.0);
        assert_eq!(w, vec![0.25, 0.75]);
        let rows = [[1.0, 0.0], [0.0, 1.0]];
        let f: Vec<f64> = (0..2).map(|c| w[0] * rows[0][c] + w[1] * rows[1][c]).collect();
        assert_eq!(f, vec![0.25, 0.75]);
    }

    #[test]
    fn weights_on_simplex_and_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        for m in 1..10 {
            let wa = sample_weights(m, 1.0, 1.0, &mut a).unwrap();
            let wb = sample_weights(m, 1.0, 1.0, &mut b).unwrap();
            assert_eq!(wa, wb);
            assert!(wa.iter().all(|&w| w >= 0.0));
            assert!((wa.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_beta_falls_back_to_uniform() {
        // Tiny shape parameters put almost all mass at exactly 0 in f64.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = sample_weights(3, 1e-300, 1.0, &mut rng).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tape_mixture_only_touches_absent_rows() {
        let feats = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]])
            .unwrap()
            .with_requires_grad(true);
        let mut tape = Tape::new();
        let fv = tape.leaf(&feats);
        let p = partition_features(3, &[true, false, false], &[0, 1, 2]).unwrap();
        let u = unknown_feature_on_tape(&mut tape, fv, &p, &[0.25, 0.75]).unwrap().unwrap();
        assert_eq!(tape.value(u), &[4.5, 5.5]);
        let s = tape.sum(u);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(fv).unwrap(), &[0.0, 0.0, 0.25, 0.25, 0.75, 0.75]);
        let none = partition_features(3, &[true; 3], &[0, 1, 2]).unwrap();
        assert!(unknown_feature_on_tape(&mut tape, fv, &none, &[]).unwrap().is_none());
    }
}
