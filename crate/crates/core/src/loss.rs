//! Weighted asymmetric loss over real-class and unknown probabilities.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{HcpError, Result};

/// Probabilities are clipped into `[PROB_CLIP, 1 - PROB_CLIP]` before logs.
pub const PROB_CLIP: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    /// Hard shift `m` applied to negative probabilities: `max(p - m, 0)`.
    pub clip: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            clip: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= 0.0) {
            return Err(HcpError::Config("focusing exponents must be non-negative".into()));
        }
        if self.gamma_neg < self.gamma_pos {
            return Err(HcpError::Config("gamma_neg must be >= gamma_pos".into()));
        }
        if !(0.0..1.0).contains(&self.clip) {
            return Err(HcpError::Config("clip must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `sqrt(|C_{1:t}| / |C_t|)`, the weight applied to current-session classes.
pub fn new_class_weight(n_total: usize, n_new: usize) -> Result<f64> {
    if n_new == 0 || n_total < n_new {
        return Err(HcpError::Contract(format!(
            "new-class weight needs 1 <= n_new <= n_total, got {n_new} of {n_total}"
        )));
    }
    Ok((n_total as f64 / n_new as f64).sqrt())
}

/// Loss `-(1/K) Σ w_k [y_k (1-p_k)^γ+ log p_k + (1-y_k) p̃_k^γ- log(1-p̃_k)]`
/// with `p̃_k = max(p_k - m, 0)`, on a `[K×1]` probability node.
pub fn wasl(tape: &mut Tape, probs: Var, targets: &[bool], weights: &[f64], cfg: &LossConfig) -> Result<Var> {
    let (k, c) = tape.dims(probs);
    if c != 1 || targets.len() != k || weights.len() != k {
        return Err(HcpError::Shape(format!(
            "wasl: {k}x{c} probabilities, {} targets, {} weights",
            targets.len(),
            weights.len()
        )));
    }
    if let Some(bad) = tape.value(probs).iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(HcpError::Domain(format!("probability {bad} outside [0, 1]")));
    }
    let p = tape.clamp(probs, PROB_CLIP, 1.0 - PROB_CLIP);

    let pos_mask: Vec<f64> = targets.iter().zip(weights).map(|(&y, w)| if y { *w } else { 0.0 }).collect();
    let neg_mask: Vec<f64> = targets.iter().zip(weights).map(|(&y, w)| if y { 0.0 } else { *w }).collect();

    // Positive part: (1 - p)^γ+ · log p
    let log_p = tape.log(p)?;
    let pos = if cfg.gamma_pos == 0.0 {
        log_p
    } else {
        let one_minus = tape.rsub_scalar(1.0, p);
        let focus = tape.pow(one_minus, cfg.gamma_pos)?;
        tape.mul(focus, log_p)?
    };
    let pos_w = tape.constant(k, 1, pos_mask)?;
    let pos = tape.mul(pos, pos_w)?;

    // Negative part: p̃^γ- · log(1 - p̃)
    let shifted = if cfg.clip > 0.0 {
        let s = tape.add_scalar(p, -cfg.clip);
        tape.clamp(s, 0.0, 1.0)
    } else {
        p
    };
    let one_minus = tape.rsub_scalar(1.0, shifted);
    let one_minus = tape.clamp(one_minus, PROB_CLIP, 1.0);
    let log_q = tape.log(one_minus)?;
    let neg = if cfg.gamma_neg == 0.0 {
        log_q
    } else {
        let focus = tape.pow(shifted, cfg.gamma_neg)?;
        tape.mul(focus, log_q)?
    };
    let neg_w = tape.constant(k, 1, neg_mask)?;
    let neg = tape.mul(neg, neg_w)?;

    let both = tape.add(pos, neg)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, -1.0 / k as f64))
}

/// Evaluates [`wasl`] on plain values.
pub fn wasl_value(probs: &[f64], targets: &[bool], weights: &[f64], cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.len().max(1), 1, probs.to_vec())?;
    let l = wasl(&mut tape, p, targets, weights, cfg)?;
    Ok(tape.scalar_value(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn plain() -> LossConfig {
        LossConfig {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            clip: 0.0,
        }
    }

    #[test]
    fn new_class_weights() {
        assert!((new_class_weight(20, 2).unwrap() - 3.16228).abs() < 1e-5);
        assert_eq!(new_class_weight(10, 10).unwrap(), 1.0);
        assert!((new_class_weight(80, 10).unwrap() - 2.82843).abs() < 1e-5);
        assert!(matches!(new_class_weight(5, 0), Err(HcpError::Contract(_))));
    }

    #[test]
    fn perfect_positive_has_no_loss() {
        let l = wasl_value(&[1.0], &[true], &[1.0], &LossConfig::default()).unwrap();
        assert!(l.abs() < 1e-7);
    }

    #[test]
    fn plain_settings_reduce_to_bce() {
        let p: [f64; 4] = [0.1, 0.45, 0.7, 0.93];
        let y = [true, false, true, false];
        let bce: f64 = -p
            .iter()
            .zip(y)
            .map(|(&p, y)| if y { p.ln() } else { (1.0 - p).ln() })
            .sum::<f64>()
            / 4.0;
        let l = wasl_value(&p, &y, &[1.0; 4], &plain()).unwrap();
        assert!((l - bce).abs() < 1e-12);
    }

    #[test]
    fn focused_negative_hand_value() {
        let cfg = LossConfig {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            clip: 0.0,
        };
        let l = wasl_value(&[0.5], &[false], &[1.0], &cfg).unwrap();
        assert!((l - 0.0625 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 0.04332).abs() < 1e-5);
    }

    #[test]
    fn out_of_range_probability_is_domain_error() {
        assert!(matches!(
            wasl_value(&[1.2], &[true], &[1.0], &plain()),
            Err(HcpError::Domain(_))
        ));
        assert!(matches!(
            wasl_value(&[0.2, 0.3], &[true], &[1.0], &plain()),
            Err(HcpError::Shape(_))
        ));
    }

    #[test]
    fn gradient_through_sigmoid_matches_differences() {
        let mut ps = vec![Tensor::matrix(4, 1, vec![1.3, -0.4, 0.2, -2.0]).unwrap().with_requires_grad(true)];
        let cfg = LossConfig {
            gamma_pos: 1.0,
            gamma_neg: 4.0,
            clip: 0.05,
        };
        let report = grad_check(&mut ps, 1e-5, |t, v| {
            let p = t.sigmoid(v[0]);
            wasl(t, p, &[true, false, true, false], &[2.0, 1.0, 1.0, 3.0], &cfg)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    proptest! {
        #[test]
        fn non_negative(p in proptest::collection::vec(0.0f64..=1.0, 1..8), seed in any::<u64>()) {
            let y: Vec<bool> = (0..p.len()).map(|i| (seed >> i) & 1 == 1).collect();
            let w: Vec<f64> = (0..p.len()).map(|i| 1.0 + i as f64).collect();
            let l = wasl_value(&p, &y, &w, &LossConfig::default()).unwrap();
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn gradient_signs(p in 0.1f64..0.9) {
            let cfg = LossConfig::default();
            for y in [true, false] {
                let mut tape = Tape::new();
                let pv = tape.leaf(&Tensor::scalar(p).with_requires_grad(true));
                let l = wasl(&mut tape, pv, &[y], &[1.0], &cfg).unwrap();
                let g = tape.backward(l).unwrap().get(pv).unwrap()[0];
                if y { prop_assert!(g < 0.0) } else { prop_assert!(g > 0.0) }
            }
        }

        #[test]
        fn weight_linearity(p in 0.01f64..0.99, y in any::<bool>(), w in 0.1f64..5.0) {
            let cfg = LossConfig::default();
            let one = wasl_value(&[p], &[y], &[w], &cfg).unwrap();
            let two = wasl_value(&[p], &[y], &[2.0 * w], &cfg).unwrap();
            prop_assert!((two - 2.0 * one).abs() <= 1e-12 * one.abs().max(1.0));
        }

        #[test]
        fn focusing_shrinks_negative_loss(p in 0.01f64..0.99, g in 0.0f64..6.0) {
            let at = |gamma: f64| wasl_value(&[p], &[false], &[1.0], &LossConfig { gamma_pos: 0.0, gamma_neg: gamma, clip: 0.0 }).unwrap();
            prop_assert!(at(g + 0.5) < at(g));
        }
    }
}
