//! Central finite-difference checking of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::loss::{wasl, LossConfig};
use crate::probe::{partition_features, unknown_feature_on_tape};
use crate::purifier::{BoundPurifier, PurifierConfig, PurifierModel};
use crate::tensor::Tensor;

/// Outcome of a gradient check over a parameter list.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// (parameter index, element index) of the worst relative error.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares autodiff gradients of `build` against central differences with
/// step `h` for every element of every tensor in `params` that requires grad.
///
/// `build` receives a fresh tape and the leaf handles of `params` (same order)
/// and must return a scalar loss node.
pub fn grad_check<F>(params: &mut [Tensor], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.scalar_value(loss))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| {
            grads
                .get(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: (0, 0),
    };
    for pi in 0..params.len() {
        if !params[pi].requires_grad() {
            continue;
        }
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            params[pi].data_mut()[ei] = orig + h;
            let plus = eval(params)?;
            params[pi].data_mut()[ei] = orig - h;
            let minus = eval(params)?;
            params[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][ei];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Gradient check over every parameter of a purifier model (frozen ones
/// included) for the loss built by `build`.
pub fn model_grad_check<F>(model: &PurifierModel, h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundPurifier) -> Result<Var>,
{
    let mut model = model.clone();
    model.unfreeze();
    let eval = |m: &PurifierModel| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape)?;
        let loss = build(&mut tape, &bound)?;
        Ok(tape.scalar_value(loss))
    };
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let loss = build(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = bound
        .leaves()
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.get(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: (0, 0),
    };
    let n_params = analytic.len();
    for pi in 0..n_params {
        for ei in 0..analytic[pi].len() {
            let orig = model.params()[pi].data()[ei];
            model.params_mut()[pi].data_mut()[ei] = orig + h;
            let plus = eval(&model)?;
            model.params_mut()[pi].data_mut()[ei] = orig - h;
            let minus = eval(&model)?;
            model.params_mut()[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][ei];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Standard check: 3 blocks, d = 8, 2 heads, 4 classes (2 old behind the
/// stability head, 2 new plus the unknown output), 4 patch tokens, weighted
/// asymmetric loss with one synthesized unknown feature. Step `1e-5`.
pub fn purifier_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = PurifierConfig {
        d: 8,
        heads: 2,
        blocks: 3,
        pre_norm: true,
    };
    let mut model = PurifierModel::new(cfg, &mut rng)?;
    model.expand_for_session(&[0, 1], &mut rng)?;
    model.merge_classifiers()?;
    model.expand_for_session(&[2, 3], &mut rng)?;
    // Larger embeddings than the training init so every path carries signal.
    for p in model.params_mut() {
        if p.rows() == 2 && p.cols() == 8 {
            p.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
    }
    let tokens = Tensor::matrix(4, 8, (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let targets = [true, false, false, true];
    let weights = [1.0, 1.0, 2f64.sqrt(), 2f64.sqrt(), 1.0];
    let lambda = [0.3, 0.7];
    let loss_cfg = LossConfig::default();
    model_grad_check(&model, 1e-5, |tape, bound| {
        let p = tape.leaf(&tokens);
        let out = bound.forward_purify(tape, p)?;
        let part = partition_features(4, &targets, &[0, 1, 2, 3])?;
        let u = unknown_feature_on_tape(tape, out.classes, &part, &lambda)?;
        let logits = bound.classify_with_unknown(tape, out.classes, u)?;
        let probs = tape.sigmoid(logits);
        let mut y = targets.to_vec();
        y.push(true);
        wasl(tape, probs, &y, &weights, &loss_cfg)
    })
}
