//! Feature purification network.
//!
//! Learnable class embeddings `S` are appended to the patch tokens `P` and the
//! joint sequence runs through a stack of pre-norm multi-head self-attention
//! blocks with residual connections. The class rows of the output are the
//! purified class features `O_S`; each row is scored by its own class's weight
//! vector (diagonal wiring) in either the frozen stability head (old classes)
//! or the trainable plasticity head (current classes plus one unknown output).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{HcpError, Result};
use crate::tensor::Tensor;

pub const EMBEDDING_INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;

pub(crate) fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

fn filled(rows: usize, cols: usize, v: f64) -> Tensor {
    Tensor::matrix(rows, cols, vec![v; rows * cols]).expect("positive extents")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub heads: usize,
    pub norm_scale: Tensor,
    pub norm_shift: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl AttentionBlock {
    pub fn new(d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(HcpError::Config(format!("width {d} not divisible by {heads} heads")));
        }
        let std = 1.0 / (d as f64).sqrt();
        Ok(AttentionBlock {
            heads,
            norm_scale: filled(1, d, 1.0).with_requires_grad(true),
            norm_shift: filled(1, d, 0.0).with_requires_grad(true),
            w_q: gaussian(d, d, std, rng).with_requires_grad(true),
            w_k: gaussian(d, d, std, rng).with_requires_grad(true),
            w_v: gaussian(d, d, std, rng).with_requires_grad(true),
            w_o: gaussian(d, d, 0.5 * std, rng).with_requires_grad(true),
            b_o: filled(1, d, 0.0).with_requires_grad(true),
        })
    }

    /// Block with no normalization and `W_q = W_k = 0`, `W_v = W_o = I`, `b_o = 0`.
    pub fn uniform_identity(d: usize, heads: usize) -> Self {
        AttentionBlock {
            heads,
            norm_scale: filled(1, d, 1.0),
            norm_shift: filled(1, d, 0.0),
            w_q: Tensor::zeros(vec![d, d]),
            w_k: Tensor::zeros(vec![d, d]),
            w_v: Tensor::identity(d),
            w_o: Tensor::identity(d),
            b_o: Tensor::zeros(vec![1, d]),
        }
    }

    pub(crate) fn tensors(&self) -> [&Tensor; 7] {
        [
            &self.norm_scale,
            &self.norm_shift,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.b_o,
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor; 7] {
        [
            &mut self.norm_scale,
            &mut self.norm_shift,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.b_o,
        ]
    }
}

/// Leaf handles of one attention block on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    pub heads: usize,
    pub norm: bool,
    pub norm_scale: Var,
    pub norm_shift: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

impl BoundBlock {
    pub(crate) fn bind(tape: &mut Tape, block: &AttentionBlock, norm: bool) -> Self {
        BoundBlock {
            heads: block.heads,
            norm,
            norm_scale: tape.leaf(&block.norm_scale),
            norm_shift: tape.leaf(&block.norm_shift),
            w_q: tape.leaf(&block.w_q),
            w_k: tape.leaf(&block.w_k),
            w_v: tape.leaf(&block.w_v),
            w_o: tape.leaf(&block.w_o),
            b_o: tape.leaf(&block.b_o),
        }
    }

    pub(crate) fn leaves(&self) -> [Var; 7] {
        [
            self.norm_scale,
            self.norm_shift,
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.b_o,
        ]
    }

    /// `X + W_o·softmax(Q Kᵀ / sqrt(d/h))·V + b_o` per head, on (optionally
    /// normalized) input rows. Returns the output and each head's attention matrix.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        let d = tape.dims(x).1;
        let xn = if self.norm {
            let n = tape.normalize_rows(x, NORM_EPS);
            let n = tape.mul_row(n, self.norm_scale)?;
            tape.add_row(n, self.norm_shift)?
        } else {
            x
        };
        let q = tape.matmul(xn, self.w_q)?;
        let k = tape.matmul(xn, self.w_k)?;
        let v = tape.matmul(xn, self.w_v)?;
        let dh = d / self.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv);
            let attn = tape.softmax_rows(scores)?;
            maps.push(attn);
            outs.push(tape.matmul(attn, vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let o = tape.matmul(joined, self.w_o)?;
        let o = tape.add_row(o, self.b_o)?;
        Ok((tape.add(x, o)?, maps))
    }
}

/// Diagonal linear head: output `k` scores feature row `k` as `w_k · o_k + b_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// `[outputs × d]`, one weight row per output.
    pub weight: Tensor,
    /// `[outputs × 1]`.
    pub bias: Tensor,
}

impl LinearHead {
    pub fn new(outputs: usize, d: usize, rng: &mut impl Rng) -> Self {
        LinearHead {
            weight: gaussian(outputs, d, 1.0 / (d as f64).sqrt(), rng).with_requires_grad(true),
            bias: Tensor::zeros(vec![outputs, 1]).with_requires_grad(true),
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    fn set_trainable(&mut self, flag: bool) {
        self.weight.set_requires_grad(flag);
        self.bias.set_requires_grad(flag);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub weight: Var,
    pub bias: Var,
}

impl BoundHead {
    fn bind(tape: &mut Tape, head: &LinearHead) -> Self {
        BoundHead {
            weight: tape.leaf(&head.weight),
            bias: tape.leaf(&head.bias),
        }
    }

    /// Scores rows `features[i]` with outputs `lo + i`.
    pub fn diagonal(&self, tape: &mut Tape, features: Var, lo: usize) -> Result<Var> {
        let (rows, _) = tape.dims(features);
        let outputs = tape.dims(self.weight).0;
        if lo + rows > outputs {
            return Err(HcpError::Shape(format!(
                "{rows} feature rows from output {lo} exceed head arity {outputs}"
            )));
        }
        let w = tape.slice_rows(self.weight, lo, lo + rows)?;
        let b = tape.slice_rows(self.bias, lo, lo + rows)?;
        let prod = tape.mul(features, w)?;
        let dots = tape.row_sums(prod);
        tape.add(dots, b)
    }

    /// Scores every feature row with a single output `k`.
    pub fn broadcast(&self, tape: &mut Tape, features: Var, k: usize) -> Result<Var> {
        let w = tape.slice_rows(self.weight, k, k + 1)?;
        let b = tape.slice_rows(self.bias, k, k + 1)?;
        let prod = tape.mul_row(features, w)?;
        let dots = tape.row_sums(prod);
        let rows = tape.dims(dots).0;
        if rows == 1 {
            tape.add(dots, b)
        } else {
            let ones = tape.constant(rows, 1, vec![1.0; rows])?;
            let bb = tape.mul(ones, b)?;
            tape.add(dots, bb)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbeddingBank {
    /// `S_{1:t-1}`, never trained.
    pub frozen: Option<Tensor>,
    /// `S_t`.
    pub trainable: Option<Tensor>,
    /// Class id of each row, frozen rows first.
    pub class_ids: Vec<usize>,
}

impl ClassEmbeddingBank {
    pub fn rows(&self) -> usize {
        self.class_ids.len()
    }

    pub fn frozen_rows(&self) -> usize {
        self.frozen.as_ref().map_or(0, Tensor::rows)
    }

    pub fn trainable_rows(&self) -> usize {
        self.trainable.as_ref().map_or(0, Tensor::rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierPair {
    /// Frozen head over `C_{1:t-1}`.
    pub stability: Option<LinearHead>,
    /// Trainable head over `C_t` plus the trailing unknown output.
    pub plasticity: Option<LinearHead>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurifierConfig {
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub pre_norm: bool,
}

impl Default for PurifierConfig {
    fn default() -> Self {
        PurifierConfig {
            d: 16,
            heads: 2,
            blocks: 3,
            pre_norm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurifierModel {
    pub config: PurifierConfig,
    pub bank: ClassEmbeddingBank,
    pub blocks: Vec<AttentionBlock>,
    pub classifiers: ClassifierPair,
    /// Index of the latest session the model was expanded for (0 = fresh).
    pub session: usize,
}

/// All leaves of a model on one tape.
#[derive(Clone, Debug)]
pub struct BoundPurifier {
    pub blocks: Vec<BoundBlock>,
    pub frozen: Option<Var>,
    pub trainable: Option<Var>,
    /// Joint embedding matrix `S = [S_{1:t-1}; S_t]`.
    pub embeddings: Var,
    pub stability: Option<BoundHead>,
    pub plasticity: Option<BoundHead>,
    leaves: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct PurifyOutput {
    pub patches: Var,
    pub classes: Var,
    /// Attention matrices, `blocks × heads` of them.
    pub attention: Vec<Var>,
}

impl PurifierModel {
    pub fn new(config: PurifierConfig, rng: &mut impl Rng) -> Result<Self> {
        let blocks = (0..config.blocks)
            .map(|_| AttentionBlock::new(config.d, config.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(PurifierModel {
            config,
            bank: ClassEmbeddingBank {
                frozen: None,
                trainable: None,
                class_ids: Vec::new(),
            },
            blocks,
            classifiers: ClassifierPair {
                stability: None,
                plasticity: None,
            },
            session: 0,
        })
    }

    pub fn width(&self) -> usize {
        self.config.d
    }

    pub fn known_classes(&self) -> &[usize] {
        &self.bank.class_ids
    }

    pub fn old_count(&self) -> usize {
        self.bank.frozen_rows()
    }

    pub fn new_count(&self) -> usize {
        self.bank.trainable_rows()
    }

    /// Opens a new session: current trainable embeddings are frozen, fresh rows
    /// are drawn for `new_ids` and a plasticity head of arity `|new| + 1` is created.
    pub fn expand_for_session(&mut self, new_ids: &[usize], rng: &mut impl Rng) -> Result<()> {
        if new_ids.is_empty() {
            return Err(HcpError::Registry("no new classes to add".into()));
        }
        for (i, id) in new_ids.iter().enumerate() {
            if self.bank.class_ids.contains(id) || new_ids[..i].contains(id) {
                return Err(HcpError::Registry(format!("class {id} already registered")));
            }
        }
        if self.classifiers.plasticity.is_some() {
            return Err(HcpError::State(
                "session still open; merge classifiers before expanding".into(),
            ));
        }
        let d = self.config.d;
        if let Some(mut t) = self.bank.trainable.take() {
            t.set_requires_grad(false);
            self.bank.frozen = Some(match self.bank.frozen.take() {
                Some(f) => f.vstack(&t)?,
                None => t,
            });
        }
        self.bank.trainable =
            Some(gaussian(new_ids.len(), d, EMBEDDING_INIT_STD, rng).with_requires_grad(true));
        self.bank.class_ids.extend_from_slice(new_ids);
        self.classifiers.plasticity = Some(LinearHead::new(new_ids.len() + 1, d, rng));
        self.session += 1;
        Ok(())
    }

    /// Folds the plasticity head's real-class outputs into the stability head
    /// and drops the unknown output.
    pub fn merge_classifiers(&mut self) -> Result<()> {
        let plastic = self
            .classifiers
            .plasticity
            .take()
            .ok_or_else(|| HcpError::State("no open plasticity head to merge".into()))?;
        let n_new = plastic.outputs() - 1;
        let mut w = plastic.weight.slice_rows(0, n_new)?;
        let mut b = plastic.bias.slice_rows(0, n_new)?;
        if let Some(stab) = self.classifiers.stability.take() {
            w = stab.weight.vstack(&w)?;
            b = stab.bias.vstack(&b)?;
        }
        let mut head = LinearHead { weight: w, bias: b };
        head.set_trainable(false);
        self.classifiers.stability = Some(head);
        Ok(())
    }

    /// Every parameter tensor in binding order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.blocks.iter().flat_map(|b| b.tensors()).collect();
        out.extend(self.bank.frozen.iter());
        out.extend(self.bank.trainable.iter());
        if let Some(h) = &self.classifiers.stability {
            out.extend([&h.weight, &h.bias]);
        }
        if let Some(h) = &self.classifiers.plasticity {
            out.extend([&h.weight, &h.bias]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.blocks.iter_mut().flat_map(|b| b.tensors_mut()).collect();
        out.extend(self.bank.frozen.iter_mut());
        out.extend(self.bank.trainable.iter_mut());
        if let Some(h) = &mut self.classifiers.stability {
            out.extend([&mut h.weight, &mut h.bias]);
        }
        if let Some(h) = &mut self.classifiers.plasticity {
            out.extend([&mut h.weight, &mut h.bias]);
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundPurifier> {
        if self.bank.rows() == 0 {
            return Err(HcpError::State("model has no classes yet".into()));
        }
        let blocks: Vec<BoundBlock> = self
            .blocks
            .iter()
            .map(|b| BoundBlock::bind(tape, b, self.config.pre_norm))
            .collect();
        let frozen = self.bank.frozen.as_ref().map(|t| tape.leaf(t));
        let trainable = self.bank.trainable.as_ref().map(|t| tape.leaf(t));
        let embeddings = match (frozen, trainable) {
            (Some(f), Some(t)) => tape.concat_rows(f, t)?,
            (Some(f), None) => f,
            (None, Some(t)) => t,
            (None, None) => unreachable!("bank has rows"),
        };
        let stability = self.classifiers.stability.as_ref().map(|h| BoundHead::bind(tape, h));
        let plasticity = self.classifiers.plasticity.as_ref().map(|h| BoundHead::bind(tape, h));
        let mut leaves: Vec<Var> = blocks.iter().flat_map(|b| b.leaves()).collect();
        leaves.extend(frozen);
        leaves.extend(trainable);
        for h in stability.iter().chain(plasticity.iter()) {
            leaves.extend([h.weight, h.bias]);
        }
        Ok(BoundPurifier {
            blocks,
            frozen,
            trainable,
            embeddings,
            stability,
            plasticity,
            leaves,
        })
    }

    /// Adds gradients from a reverse sweep into each trainable tensor.
    pub fn accumulate_grads(&mut self, bound: &BoundPurifier, grads: &Gradients) -> Result<()> {
        let leaves = bound.leaves.clone();
        for (t, v) in self.params_mut().into_iter().zip(leaves) {
            grads.accumulate_into(v, t)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Byte image of every parameter excluded from training (frozen embeddings
    /// and the stability head under the usual discipline).
    pub fn frozen_bytes(&self) -> Vec<u8> {
        self.params()
            .into_iter()
            .filter(|t| !t.requires_grad())
            .flat_map(Tensor::to_bytes)
            .collect()
    }

    /// Makes old embeddings and the stability head trainable again, as plain
    /// fine-tuning does.
    pub fn unfreeze(&mut self) {
        if let Some(f) = &mut self.bank.frozen {
            f.set_requires_grad(true);
        }
        if let Some(h) = &mut self.classifiers.stability {
            h.set_trainable(true);
        }
    }
}

impl BoundPurifier {
    /// Leaf handles in [`PurifierModel::params`] order.
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    /// Runs `[P; S]` through every block and splits the result into
    /// `O_P` (first `L` rows) and `O_S` (last `M` rows).
    pub fn forward_purify(&self, tape: &mut Tape, patches: Var) -> Result<PurifyOutput> {
        let (l, width) = tape.dims(patches);
        let (m, d) = tape.dims(self.embeddings);
        if width != d {
            return Err(HcpError::Shape(format!("token width {width} but model width {d}")));
        }
        let mut x = tape.concat_rows(patches, self.embeddings)?;
        let mut attention = Vec::new();
        for block in &self.blocks {
            let (next, maps) = block.forward(tape, x)?;
            attention.extend(maps);
            x = next;
        }
        Ok(PurifyOutput {
            patches: tape.slice_rows(x, 0, l)?,
            classes: tape.slice_rows(x, l, l + m)?,
            attention,
        })
    }

    /// Real-class logits `[M×1]` in bank order: frozen rows through the
    /// stability head, trainable rows through the plasticity head.
    pub fn classify(&self, tape: &mut Tape, class_features: Var) -> Result<Var> {
        let (m, _) = tape.dims(class_features);
        let (bank_rows, _) = tape.dims(self.embeddings);
        if m != bank_rows {
            return Err(HcpError::Shape(format!(
                "{m} class features for {bank_rows} registered classes"
            )));
        }
        // Between merge and the next expansion the stability head covers every row.
        let n_old = self.stability.map_or(0, |h| tape.dims(h.weight).0);
        if n_old > m {
            return Err(HcpError::Shape(format!(
                "stability head has {n_old} outputs for {m} class rows"
            )));
        }
        let mut parts = Vec::with_capacity(2);
        if let Some(head) = self.stability {
            let rows = tape.slice_rows(class_features, 0, n_old)?;
            parts.push(head.diagonal(tape, rows, 0)?);
        }
        if m > n_old {
            let head = self
                .plasticity
                .ok_or_else(|| HcpError::Shape("trainable classes without a plasticity head".into()))?;
            if tape.dims(head.weight).0 != m - n_old + 1 {
                return Err(HcpError::Shape("plasticity head arity must be |C_t| + 1".into()));
            }
            let rows = tape.slice_rows(class_features, n_old, m)?;
            parts.push(head.diagonal(tape, rows, 0)?);
        }
        match parts.as_slice() {
            [one] => Ok(*one),
            [a, b] => tape.concat_rows(*a, *b),
            _ => unreachable!("at least one class row"),
        }
    }

    /// Unknown-output logits for each row of `features` (`[r×1]`).
    pub fn unknown_logits(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let head = self
            .plasticity
            .ok_or_else(|| HcpError::State("no plasticity head for the unknown output".into()))?;
        let k = tape.dims(head.weight).0 - 1;
        head.broadcast(tape, features, k)
    }

    /// Real logits followed by the unknown logit when a synthesized feature is given.
    pub fn classify_with_unknown(&self, tape: &mut Tape, class_features: Var, unknown: Option<Var>) -> Result<Var> {
        let real = self.classify(tape, class_features)?;
        match unknown {
            Some(u) => {
                let ul = self.unknown_logits(tape, u)?;
                tape.concat_rows(real, ul)
            }
            None => Ok(real),
        }
    }
}

/// Forward pass outside training: returns `(O_P, O_S, real logits)` as tensors.
pub fn infer(model: &PurifierModel, tokens: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let p = tape.leaf(tokens);
    let out = bound.forward_purify(&mut tape, p)?;
    let logits = bound.classify(&mut tape, out.classes)?;
    Ok((
        tape.to_tensor(out.patches),
        tape.to_tensor(out.classes),
        tape.value(logits).to_vec(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn model(d: usize, classes: &[usize]) -> PurifierModel {
        let mut r = rng();
        let mut m = PurifierModel::new(
            PurifierConfig {
                d,
                heads: 2,
                blocks: 2,
                pre_norm: true,
            },
            &mut r,
        )
        .unwrap();
        m.expand_for_session(classes, &mut r).unwrap();
        m
    }

    fn random_tokens(l: usize, d: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(l, d, (0..l * d).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn uniform_attention_averages_rows() {
        let mut tape = Tape::new();
        let block = BoundBlock::bind(&mut tape, &AttentionBlock::uniform_identity(2, 1), false);
        let x = tape.constant(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let (y, maps) = block.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(maps[0]), &[0.5; 4]);
        // mean row [2, 4] plus residual
        assert_eq!(tape.value(y), &[3.0, 6.0, 5.0, 10.0]);
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(AttentionBlock::new(6, 4, &mut rng()).is_err());
    }

    #[test]
    fn expansion_bookkeeping() {
        let mut r = rng();
        let mut m = model(4, &(0..10).collect::<Vec<_>>());
        m.merge_classifiers().unwrap();
        let before = m.bank.trainable.clone().unwrap();
        m.expand_for_session(&[10, 11], &mut r).unwrap();
        assert_eq!(m.bank.rows(), 12);
        assert_eq!(m.old_count(), 10);
        assert_eq!(m.new_count(), 2);
        assert_eq!(m.bank.frozen.as_ref().unwrap().to_bytes()[16..], before.to_bytes()[16..]);
        assert!(!m.bank.frozen.as_ref().unwrap().requires_grad());
        assert_eq!(m.classifiers.plasticity.as_ref().unwrap().outputs(), 3);
        assert!(matches!(m.expand_for_session(&[12], &mut r), Err(HcpError::State(_))));
        m.merge_classifiers().unwrap();
        assert!(matches!(m.expand_for_session(&[3], &mut r), Err(HcpError::Registry(_))));
    }

    #[test]
    fn merge_preserves_logits_and_drops_unknown() {
        let mut r = rng();
        let mut m = model(4, &(0..10).collect::<Vec<_>>());
        m.merge_classifiers().unwrap();
        m.expand_for_session(&[10, 11], &mut r).unwrap();
        let tokens = random_tokens(3, 4, 9);
        let (_, _, before) = infer(&m, &tokens).unwrap();
        m.merge_classifiers().unwrap();
        let (_, _, after) = infer(&m, &tokens).unwrap();
        assert_eq!(m.classifiers.stability.as_ref().unwrap().outputs(), 12);
        assert!(m.classifiers.plasticity.is_none());
        assert_eq!(
            before.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            after.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!(matches!(m.merge_classifiers(), Err(HcpError::State(_))));
        m.expand_for_session(&[12, 13], &mut r).unwrap();
        assert_eq!((m.old_count(), m.new_count()), (12, 2));
    }

    #[test]
    fn zero_features_give_half_probabilities() {
        let mut m = model(4, &[0, 1, 2]);
        let head = m.classifiers.plasticity.as_mut().unwrap();
        head.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape).unwrap();
        let feats = tape.constant(3, 4, vec![0.0; 12]).unwrap();
        let u = tape.constant(1, 4, vec![0.0; 4]).unwrap();
        let logits = bound.classify_with_unknown(&mut tape, feats, Some(u)).unwrap();
        let probs = tape.sigmoid(logits);
        assert_eq!(tape.value(probs), &[0.5; 4]);
        let short = tape.constant(2, 4, vec![0.0; 8]).unwrap();
        assert!(matches!(bound.classify(&mut tape, short), Err(HcpError::Shape(_))));
    }

    #[test]
    fn logits_are_per_row_dot_products() {
        let mut r = rng();
        let mut m = model(4, &[0, 1]);
        m.merge_classifiers().unwrap();
        m.expand_for_session(&[2], &mut r).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape).unwrap();
        let feats: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let fv = tape.constant(3, 4, feats.clone()).unwrap();
        let logits = bound.classify(&mut tape, fv).unwrap();
        let stab = m.classifiers.stability.as_ref().unwrap();
        let plast = m.classifiers.plasticity.as_ref().unwrap();
        for (row, want_head, out) in [(0, stab, 0), (1, stab, 1), (2, plast, 0)] {
            let dot: f64 = (0..4).map(|c| feats[row * 4 + c] * want_head.weight.get(out, c)).sum();
            let want = dot + want_head.bias.data()[out];
            assert!((tape.value(logits)[row] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let m = model(4, &[0]);
        assert!(matches!(infer(&m, &random_tokens(2, 3, 1)), Err(HcpError::Shape(_))));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = model(4, &[0, 1, 2]);
        for seed in 0..20 {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape).unwrap();
            let p = tape.leaf(&random_tokens(5, 4, seed));
            let out = bound.forward_purify(&mut tape, p).unwrap();
            assert_eq!(out.attention.len(), 4);
            for a in out.attention {
                for row in tape.value(a).chunks(8) {
                    assert!(row.iter().all(|&x| x >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn class_row_permutation_is_coherent() {
        let m = model(4, &[0, 1, 2]);
        let perm = [2usize, 0, 1];
        let mut p = m.clone();
        let emb = m.bank.trainable.as_ref().unwrap();
        let head = m.classifiers.plasticity.as_ref().unwrap();
        let mut e = Vec::new();
        let mut w = Vec::new();
        let mut b = Vec::new();
        for &src in &perm {
            e.extend_from_slice(emb.row(src));
            w.extend_from_slice(head.weight.row(src));
            b.push(head.bias.data()[src]);
        }
        w.extend_from_slice(head.weight.row(3));
        b.push(head.bias.data()[3]);
        p.bank.trainable = Some(Tensor::matrix(3, 4, e).unwrap());
        p.bank.class_ids = perm.to_vec();
        let ph = p.classifiers.plasticity.as_mut().unwrap();
        ph.weight = Tensor::matrix(4, 4, w).unwrap();
        ph.bias = Tensor::matrix(4, 1, b).unwrap();
        let tokens = random_tokens(4, 4, 3);
        let (_, _, base) = infer(&m, &tokens).unwrap();
        let (_, _, permuted) = infer(&p, &tokens).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            assert!((permuted[row] - base[src]).abs() < 1e-12);
        }
    }
}
