//! Tape-based reverse-mode automatic differentiation over 2-D `f64` arrays.
//!
//! Every operation appends one node holding its forward value; inputs always
//! precede the node that consumes them, so a single reverse pass over the node
//! list is a valid topological sweep. Nodes that cannot reach a trainable leaf
//! are skipped in the reverse pass.

use crate::error::{HcpError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Pow(Var, f64),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    AddRow(Var, Var),
    MulRow(Var, Var),
    RowSums(Var),
    Sum(Var),
    NormalizeRows(Var, f64),
}

#[derive(Clone, Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Append-only operation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not influence the loss through a
    /// trainable path.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `tensor.grad` (no-op for frozen tensors).
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        if let Some(g) = self.get(v) {
            tensor.accumulate_grad(g)?;
        }
        Ok(())
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> HcpError {
    HcpError::Shape(format!(
        "{op}: incompatible shapes [{}x{}] and [{}x{}]",
        a.0, a.1, b.0, b.1
    ))
}

/// `a [m×k] · b [k×n]` into a fresh buffer.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [m×k] · bᵀ` where `b` is `[n×k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`.
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shapes are valid")
    }

    /// Records a tensor as a leaf. Its `requires_grad` flag decides whether
    /// gradients are produced for it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2().expect("tape leaves must be rank 1 or 2");
        self.push(r, c, t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(HcpError::Shape(format!(
                "constant [{rows}x{cols}] with {} values",
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = transpose_raw(self.value(a), r, c);
        let ng = self.ng(a);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Vec<f64>)> {
        let da = self.dims(a);
        let db = self.dims(b);
        let va = self.value(a);
        let vb = self.value(b);
        if da == db {
            Ok((da.0, da.1, va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()))
        } else if db == (1, 1) {
            let y = vb[0];
            Ok((da.0, da.1, va.iter().map(|&x| f(x, y)).collect()))
        } else if da == (1, 1) {
            let x = va[0];
            Ok((db.0, db.1, vb.iter().map(|&y| f(x, y)).collect()))
        } else {
            Err(shape_err(name, da, db))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x + s).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::AddScalar(a), ng)
    }

    /// `s - a`, elementwise.
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, s)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(bad) = self.value(a).iter().find(|&&x| x.is_nan() || x <= 0.0) {
            return Err(HcpError::Domain(format!("log of non-positive value {bad}")));
        }
        let out = self.value(a).iter().map(|x| x.ln()).collect();
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::Log(a), ng))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(bad) = self.value(a).iter().find(|&&x| x.is_nan() || x < 0.0) {
            return Err(HcpError::Domain(format!("sqrt of negative value {bad}")));
        }
        let out = self.value(a).iter().map(|x| x.sqrt()).collect();
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::Sqrt(a), ng))
    }

    /// `a^p` for a constant exponent. `p == 0` yields ones with zero gradient.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let (r, c) = self.dims(a);
        if p.fract() != 0.0 {
            if let Some(bad) = self.value(a).iter().find(|&&x| x < 0.0) {
                return Err(HcpError::Domain(format!(
                    "fractional power {p} of negative value {bad}"
                )));
            }
        }
        let out = self.value(a).iter().map(|x| x.powf(p)).collect();
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::Pow(a, p), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Sigmoid(a), ng)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only inside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x.clamp(lo, hi)).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Clamp(a, lo, hi), ng)
    }

    /// Softmax over each row (the last dimension), max-subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.value(a).iter().any(|x| !x.is_finite()) {
            return Err(HcpError::Domain("softmax of non-finite input".into()));
        }
        let mut out = self.value(a).to_vec();
        out.chunks_mut(c).for_each(softmax_in_place);
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::SoftmaxRows(a), ng))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ca != cb {
            return Err(shape_err("concat_rows", (ra, ca), (rb, cb)));
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(ra + rb, ca, out, Op::ConcatRows(a, b), ng))
    }

    pub fn slice_rows(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if lo >= hi || hi > r {
            return Err(HcpError::Bounds(format!(
                "slice_rows {lo}..{hi} outside 0..{r}"
            )));
        }
        let out = self.value(a)[lo * c..hi * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(hi - lo, c, out, Op::SliceRows(a, lo), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| HcpError::Shape("concat_cols of nothing".into()))?;
        let rows = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.0 != rows {
                return Err(shape_err("concat_cols", self.dims(first), d));
            }
            total += d.1;
        }
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let c = self.dims(p).1;
            let v = self.value(p);
            for i in 0..rows {
                out[i * total + offset..i * total + offset + c].copy_from_slice(&v[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(rows, total, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if lo >= hi || hi > c {
            return Err(HcpError::Bounds(format!(
                "slice_cols {lo}..{hi} outside 0..{c}"
            )));
        }
        let w = hi - lo;
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + lo..i * c + hi]);
        }
        let ng = self.ng(a);
        Ok(self.push(r, w, out, Op::SliceCols(a, lo), ng))
    }

    /// Adds a `[1×c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(shape_err("add_row", (r, c), self.dims(row)));
        }
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|x| x.iter().zip(rv).map(|(p, q)| p + q))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(r, c, out, Op::AddRow(a, row), ng))
    }

    /// Multiplies every row of `a` elementwise by a `[1×c]` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(shape_err("mul_row", (r, c), self.dims(row)));
        }
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|x| x.iter().zip(rv).map(|(p, q)| p * q))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(r, c, out, Op::MulRow(a, row), ng))
    }

    /// `[r×c] → [r×1]` row sums.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).chunks(c).map(|x| x.iter().sum()).collect();
        let ng = self.ng(a);
        self.push(r, 1, out, Op::RowSums(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` (population variance).
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
        }
        let ng = self.ng(a);
        self.push(r, c, out, Op::NormalizeRows(a, eps), ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(HcpError::Contract(format!(
                "backward needs a scalar loss, got [{r}x{c}]"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, delta: Vec<f64>| {
            if self.nodes[v.0].needs_grad {
                match &mut grads[v.0] {
                    Some(d) => d.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(delta),
                }
            }
        };
        // Sends `g` to an operand of a possibly scalar-broadcast binary op.
        let reduce_to = |v: Var, full: Vec<f64>| -> Vec<f64> {
            if self.nodes[v.0].value.len() == 1 && full.len() != 1 {
                vec![full.iter().sum()]
            } else {
                full
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.ng(*a) {
                    send(*a, matmul_nt(g, self.value(*b), m, n, k));
                }
                if self.ng(*b) {
                    send(*b, matmul_tn(self.value(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                send(*a, transpose_raw(g, node.rows, node.cols));
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    send(*a, reduce_to(*a, g.to_vec()));
                }
                if self.ng(*b) {
                    send(*b, reduce_to(*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    send(*a, reduce_to(*a, g.to_vec()));
                }
                if self.ng(*b) {
                    send(*b, reduce_to(*b, g.iter().map(|x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                if self.ng(*a) {
                    let full = g.iter().enumerate().map(|(i, gi)| gi * pick(vb, i)).collect();
                    send(*a, reduce_to(*a, full));
                }
                if self.ng(*b) {
                    let full = g.iter().enumerate().map(|(i, gi)| gi * pick(va, i)).collect();
                    send(*b, reduce_to(*b, full));
                }
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|x| x * s).collect()),
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::Exp(a) => send(*a, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect()),
            Op::Log(a) => {
                let x = self.value(*a);
                send(*a, g.iter().zip(x).map(|(gi, xi)| gi / xi).collect())
            }
            Op::Sqrt(a) => send(*a, g.iter().zip(y).map(|(gi, yi)| gi * 0.5 / yi).collect()),
            Op::Pow(a, p) => {
                let x = self.value(*a);
                let d = if *p == 0.0 {
                    vec![0.0; g.len()]
                } else {
                    g.iter()
                        .zip(x)
                        .map(|(gi, xi)| gi * p * xi.powf(p - 1.0))
                        .collect()
                };
                send(*a, d)
            }
            Op::Sigmoid(a) => send(
                *a,
                g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect(),
            ),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gi, xi)| if xi >= lo && xi <= hi { *gi } else { 0.0 })
                        .collect(),
                )
            }
            Op::SoftmaxRows(a) => {
                let c = node.cols;
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for ((di, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *di = yi * (gi - dot);
                    }
                }
                send(*a, d)
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                if self.ng(*a) {
                    send(*a, g[..split].to_vec());
                }
                if self.ng(*b) {
                    send(*b, g[split..].to_vec());
                }
            }
            Op::SliceRows(a, lo) => {
                let (r, c) = self.dims(*a);
                let mut d = vec![0.0; r * c];
                d[lo * c..lo * c + g.len()].copy_from_slice(g);
                send(*a, d)
            }
            Op::ConcatCols(parts) => {
                let total = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(node.rows * c);
                        for i in 0..node.rows {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        send(p, d);
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, lo) => {
                let (r, c) = self.dims(*a);
                let w = node.cols;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + lo..i * c + lo + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                send(*a, d)
            }
            Op::AddRow(a, row) => {
                let c = node.cols;
                if self.ng(*a) {
                    send(*a, g.to_vec());
                }
                if self.ng(*row) {
                    let mut d = vec![0.0; c];
                    for gr in g.chunks(c) {
                        d.iter_mut().zip(gr).for_each(|(p, q)| *p += q);
                    }
                    send(*row, d);
                }
            }
            Op::MulRow(a, row) => {
                let c = node.cols;
                let rv = self.value(*row);
                if self.ng(*a) {
                    let d = g
                        .chunks(c)
                        .flat_map(|gr| gr.iter().zip(rv).map(|(p, q)| p * q))
                        .collect();
                    send(*a, d);
                }
                if self.ng(*row) {
                    let x = self.value(*a);
                    let mut d = vec![0.0; c];
                    for (gr, xr) in g.chunks(c).zip(x.chunks(c)) {
                        for ((di, gi), xi) in d.iter_mut().zip(gr).zip(xr) {
                            *di += gi * xi;
                        }
                    }
                    send(*row, d);
                }
            }
            Op::RowSums(a) => {
                let c = self.dims(*a).1;
                let d = g.iter().flat_map(|&gi| std::iter::repeat(gi).take(c)).collect();
                send(*a, d)
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                send(*a, vec![g[0]; n])
            }
            Op::NormalizeRows(a, eps) => {
                let c = node.cols;
                let x = self.value(*a);
                let mut d = vec![0.0; g.len()];
                for (((dr, gr), yr), xr) in d
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(y.chunks(c))
                    .zip(x.chunks(c))
                {
                    let mean = xr.iter().sum::<f64>() / c as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = gr.iter().sum::<f64>() / c as f64;
                    let gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for ((di, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *di = inv * (gi - gmean - yi * gy);
                    }
                }
                send(*a, d)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).unwrap().with_requires_grad(true)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i = tape.leaf(&Tensor::identity(2));
        let m = tape.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let b = tape.constant(2, 1, vec![3.0, 4.0]).unwrap();
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = tape.constant(2, 3, vec![0.0; 6]).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3"), "{err}");
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(2, 2, vec![0.0, 0.0, 1000.0, 1000.0]).unwrap();
        let s = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5, 0.5, 0.5]);
        let bad = tape.constant(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(tape.softmax_rows(bad), Err(HcpError::Domain(_))));
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let z = tape.constant(1, 1, vec![0.0]).unwrap();
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s), &[0.5]);
        let x = tape.constant(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        let e = tape.exp(x);
        let l = tape.log(e).unwrap();
        for (a, b) in tape.value(l).iter().zip([-1.0, 0.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let neg = tape.constant(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(tape.log(neg), Err(HcpError::Domain(_))));
        let neg = tape.constant(1, 1, vec![-1.0]).unwrap();
        assert!(matches!(tape.sqrt(neg), Err(HcpError::Domain(_))));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = param(1, 2, vec![1.0, 2.0]);
        let y = param(1, 2, vec![5.0, 6.0]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let yv = tape.leaf(&y);
        let _unused = tape.add(yv, yv).unwrap();
        let sq = tape.mul(xv, xv).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[2.0, 4.0]);
        assert!(grads.get(yv).map_or(true, |g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn repeated_backward_accumulates_into_tensor() {
        let mut x = param(1, 2, vec![1.0, 2.0]);
        for _ in 0..2 {
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let sq = tape.mul(xv, xv).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap().accumulate_into(xv, &mut x).unwrap();
        }
        assert_eq!(x.grad().unwrap(), &[4.0, 8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(1, 2, vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(HcpError::Contract(_))));
    }

    #[test]
    fn slice_of_concat_routes_gradient() {
        let a = param(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = param(1, 2, vec![5.0, 6.0]);
        let mut tape = Tape::new();
        let av = tape.leaf(&a);
        let bv = tape.leaf(&b);
        let ab = tape.concat_rows(av, bv).unwrap();
        let back = tape.slice_rows(ab, 0, 2).unwrap();
        assert_eq!(tape.value(back), a.data());
        let tail = tape.slice_rows(ab, 1, 3).unwrap();
        let loss = tape.sum(tail);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(av).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(grads.get(bv).unwrap(), &[1.0, 1.0]);
        assert!(matches!(tape.slice_rows(ab, 2, 4), Err(HcpError::Bounds(_))));
    }

    #[test]
    fn scalar_broadcast_reduces_gradient() {
        let s = param(1, 1, vec![3.0]);
        let x = param(1, 3, vec![1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let sv = tape.leaf(&s);
        let xv = tape.leaf(&x);
        let p = tape.mul(xv, sv).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(sv).unwrap(), &[6.0]);
        assert_eq!(grads.get(xv).unwrap(), &[3.0, 3.0, 3.0]);
    }
}
