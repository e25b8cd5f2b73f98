//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Every operation evaluates eagerly and records how to push gradients back to
//! its inputs. The contrastive and hinge objectives are recorded as fused nodes
//! with hand-derived adjoints.

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One anchor row of a fused weighted InfoNCE term.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTerms {
    pub row: usize,
    /// `(column, weight)` for each positive candidate.
    pub positives: Vec<(usize, f64)>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<usize> },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    VStack(Vec<Var>),
    HStack(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize, usize),
    Gather(Var, Vec<usize>),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, offset: Var, normed: Matrix, inv_std: Vec<f64> },
    Gelu(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    Contrastive { sims: Var, anchors: Vec<AnchorTerms>, temperature: f64 },
    HingeSum { same: Var, cross: Var, margin: f64 },
    Combine(Vec<(Var, f64)>),
    SumSquares(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::VStack(..) => "vstack",
            Op::HStack(..) => "hstack",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Gather(..) => "gather",
            Op::SoftmaxRows(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::NormalizeRows { .. } => "normalize",
            Op::Contrastive { .. } => "contrastive_nll",
            Op::HingeSum { .. } => "hinge",
            Op::Combine(..) => "combine",
            Op::SumSquares(..) => "sum_squares",
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    label: Option<String>,
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to any node (zero matrix if the loss
    /// does not depend on it).
    pub fn wrt(&self, var: Var, shape: (usize, usize)) -> Matrix {
        self.grads[var.0].clone().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }

    /// Accumulated gradient for the parameter slot `key`, summed over every
    /// leaf registered under it. `None` when no leaf used the slot.
    pub fn param(&self, key: usize, shape: (usize, usize)) -> Option<Matrix> {
        let mut out: Option<Matrix> = None;
        for &(k, v) in &self.params {
            if k != key {
                continue;
            }
            let g = self.wrt(v, shape);
            match out.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => out = Some(g),
            }
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op, label: None });
        Var(self.nodes.len() - 1)
    }

    /// Drops every node created after the first `len`; handles to them become
    /// invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    /// A constant input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// A trainable input whose gradient is collected under `key`.
    pub fn param(&mut self, value: Matrix, key: usize) -> Var {
        self.push(value, Op::Leaf { param: Some(key) })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(a).cols());
        let mut v = self.value(a).clone();
        let bias = r.row(0).to_vec();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).scale(factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::vstack(&mats)?;
        Ok(self.push(v, Op::VStack(parts.to_vec())))
    }

    pub fn hstack(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::hstack(&mats)?;
        Ok(self.push(v, Op::HStack(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_rows(start, end);
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_cols(start, end);
        self.push(v, Op::SliceCols(a, start, end))
    }

    /// Row lookup `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut v = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(Error::Shape(format!("row index {id} outside table of {} rows", t.rows())));
            }
            v.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(self.push(v, Op::Gather(table, ids.to_vec())))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with `1 × c` gain and offset.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let mut normed = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in normed.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gain).row(0).to_vec();
        let b = self.value(offset).row(0).to_vec();
        let mut out = normed.clone();
        for r in 0..n {
            for ((o, gi), bi) in out.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *o = *o * gi + bi;
            }
        }
        self.push(out, Op::LayerNorm { x, gain, offset, normed, inv_std })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// L2-normalizes every row; fails on a zero row.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut v = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let n = crate::tensor::norm(x.row(r));
            if !n.is_finite() {
                return Err(Error::NonFinite(format!("row {r} of a normalized matrix")));
            }
            if n == 0.0 {
                return Err(Error::ZeroNorm(format!("row {r}")));
            }
            norms.push(n);
            for e in v.row_mut(r) {
                *e /= n;
            }
        }
        Ok(self.push(v, Op::NormalizeRows { x: a, norms }))
    }

    /// Σ over anchors of `(1/m) Σ_z w_z · [lse(s_z/γ, s_neg/γ) − s_z/γ]`, where
    /// `s` are entries of `sims` on the anchor's row. Anchors with no positives
    /// contribute nothing.
    pub fn contrastive_nll(&mut self, sims: Var, anchors: Vec<AnchorTerms>, temperature: f64) -> Var {
        let s = self.value(sims);
        let mut total = 0.0;
        let mut logits = Vec::new();
        for a in &anchors {
            if a.positives.is_empty() {
                continue;
            }
            let m = a.positives.len() as f64;
            for &(col, w) in &a.positives {
                logits.clear();
                logits.push(s.get(a.row, col) / temperature);
                logits.extend(a.negatives.iter().map(|&j| s.get(a.row, j) / temperature));
                total += w / m * (log_sum_exp(&logits) - logits[0]);
            }
        }
        self.push(Matrix::scalar(total), Op::Contrastive { sims, anchors, temperature })
    }

    /// `Σ_ij max(margin − same_ij + cross_ij, 0)`.
    pub fn hinge_sum(&mut self, same: Var, cross: Var, margin: f64) -> Var {
        let (a, b) = (self.value(same), self.value(cross));
        assert_eq!(a.shape(), b.shape());
        let total: f64 = a.data().iter().zip(b.data()).map(|(s, c)| (margin - s + c).max(0.0)).sum();
        self.push(Matrix::scalar(total), Op::HingeSum { same, cross, margin })
    }

    /// Linear combination of scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        self.push(Matrix::scalar(total), Op::Combine(terms.to_vec()))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_squares();
        self.push(Matrix::scalar(v), Op::SumSquares(a))
    }

    fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.is_finite()).map(|(i, n)| match &n.label {
            Some(l) => format!("{l} (node {i})"),
            None => format!("{} (node {i})", n.op.name()),
        })
    }

    /// Reverse pass from the scalar `loss`.
    pub fn value_and_gradient(&self, loss: Var) -> Result<(f64, Gradients)> {
        let value = self.value(loss);
        if value.shape() != (1, 1) {
            return Err(Error::Shape(format!("loss must be a scalar, got {:?}", value.shape())));
        }
        let value = value.get(0, 0);
        if !value.is_finite() {
            let name = self.first_non_finite().unwrap_or_else(|| "loss".into());
            return Err(Error::NonFinite(name));
        }
        Ok((value, self.backward(loss)))
    }

    fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut params = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                if let Op::Leaf { param: Some(k) } = self.nodes[idx].op {
                    params.push((k, Var(idx)));
                }
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(k) = param {
                        params.push((*k, Var(idx)));
                    }
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(*b));
                    let gb = self.value(*a).matmul_at(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_at(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.scale(*f)),
                Op::VStack(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if rows > 0 {
                            accumulate(&mut grads, p, g.slice_rows(start, start + rows));
                        }
                        start += rows;
                    }
                }
                Op::HStack(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        accumulate(&mut grads, p, g.slice_cols(start, start + cols));
                        start += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut full = Matrix::zeros(rows, cols);
                    for r in 0..g.rows() {
                        full.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, full);
                }
                Op::SliceCols(a, start, end) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut full = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        full.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, full);
                }
                Op::Gather(table, ids) => {
                    let (rows, cols) = self.value(*table).shape();
                    let mut full = Matrix::zeros(rows, cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in full.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, full);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yi), gi) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yi * (gi - inner);
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::LayerNorm { x, gain, offset, normed, inv_std } => {
                    let (n, c) = normed.shape();
                    let gv = self.value(*gain).row(0);
                    let mut ggain = Matrix::zeros(1, c);
                    let mut goff = Matrix::zeros(1, c);
                    let mut gx = Matrix::zeros(n, c);
                    let mut dxhat = vec![0.0; c];
                    for r in 0..n {
                        let (gr, xh) = (g.row(r), normed.row(r));
                        for j in 0..c {
                            ggain.row_mut(0)[j] += gr[j] * xh[j];
                            goff.row_mut(0)[j] += gr[j];
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *offset, goff);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut gx = g;
                    for (o, xv) in gx.data_mut().iter_mut().zip(x.data()) {
                        *o *= gelu_grad(*xv);
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yi), gi) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = (gi - yi * inner) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Contrastive { sims, anchors, temperature } => {
                    let upstream = g.get(0, 0);
                    let s = self.value(*sims);
                    let mut gs = Matrix::zeros(s.rows(), s.cols());
                    let mut logits = Vec::new();
                    for a in anchors {
                        if a.positives.is_empty() {
                            continue;
                        }
                        let m = a.positives.len() as f64;
                        for &(col, w) in &a.positives {
                            logits.clear();
                            logits.push(s.get(a.row, col) / temperature);
                            logits.extend(a.negatives.iter().map(|&j| s.get(a.row, j) / temperature));
                            let lse = log_sum_exp(&logits);
                            let coef = upstream * w / m / temperature;
                            let p0 = (logits[0] - lse).exp();
                            let cur = gs.get(a.row, col);
                            gs.set(a.row, col, cur + coef * (p0 - 1.0));
                            for (k, &j) in a.negatives.iter().enumerate() {
                                let pj = (logits[k + 1] - lse).exp();
                                let cur = gs.get(a.row, j);
                                gs.set(a.row, j, cur + coef * pj);
                            }
                        }
                    }
                    accumulate(&mut grads, *sims, gs);
                }
                Op::HingeSum { same, cross, margin } => {
                    let upstream = g.get(0, 0);
                    let (a, b) = (self.value(*same), self.value(*cross));
                    let mut ga = Matrix::zeros(a.rows(), a.cols());
                    let mut gb = Matrix::zeros(a.rows(), a.cols());
                    for i in 0..a.len() {
                        if margin - a.data()[i] + b.data()[i] > 0.0 {
                            ga.data_mut()[i] = -upstream;
                            gb.data_mut()[i] = upstream;
                        }
                    }
                    accumulate(&mut grads, *same, ga);
                    accumulate(&mut grads, *cross, gb);
                }
                Op::Combine(terms) => {
                    let upstream = g.get(0, 0);
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, Matrix::scalar(upstream * w));
                    }
                }
                Op::SumSquares(a) => {
                    let gx = self.value(*a).scale(2.0 * g.get(0, 0));
                    accumulate(&mut grads, *a, gx);
                }
            }
        }
        Gradients { grads, params }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match grads[v.0].as_mut() {
        Some(acc) => acc.add_assign(&g),
        None => grads[v.0] = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences over every entry of `x` against the tape
    /// gradient of `build`.
    fn check(x: &Matrix, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let v = tape.param(x.clone(), 0);
        let loss = build(&mut tape, v);
        let (_, grads) = tape.value_and_gradient(loss).unwrap();
        let analytic = grads.param(0, x.shape()).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let mut t = Tape::new();
                let v = t.constant(xp);
                let l = build(&mut t, v);
                t.scalar(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.data()[i];
            let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-6, "entry {i}: analytic {an} vs fd {fd}");
        }
    }

    fn rand_matrix(r: usize, c: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::random_normal(r, c, 1.0, &mut rng)
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_w() {
        let w = rand_matrix(3, 4, 1);
        let mut tape = Tape::new();
        let v = tape.param(w.clone(), 7);
        let l = tape.sum_squares(v);
        let (_, g) = tape.value_and_gradient(l).unwrap();
        assert_eq!(g.param(7, w.shape()).unwrap(), w.scale(2.0));
    }

    #[test]
    fn unused_parameter_has_exact_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(rand_matrix(2, 2, 1), 0);
        let b = tape.param(rand_matrix(2, 2, 2), 1);
        let _ = b;
        let l = tape.sum_squares(a);
        let (_, g) = tape.value_and_gradient(l).unwrap();
        let gb = g.param(1, (2, 2)).unwrap();
        assert!(gb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_layer_norm_gelu_chain() {
        let other = rand_matrix(4, 3, 9);
        let gain = rand_matrix(1, 3, 10);
        let off = rand_matrix(1, 3, 11);
        check(&rand_matrix(4, 3, 3), |t, x| {
            let o = t.constant(other.clone());
            let g = t.constant(gain.clone());
            let b = t.constant(off.clone());
            let ln = t.layer_norm(x, g, b);
            let ge = t.gelu(ln);
            let s = t.matmul_bt(ge, o);
            let sm = t.softmax_rows(s);
            let w = t.matmul(sm, o);
            t.sum_squares(w)
        });
    }

    #[test]
    fn stacking_slicing_gather() {
        check(&rand_matrix(5, 4, 4), |t, x| {
            let g = t.gather(x, &[0, 3, 3, 1]).unwrap();
            let a = t.slice_cols(g, 1, 3);
            let b = t.slice_rows(x, 1, 5);
            let c = t.slice_cols(b, 0, 2);
            let h = t.hstack(&[a, c]).unwrap();
            let v = t.vstack(&[h, h]).unwrap();
            let s = t.scale(v, 0.3);
            t.sum_squares(s)
        });
    }

    #[test]
    fn fused_contrastive_and_hinge() {
        check(&rand_matrix(3, 4, 5), |t, x| {
            let n = t.normalize_rows(x).unwrap();
            let s = t.matmul_bt(n, n);
            let anchors = vec![
                AnchorTerms { row: 0, positives: vec![(0, 1.0), (1, 0.5)], negatives: vec![2] },
                AnchorTerms { row: 2, positives: vec![(2, 1.0)], negatives: vec![0, 1] },
            ];
            let c = t.contrastive_nll(s, anchors, 0.3);
            let cross = t.scale(s, 0.5);
            let h = t.hinge_sum(s, cross, 0.7);
            t.combine(&[(c, 0.8), (h, 0.2)])
        });
    }

    #[test]
    fn non_finite_loss_names_first_bad_node() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::scalar(f64::MAX));
        tape.set_label(a, "big");
        let b = tape.scale(a, 10.0);
        tape.set_label(b, "overflow");
        let l = tape.sum_squares(b);
        match tape.value_and_gradient(l) {
            Err(Error::NonFinite(name)) => assert!(name.starts_with("overflow"), "{name}"),
            other => panic!("expected non-finite error, got {:?}", other.map(|r| r.0)),
        }
    }
}
