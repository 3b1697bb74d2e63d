//! Minimal reverse-mode gradient tape over 2-D arrays.
//!
//! Every operation computes its value eagerly and records itself; nodes are
//! therefore already in topological order, and [`Tape::backward`] walks them
//! once in reverse. Only leaves registered as parameters accumulate named
//! gradients — anything entering as a constant (spike rasters, targets,
//! masks) is a stop-gradient boundary by construction.
//!
//! Generic over [`Scalar`] so training can run in f32 while gradient checks
//! run against central finite differences in f64.

use std::collections::BTreeMap;

use ndarray::Array2;
use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of the tape: f32 for speed, f64 for verification.
pub trait Scalar:
    Float
    + num_traits::NumAssign
    + ndarray::LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Machine epsilon of the concrete type, for rounding-aware checks.
    const EPS: f64;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const EPS: f64 = f32::EPSILON as f64;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const EPS: f64 = f64::EPSILON;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Scores are clamped to [ε, 1−ε] inside the BCE node.
pub const BCE_EPS: f64 = 1e-7;
/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf { param: Option<String> },
    Matmul(Id, Id),
    /// a · bᵀ
    MatmulNT(Id, Id),
    Add(Id, Id),
    /// matrix + broadcast row vector [1×n]
    AddRow(Id, Id),
    Relu(Id),
    Sigmoid(Id),
    Scale(Id, S),
    SoftmaxRows(Id),
    LayerNormRows { x: Id, gain: Id, bias: Id },
    MeanPoolRows { x: Id, window: usize },
    SliceCols { x: Id, from: usize, to: usize },
    ConcatCols(Vec<Id>),
    /// Mean binary cross-entropy of clamped scores against 0/1 targets,
    /// positive term weighted by pos_weight. Scalar output [1×1].
    BceMean { scores: Id, targets: Id, pos_weight: S },
}

impl<S> Op<S> {
    fn each_input(&self, mut f: impl FnMut(Id)) {
        match self {
            Op::Leaf { .. } => {}
            Op::Matmul(a, b) | Op::MatmulNT(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Scale(x, _)
            | Op::SoftmaxRows(x)
            | Op::MeanPoolRows { x, .. }
            | Op::SliceCols { x, .. } => f(*x),
            Op::LayerNormRows { x, gain, bias } => {
                f(*x);
                f(*gain);
                f(*bias);
            }
            Op::ConcatCols(parts) => parts.iter().copied().for_each(f),
            Op::BceMean { scores, targets, .. } => {
                f(*scores);
                f(*targets);
            }
        }
    }
}

struct Node<S> {
    op: Op<S>,
    value: Array2<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: Id) -> &Array2<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<S>, value: Array2<S>) -> Id {
        self.nodes.push(Node { op, value });
        Id(self.nodes.len() - 1)
    }

    /// Stop-gradient leaf: data, targets, masks.
    pub fn constant(&mut self, value: Array2<S>) -> Id {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Array2<S>) -> Id {
        self.push(Op::Leaf { param: Some(name.to_string()) }, value)
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let v = matmul(self.value(a), self.value(b));
        self.push(Op::Matmul(a, b), v)
    }

    /// a · bᵀ, the attention-score shape.
    pub fn matmul_nt(&mut self, a: Id, b: Id) -> Id {
        let v = matmul_nt(self.value(a), self.value(b));
        self.push(Op::MatmulNT(a, b), v)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shapes");
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn add_row(&mut self, a: Id, row: Id) -> Id {
        let (m, n) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, n), "add_row shapes");
        let mut v = self.value(a).clone();
        for i in 0..m {
            for j in 0..n {
                v[[i, j]] += self.value(row)[[0, j]];
            }
        }
        self.push(Op::AddRow(a, row), v)
    }

    pub fn relu(&mut self, x: Id) -> Id {
        let v = self.value(x).mapv(|e| if e > S::zero() { e } else { S::zero() });
        self.push(Op::Relu(x), v)
    }

    pub fn sigmoid(&mut self, x: Id) -> Id {
        let v = self.value(x).mapv(sigmoid_scalar);
        self.push(Op::Sigmoid(x), v)
    }

    pub fn scale(&mut self, x: Id, k: S) -> Id {
        let v = self.value(x).mapv(|e| e * k);
        self.push(Op::Scale(x, k), v)
    }

    pub fn softmax_rows(&mut self, x: Id) -> Id {
        let xv = self.value(x);
        let (m, n) = xv.dim();
        let mut v = Array2::zeros((m, n));
        for i in 0..m {
            let mut mx = xv[[i, 0]];
            for j in 1..n {
                if xv[[i, j]] > mx {
                    mx = xv[[i, j]];
                }
            }
            let mut sum = S::zero();
            for j in 0..n {
                let e = (xv[[i, j]] - mx).exp();
                v[[i, j]] = e;
                sum += e;
            }
            let mut total = S::zero();
            for j in 0..n {
                v[[i, j]] /= sum;
                total += v[[i, j]];
            }
            // Rounding tolerance scales with the element type and the row
            // width (each of the n divisions and additions contributes up
            // to an ulp); a real bug shifts the sum by O(1), far beyond it.
            debug_assert!(
                (total.to_f64() - 1.0).abs() < 4.0 * S::EPS * n as f64,
                "softmax row does not sum to 1: {total}"
            );
        }
        self.push(Op::SoftmaxRows(x), v)
    }

    /// Per-row layer norm with learned gain/bias (both [1×n]).
    pub fn layer_norm_rows(&mut self, x: Id, gain: Id, bias: Id) -> Id {
        let xv = self.value(x);
        let (m, n) = xv.dim();
        assert_eq!(self.value(gain).dim(), (1, n), "layer_norm gain shape");
        assert_eq!(self.value(bias).dim(), (1, n), "layer_norm bias shape");
        let eps = S::from_f64(LN_EPS);
        let mut v = Array2::zeros((m, n));
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().fold(S::zero(), |a, &b| a + b) / S::from_f64(n as f64);
            let var = row
                .iter()
                .fold(S::zero(), |a, &b| a + (b - mean) * (b - mean))
                / S::from_f64(n as f64);
            let inv = (var + eps).sqrt().recip();
            for j in 0..n {
                let xhat = (xv[[i, j]] - mean) * inv;
                v[[i, j]] = xhat * self.value(gain)[[0, j]] + self.value(bias)[[0, j]];
            }
        }
        self.push(Op::LayerNormRows { x, gain, bias }, v)
    }

    /// Mean over consecutive groups of `window` rows: [m×n] → [m/window × n].
    pub fn mean_pool_rows(&mut self, x: Id, window: usize) -> Id {
        let (m, n) = self.value(x).dim();
        assert!(window >= 1 && m % window == 0, "pool window {window} must divide rows {m}");
        let out_rows = m / window;
        let inv = S::from_f64(1.0 / window as f64);
        let mut v = Array2::zeros((out_rows, n));
        for r in 0..out_rows {
            for k in 0..window {
                for j in 0..n {
                    v[[r, j]] += self.value(x)[[r * window + k, j]];
                }
            }
            for j in 0..n {
                v[[r, j]] *= inv;
            }
        }
        self.push(Op::MeanPoolRows { x, window }, v)
    }

    pub fn slice_cols(&mut self, x: Id, from: usize, to: usize) -> Id {
        let (m, n) = self.value(x).dim();
        assert!(from < to && to <= n, "slice {from}..{to} of {n} cols");
        let mut v = Array2::zeros((m, to - from));
        for i in 0..m {
            for j in from..to {
                v[[i, j - from]] = self.value(x)[[i, j]];
            }
        }
        self.push(Op::SliceCols { x, from, to }, v)
    }

    pub fn concat_cols(&mut self, parts: &[Id]) -> Id {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).dim().0;
        let total: usize = parts.iter().map(|&p| self.value(p).dim().1).sum();
        let mut v = Array2::zeros((m, total));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.dim().0, m, "concat_cols row mismatch");
            for i in 0..m {
                for j in 0..pv.dim().1 {
                    v[[i, at + j]] = pv[[i, j]];
                }
            }
            at += pv.dim().1;
        }
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    /// loss = mean over cells of −[pos_weight·y·ln s̃ + (1−y)·ln(1−s̃)],
    /// s̃ = clamp(s, ε, 1−ε). `targets` must hold exactly 0s and 1s.
    pub fn bce_mean(&mut self, scores: Id, targets: Id, pos_weight: S) -> Id {
        let sv = self.value(scores);
        let tv = self.value(targets);
        assert_eq!(sv.dim(), tv.dim(), "bce shapes");
        let eps = S::from_f64(BCE_EPS);
        let one = S::one();
        let cells = S::from_f64(sv.len() as f64);
        let mut total = S::zero();
        for (&s, &y) in sv.iter().zip(tv.iter()) {
            let sc = clamp(s, eps, one - eps);
            total += -(pos_weight * y * sc.ln() + (one - y) * (one - sc).ln());
        }
        let v = Array2::from_elem((1, 1), total / cells);
        self.push(Op::BceMean { scores, targets, pos_weight }, v)
    }

    /// Gradients of the scalar node `loss` with respect to every parameter
    /// leaf, keyed by parameter name. Each node is visited exactly once, in
    /// reverse creation (= reverse topological) order. Subgraphs that no
    /// parameter feeds into (constant inputs such as spike rasters and
    /// targets) are skipped entirely — their gradient matrices are never
    /// materialised.
    pub fn backward(&self, loss: Id) -> Result<BTreeMap<String, Array2<S>>> {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be scalar");
        // A node needs a gradient iff it is a parameter or any of its inputs
        // does. Inputs always precede their consumers in creation order.
        let mut needs = vec![false; self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            needs[idx] = match &node.op {
                Op::Leaf { param } => param.is_some(),
                op => {
                    let mut any = false;
                    op.each_input(|id| any |= needs[id.0]);
                    any
                }
            };
        }
        let mut grads: Vec<Option<Array2<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), S::one()));
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate(idx, &g, &needs, &mut grads);
            grads[idx] = Some(g);
        }
        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Array2::zeros(node.value.dim()));
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
                }
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn accumulate(&self, idx: usize, g: &Array2<S>, needs: &[bool], grads: &mut [Option<Array2<S>>]) {
        // Lazy: the contribution expression is only evaluated when the target
        // node actually needs a gradient.
        macro_rules! bump {
            ($id:expr, $contrib:expr) => {{
                let id: Id = $id;
                if needs[id.0] {
                    let contrib: Array2<S> = $contrib;
                    match &mut grads[id.0] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }};
        }
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Matmul(a, b) => {
                // c = a·b ⇒ da = g·bᵀ, db = aᵀ·g
                bump!(*a, matmul_nt(g, self.value(*b)));
                bump!(*b, matmul_tn(self.value(*a), g));
            }
            Op::MatmulNT(a, b) => {
                // c = a·bᵀ ⇒ da = g·b, db = gᵀ·a
                bump!(*a, matmul(g, self.value(*b)));
                bump!(*b, matmul_tn(g, self.value(*a)));
            }
            Op::Add(a, b) => {
                bump!(*a, g.clone());
                bump!(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                bump!(*a, g.clone());
                let (m, n) = g.dim();
                let mut r = Array2::zeros((1, n));
                for i in 0..m {
                    for j in 0..n {
                        r[[0, j]] += g[[i, j]];
                    }
                }
                bump!(*row, r);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &xi) in dx.iter_mut().zip(xv.iter()) {
                    if xi <= S::zero() {
                        *d = S::zero();
                    }
                }
                bump!(*x, dx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[idx].value;
                let mut dx = g.clone();
                for (d, &yi) in dx.iter_mut().zip(y.iter()) {
                    *d *= yi * (S::one() - yi);
                }
                bump!(*x, dx);
            }
            Op::Scale(x, k) => {
                bump!(*x, g.mapv(|e| e * *k));
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[idx].value;
                let (m, n) = y.dim();
                let mut dx = Array2::zeros((m, n));
                for i in 0..m {
                    let mut dot = S::zero();
                    for j in 0..n {
                        dot += g[[i, j]] * y[[i, j]];
                    }
                    for j in 0..n {
                        dx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                    }
                }
                bump!(*x, dx);
            }
            Op::LayerNormRows { x, gain, bias } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let (m, n) = xv.dim();
                let nf = S::from_f64(n as f64);
                let eps = S::from_f64(LN_EPS);
                let mut dx = Array2::zeros((m, n));
                let mut dgain = Array2::zeros((1, n));
                let mut dbias = Array2::zeros((1, n));
                for i in 0..m {
                    let row = xv.row(i);
                    let mean = row.iter().fold(S::zero(), |a, &b| a + b) / nf;
                    let var = row
                        .iter()
                        .fold(S::zero(), |a, &b| a + (b - mean) * (b - mean))
                        / nf;
                    let inv = (var + eps).sqrt().recip();
                    // gy = g ⊙ gain; dx = inv·(gy − mean(gy) − x̂·mean(gy⊙x̂))
                    let mut mean_gy = S::zero();
                    let mut mean_gy_xhat = S::zero();
                    for j in 0..n {
                        let xhat = (xv[[i, j]] - mean) * inv;
                        let gy = g[[i, j]] * gv[[0, j]];
                        mean_gy += gy;
                        mean_gy_xhat += gy * xhat;
                        dgain[[0, j]] += g[[i, j]] * xhat;
                        dbias[[0, j]] += g[[i, j]];
                    }
                    mean_gy /= nf;
                    mean_gy_xhat /= nf;
                    for j in 0..n {
                        let xhat = (xv[[i, j]] - mean) * inv;
                        let gy = g[[i, j]] * gv[[0, j]];
                        dx[[i, j]] = inv * (gy - mean_gy - xhat * mean_gy_xhat);
                    }
                }
                bump!(*x, dx);
                bump!(*gain, dgain);
                bump!(*bias, dbias);
            }
            Op::MeanPoolRows { x, window } => {
                let (m, n) = self.value(*x).dim();
                let inv = S::from_f64(1.0 / *window as f64);
                let mut dx = Array2::zeros((m, n));
                for r in 0..m / window {
                    for k in 0..*window {
                        for j in 0..n {
                            dx[[r * window + k, j]] = g[[r, j]] * inv;
                        }
                    }
                }
                bump!(*x, dx);
            }
            Op::SliceCols { x, from, to } => {
                let (m, n) = self.value(*x).dim();
                let mut dx = Array2::zeros((m, n));
                for i in 0..m {
                    for j in *from..*to {
                        dx[[i, j]] = g[[i, j - from]];
                    }
                }
                bump!(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let m = g.dim().0;
                let mut at = 0;
                for &p in parts {
                    let w = self.value(p).dim().1;
                    let mut dp = Array2::zeros((m, w));
                    for i in 0..m {
                        for j in 0..w {
                            dp[[i, j]] = g[[i, at + j]];
                        }
                    }
                    bump!(p, dp);
                    at += w;
                }
            }
            Op::BceMean { scores, targets, pos_weight } => {
                let sv = self.value(*scores);
                let tv = self.value(*targets);
                let eps = S::from_f64(BCE_EPS);
                let one = S::one();
                let scale = g[[0, 0]] / S::from_f64(sv.len() as f64);
                let mut dx = Array2::zeros(sv.dim());
                for ((d, &s), &y) in dx.iter_mut().zip(sv.iter()).zip(tv.iter()) {
                    // Clamped cells contribute a constant ⇒ zero gradient.
                    if s < eps || s > one - eps {
                        continue;
                    }
                    *d = scale * (-(*pos_weight) * y / s + (one - y) / (one - s));
                }
                bump!(*scores, dx);
            }
        }
    }
}

fn clamp<S: Scalar>(v: S, lo: S, hi: S) -> S {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Row-major view of `a`, copying only when it is not already contiguous.
fn rows<S: Scalar>(a: &Array2<S>) -> ndarray::CowArray<'_, S, ndarray::Ix2> {
    a.as_standard_layout()
}

/// a[m×k] · b[k×n]. Skips zero entries of `a`, which makes sparse binary
/// spike matrices cheap.
/// Left operands denser than this go through the BLAS-style kernel; sparser
/// ones (spike rasters are mostly zeros) take the zero-skipping loop, which
/// wins once most multiplies can be skipped.
const DENSE_CUTOFF: f64 = 0.25;

fn density<S: Scalar>(a: &Array2<S>) -> f64 {
    let nonzero = a.iter().filter(|&&v| v != S::zero()).count();
    nonzero as f64 / a.len().max(1) as f64
}

pub fn matmul<S: Scalar>(a: &Array2<S>, b: &Array2<S>) -> Array2<S> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    if density(a) > DENSE_CUTOFF {
        return a.dot(b);
    }
    let b = rows(b);
    let mut c = Array2::zeros((m, n));
    for i in 0..m {
        for kk in 0..k {
            let aik = a[[i, kk]];
            if aik == S::zero() {
                continue;
            }
            let brow = b.row(kk);
            let brow = brow.as_slice().expect("standard layout");
            let mut crow = c.row_mut(i);
            let crow = crow.as_slice_mut().expect("standard layout");
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
    c
}

/// a[m×k] · bᵀ where b is [n×k]. Both operands are dense in every graph that
/// uses this shape (attention scores, gradients), so it always goes through
/// the BLAS-style kernel.
pub fn matmul_nt<S: Scalar>(a: &Array2<S>, b: &Array2<S>) -> Array2<S> {
    let (_, k) = a.dim();
    let (_, k2) = b.dim();
    assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
    a.dot(&b.t())
}

/// aᵀ · b where a is [k×m], b is [k×n].
pub fn matmul_tn<S: Scalar>(a: &Array2<S>, b: &Array2<S>) -> Array2<S> {
    let (k, m) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "matmul_tn inner dims {k} vs {k2}");
    if density(a) > DENSE_CUTOFF {
        return a.t().dot(b);
    }
    let b = rows(b);
    let mut c = Array2::zeros((m, n));
    for kk in 0..k {
        let arow = a.row(kk);
        let brow = b.row(kk);
        let brow = brow.as_slice().expect("standard layout");
        for (i, &aki) in arow.iter().enumerate() {
            if aki == S::zero() {
                continue;
            }
            let mut crow = c.row_mut(i);
            let crow = crow.as_slice_mut().expect("standard layout");
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aki * bj;
            }
        }
    }
    c
}
