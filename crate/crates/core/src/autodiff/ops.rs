//! Differentiable operations on [`Var`].
//!
//! Binary elementwise operations broadcast only by leading-axis expansion:
//! the smaller operand's shape must be a suffix of the larger one's.

use rand::Rng;

use super::linalg::{axpy, dot, gemm};
use super::tape::{Tape, Var};
use crate::error::TensorError;
use crate::sparse;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`, several times cheaper than libm's.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

/// tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = fast_tanh(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Relu,
    Gelu,
    Tanh,
    Exp,
    Square,
}

enum Broadcast {
    Same,
    /// rhs repeats every `n` elements of lhs
    Rhs(usize),
    /// lhs repeats every `n` elements of rhs
    Lhs(usize),
}

fn broadcast(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, Broadcast), TensorError> {
    if a == b {
        return Ok((a.to_vec(), Broadcast::Same));
    }
    if a.ends_with(b) {
        return Ok((a.to_vec(), Broadcast::Rhs(b.iter().product())));
    }
    if b.ends_with(a) {
        return Ok((b.to_vec(), Broadcast::Lhs(a.iter().product())));
    }
    Err(TensorError::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() })
}

fn expect_2d(op: &'static str, shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::Contract(format!("{op} expects a 2-D tensor, got {shape:?}"))),
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let rows = if cols == 0 { 0 } else { shape.iter().product::<usize>() / cols };
    (rows, cols)
}

impl<'t> Var<'t> {
    pub fn elementwise(self, op: BinaryOp, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        let (shape, mode) = broadcast(name, &self.shape(), &rhs.shape())?;
        let (a, b) = (self.value(), rhs.value());
        let n: usize = shape.iter().product();
        let ia = |i: usize| match mode {
            Broadcast::Lhs(k) => i % k,
            _ => i,
        };
        let ib = |i: usize| match mode {
            Broadcast::Rhs(k) => i % k,
            _ => i,
        };
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let out: Vec<f64> = (0..n).map(|i| f(a[ia(i)], b[ib(i)])).collect();
        let (ida, idb) = (self.id(), rhs.id());
        let (ka, kb) = match mode {
            Broadcast::Same => (n, n),
            Broadcast::Rhs(k) => (n, k),
            Broadcast::Lhs(k) => (k, n),
        };
        Ok(self.tape().record(shape, out, &[self, rhs], move |g, sink| {
            if let Some(ga) = sink.slot(ida) {
                for (i, gi) in g.iter().enumerate() {
                    let d = match op {
                        BinaryOp::Add | BinaryOp::Sub => 1.0,
                        BinaryOp::Mul => b[i % kb],
                    };
                    ga[i % ka] += gi * d;
                }
            }
            if let Some(gb) = sink.slot(idb) {
                for (i, gi) in g.iter().enumerate() {
                    let d = match op {
                        BinaryOp::Add => 1.0,
                        BinaryOp::Sub => -1.0,
                        BinaryOp::Mul => a[i % ka],
                    };
                    gb[i % kb] += gi * d;
                }
            }
        }))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.elementwise(BinaryOp::Add, rhs)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.elementwise(BinaryOp::Sub, rhs)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.elementwise(BinaryOp::Mul, rhs)
    }

    pub fn unary(self, op: UnaryOp) -> Var<'t> {
        let x = self.value();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| match op {
                UnaryOp::Sigmoid => sigmoid(v),
                UnaryOp::Relu => v.max(0.0),
                UnaryOp::Gelu => gelu(v),
                UnaryOp::Tanh => v.tanh(),
                UnaryOp::Exp => v.exp(),
                UnaryOp::Square => v * v,
            })
            .collect();
        let saved = y.clone();
        let id = self.id();
        self.tape().record(self.shape(), y, &[self], move |g, sink| {
            let Some(gx) = sink.slot(id) else { return };
            for i in 0..g.len() {
                let (xi, yi) = (x[i], saved[i]);
                let d = match op {
                    UnaryOp::Sigmoid => yi * (1.0 - yi),
                    UnaryOp::Relu => {
                        if xi > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    UnaryOp::Gelu => gelu_grad(xi),
                    UnaryOp::Tanh => 1.0 - yi * yi,
                    UnaryOp::Exp => yi,
                    UnaryOp::Square => 2.0 * xi,
                };
                gx[i] += g[i] * d;
            }
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryOp::Relu)
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(UnaryOp::Gelu)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryOp::Square)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let y: Vec<f64> = self.value().iter().map(|v| v * c).collect();
        let id = self.id();
        self.tape().record(self.shape(), y, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(id) {
                axpy(c, g, gx);
            }
        })
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().iter().sum();
        let id = self.id();
        self.tape().record(vec![], vec![s], &[self], move |g, sink| {
            if let Some(gx) = sink.slot(id) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column means over the leading axes: `[.., d] -> [d]`.
    pub fn mean_rows(self) -> Var<'t> {
        let (rows, cols) = split_last(&self.shape());
        let x = self.value();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            axpy(1.0 / rows as f64, &x[r * cols..(r + 1) * cols], &mut out);
        }
        let id = self.id();
        self.tape().record(vec![cols], out, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(id) {
                for r in 0..rows {
                    axpy(1.0 / rows as f64, g, &mut gx[r * cols..(r + 1) * cols]);
                }
            }
        })
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>, TensorError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(),
                right: shape,
            });
        }
        let id = self.id();
        let data = self.value().as_ref().clone();
        Ok(self.tape().record(shape, data, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(id) {
                axpy(1.0, g, gx);
            }
        }))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (sa, sb) = (self.shape(), rhs.shape());
        let mismatch =
            || TensorError::ShapeMismatch { op: "matmul", left: sa.clone(), right: sb.clone() };
        let ((m, k), (k2, n)) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => ((*m, *k), (*k2, *n)),
            _ => return Err(mismatch()),
        };
        if k != k2 {
            return Err(mismatch());
        }
        let (a, b) = (self.value(), rhs.value());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut out, false);
        let (ida, idb) = (self.id(), rhs.id());
        Ok(self.tape().record(vec![m, n], out, &[self, rhs], move |g, sink| {
            if let Some(ga) = sink.slot(ida) {
                // dA = G · Bᵀ
                gemm(m, n, k, g, false, &b, true, ga, true);
            }
            if let Some(gb) = sink.slot(idb) {
                // dB = Aᵀ · G
                gemm(k, m, n, &a, true, g, false, gb, true);
            }
        }))
    }

    pub fn transpose(self) -> Result<Var<'t>, TensorError> {
        let (r, c) = expect_2d("transpose", &self.shape())?;
        let x = self.value();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let id = self.id();
        Ok(self.tape().record(vec![c, r], out, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(id) {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }))
    }

    /// Row-wise layer normalization over the last axis.
    pub fn layer_norm(
        self,
        gain: Var<'t>,
        bias: Var<'t>,
        eps: f64,
    ) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        let (rows, d) = split_last(&shape);
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: gain.shape(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Contract("layer_norm eps must be positive".into()));
        }
        let (x, gm, bt) = (self.value(), gain.value(), bias.value());
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gm[j] * h + bt[j];
            }
        }
        let (idx, idg, idb) = (self.id(), gain.id(), bias.id());
        Ok(self.tape().record(shape, out, &[self, gain, bias], move |g, sink| {
            if let Some(gg) = sink.slot(idg) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = sink.slot(idb) {
                for r in 0..rows {
                    axpy(1.0, &g[r * d..(r + 1) * d], gb);
                }
            }
            if let Some(gx) = sink.slot(idx) {
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let h = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dxhat[j] = g[r * d + j] * gm[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dh = dot(&dxhat, h) / d as f64;
                    for j in 0..d {
                        gx[r * d + j] += inv_std[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                    }
                }
            }
        }))
    }

    /// Softmax over the last axis, with max-subtraction.
    pub fn softmax_rows(self) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        let (rows, cols) = split_last(&shape);
        let x = self.value();
        if x.iter().any(|v| v.is_nan()) {
            return Err(TensorError::Numeric("softmax input contains NaN".into()));
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            sparse::softmax_into(&x[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        let y = out.clone();
        let id = self.id();
        Ok(self.tape().record(shape, out, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(id) {
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let s = dot(yr, gr);
                    for j in 0..cols {
                        gx[r * cols + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
        }))
    }

    /// Row-wise sparse probability mapping over the last axis.
    pub fn sparse_rows(self, kind: sparse::SparseKind) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        let (rows, cols) = split_last(&shape);
        let x = self.value();
        let mut dists = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let d = kind.apply(&x[r * cols..(r + 1) * cols])?;
            out.extend_from_slice(&d.probs);
            dists.push(d);
        }
        let id = self.id();
        Ok(self.tape().record(shape, out, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(id) {
                for (r, d) in dists.iter().enumerate() {
                    let jvp = kind.jvp(d, &g[r * cols..(r + 1) * cols]).expect("jvp shape");
                    axpy(1.0, &jvp, &mut gx[r * cols..(r + 1) * cols]);
                }
            }
        }))
    }

    /// Selects rows of a 2-D tensor; repeated indices accumulate gradient.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>, TensorError> {
        let (rows, cols) = expect_2d("gather_rows", &self.shape())?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Contract(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let x = self.value();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let idx = idx.to_vec();
        let id = self.id();
        Ok(self.tape().record(vec![idx.len(), cols], out, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(id) {
                for (r, &i) in idx.iter().enumerate() {
                    axpy(1.0, &g[r * cols..(r + 1) * cols], &mut gx[i * cols..(i + 1) * cols]);
                }
            }
        }))
    }

    /// `[a ‖ b]` along the last axis of two 2-D tensors with equal row counts.
    pub fn concat_cols(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (ra, ca) = expect_2d("concat_cols", &self.shape())?;
        let (rb, cb) = expect_2d("concat_cols", &rhs.shape())?;
        if ra != rb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let (a, b) = (self.value(), rhs.value());
        let c = ca + cb;
        let mut out = Vec::with_capacity(ra * c);
        for r in 0..ra {
            out.extend_from_slice(&a[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&b[r * cb..(r + 1) * cb]);
        }
        let (ida, idb) = (self.id(), rhs.id());
        Ok(self.tape().record(vec![ra, c], out, &[self, rhs], move |g, sink| {
            if let Some(ga) = sink.slot(ida) {
                for r in 0..ra {
                    axpy(1.0, &g[r * c..r * c + ca], &mut ga[r * ca..(r + 1) * ca]);
                }
            }
            if let Some(gb) = sink.slot(idb) {
                for r in 0..ra {
                    axpy(1.0, &g[r * c + ca..(r + 1) * c], &mut gb[r * cb..(r + 1) * cb]);
                }
            }
        }))
    }

    /// Scales row `i` of a 2-D tensor by `s[i]`; `s` has `rows` elements.
    pub fn mul_rows(self, s: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (rows, cols) = expect_2d("mul_rows", &self.shape())?;
        if s.numel() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "mul_rows",
                left: self.shape(),
                right: s.shape(),
            });
        }
        let (x, sv) = (self.value(), s.value());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for j in 0..cols {
                out[r * cols + j] = x[r * cols + j] * sv[r];
            }
        }
        let (idx, ids) = (self.id(), s.id());
        Ok(self.tape().record(vec![rows, cols], out, &[self, s], move |g, sink| {
            if let Some(gx) = sink.slot(idx) {
                for r in 0..rows {
                    axpy(sv[r], &g[r * cols..(r + 1) * cols], &mut gx[r * cols..(r + 1) * cols]);
                }
            }
            if let Some(gs) = sink.slot(ids) {
                for r in 0..rows {
                    gs[r] += dot(&g[r * cols..(r + 1) * cols], &x[r * cols..(r + 1) * cols]);
                }
            }
        }))
    }

    /// `[n, d] -> [heads, n, d/heads]`
    pub fn split_heads(self, heads: usize) -> Result<Var<'t>, TensorError> {
        let (n, d) = expect_2d("split_heads", &self.shape())?;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Contract(format!(
                "split_heads: width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let x = self.value();
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            for i in 0..n {
                out[(h * n + i) * dh..(h * n + i + 1) * dh]
                    .copy_from_slice(&x[i * d + h * dh..i * d + (h + 1) * dh]);
            }
        }
        let id = self.id();
        Ok(self.tape().record(vec![heads, n, dh], out, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(id) {
                for h in 0..heads {
                    for i in 0..n {
                        axpy(
                            1.0,
                            &g[(h * n + i) * dh..(h * n + i + 1) * dh],
                            &mut gx[i * d + h * dh..i * d + (h + 1) * dh],
                        );
                    }
                }
            }
        }))
    }

    /// `[heads, n, dh] -> [n, heads*dh]`
    pub fn merge_heads(self) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        let [heads, n, dh] = shape[..] else {
            return Err(TensorError::Contract(format!(
                "merge_heads expects [heads, n, dh], got {shape:?}"
            )));
        };
        let d = heads * dh;
        let x = self.value();
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            for i in 0..n {
                out[i * d + h * dh..i * d + (h + 1) * dh]
                    .copy_from_slice(&x[(h * n + i) * dh..(h * n + i + 1) * dh]);
            }
        }
        let id = self.id();
        Ok(self.tape().record(vec![n, d], out, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(id) {
                for h in 0..heads {
                    for i in 0..n {
                        axpy(
                            1.0,
                            &g[i * d + h * dh..i * d + (h + 1) * dh],
                            &mut gx[(h * n + i) * dh..(h * n + i + 1) * dh],
                        );
                    }
                }
            }
        }))
    }

    /// Mean token cross-entropy over rows that carry a target.
    pub fn cross_entropy(self, targets: &[Option<usize>]) -> Result<Var<'t>, TensorError> {
        let (rows, vocab) = expect_2d("cross_entropy", &self.shape())?;
        if targets.len() != rows {
            return Err(TensorError::Contract(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        let counted = targets.iter().flatten().count();
        if counted == 0 {
            return Err(TensorError::Contract("cross_entropy: no targets".into()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(TensorError::Contract(format!(
                "cross_entropy: target {bad} outside vocabulary of {vocab}"
            )));
        }
        let z = self.value();
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &z[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            for j in 0..vocab {
                probs[r * vocab + j] = (row[j] - lse).exp();
            }
        }
        let scale = 1.0 / counted as f64;
        let targets = targets.to_vec();
        let id = self.id();
        Ok(self.tape().record(vec![], vec![total * scale], &[self], move |g, sink| {
            if let Some(gx) = sink.slot(id) {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..vocab {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gx[r * vocab + j] += g[0] * scale * (probs[r * vocab + j] - onehot);
                    }
                }
            }
        }))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(self, rate: f64, rng: &mut R) -> Var<'t> {
        if rate <= 0.0 {
            return self;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out: Vec<f64> = self.value().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let id = self.id();
        self.tape().record(self.shape(), out, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(id) {
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
        })
    }
}

/// Stacks 2-D tensors with equal column counts along the row axis.
pub fn concat_rows<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
    let mut cols = None;
    let mut spans = Vec::with_capacity(parts.len());
    let mut out = Vec::new();
    for p in parts {
        let (r, c) = expect_2d("concat_rows", &p.shape())?;
        if *cols.get_or_insert(c) != c {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                left: parts[0].shape(),
                right: p.shape(),
            });
        }
        spans.push((p.id(), out.len(), r * c));
        out.extend_from_slice(&p.value());
    }
    let cols = cols.unwrap_or(0);
    let rows = if cols == 0 { 0 } else { out.len() / cols };
    Ok(tape.record(vec![rows, cols], out, parts, move |g, sink| {
        for &(id, start, len) in &spans {
            if let Some(gx) = sink.slot(id) {
                axpy(1.0, &g[start..start + len], gx);
            }
        }
    }))
}
