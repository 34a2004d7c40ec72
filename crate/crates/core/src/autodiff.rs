//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] owns an arena of tensors and records every differentiable
//! operation applied to them. [`Tape::backward`] replays the record in exact
//! reverse order, accumulating gradients additively across fan-out. All math
//! is 64-bit; a tape and its tensors are confined to one thread, while
//! independent tapes may run concurrently.
//!
//! Broadcasting for binary elementwise ops follows trailing-dimension
//! alignment: shapes are right-aligned and each aligned pair of dimensions
//! must be equal or 1. Anything fancier is rejected as a dimension error.

use crate::error::{Result, TrcError};
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Handle into a [`Tape`]'s tensor arena.
pub type TensorId = usize;

/// Dense 64-bit tensor stored row-major.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// GELU tanh-approximation constants, fixed so the backward rule is
/// closed-form.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Matmul { a: TensorId, b: TensorId, out: TensorId },
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Div { a: TensorId, b: TensorId, out: TensorId },
    Scale { a: TensorId, c: f64, out: TensorId },
    Square { a: TensorId, out: TensorId },
    Sqrt { a: TensorId, out: TensorId },
    Relu { a: TensorId, out: TensorId },
    Gelu { a: TensorId, out: TensorId },
    Softmax { a: TensorId, out: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64, out: TensorId },
    Sum { a: TensorId, out: TensorId },
    Mean { a: TensorId, out: TensorId },
    SumLast { a: TensorId, out: TensorId },
    L2NormLast { a: TensorId, out: TensorId },
    Reshape { a: TensorId, out: TensorId },
    ConcatLast { parts: Vec<TensorId>, widths: Vec<usize>, out: TensorId },
    SliceLast { a: TensorId, start: usize, width: usize, out: TensorId },
    Clamp { a: TensorId, lo: Vec<f64>, hi: Vec<f64>, out: TensorId },
}

/// Wengert tape: records forward ops, replays them in reverse for gradients.
#[derive(Debug, Default)]
pub struct Tape {
    tensors: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<Op>,
}

fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}

/// Right-aligned broadcast of two shapes. Each aligned dimension pair must be
/// equal or 1.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TrcError::Dimension(format!(
                "shapes {} and {} are not broadcast-compatible",
                shape_str(a),
                shape_str(b)
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Row-major strides, with stride 0 on broadcast (size-1) dimensions after
/// padding `shape` to `out_shape`'s rank.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let offset = nd - shape.len();
    let mut padded = vec![1usize; nd];
    padded[offset..].copy_from_slice(shape);
    let mut strides = vec![0usize; nd];
    let mut acc = 1usize;
    for d in (0..nd).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

/// Visit every element of the broadcast output, yielding flat indices into
/// the output and both inputs. Odometer-style, no per-element div/mod.
fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out_shape.iter().product();
    if n == 0 {
        return;
    }
    let a_str = broadcast_strides(a_shape, out_shape);
    let b_str = broadcast_strides(b_shape, out_shape);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let (mut ai, mut bi) = (0usize, 0usize);
    for flat in 0..n {
        f(flat, ai, bi);
        for d in (0..nd).rev() {
            idx[d] += 1;
            ai += a_str[d];
            bi += b_str[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ai -= a_str[d] * out_shape[d];
            bi -= b_str[d] * out_shape[d];
        }
    }
}

fn gelu_forward(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let t = GELU_C * (x + GELU_A * x * x * x);
    let th = t.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Register a leaf tensor. Data is owned by the tape; callers keep their
    /// own copies, so recording and discarding a tape never mutates inputs.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TrcError::Dimension(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape_str(&shape),
                numel
            )));
        }
        let id = self.tensors.len();
        self.tensors.push(Tensor { shape, data, requires_grad });
        self.grads.push(None);
        Ok(id)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(vec![v], vec![1], false).expect("scalar leaf")
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.tensors[id].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id].shape
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id]
    }

    /// Gradient of the last `backward` target w.r.t. tensor `id`, if any
    /// gradient flowed to it. Always matches the tensor's shape.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: impl FnOnce(TensorId) -> Op) -> TensorId {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by forward op"
        );
        let id = self.tensors.len();
        self.tensors.push(Tensor { shape, data, requires_grad });
        self.grads.push(None);
        if requires_grad {
            self.ops.push(op(id));
        }
        id
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.tensors[i].requires_grad)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// 2-D matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.tensors[a].shape, &self.tensors[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TrcError::Dimension(format!(
                "matmul requires [m,k]·[k,n], got {} and {}",
                shape_str(sa),
                shape_str(sb)
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let av = ArrayView2::from_shape((m, k), &self.tensors[a].data).expect("matmul lhs view");
            let bv = ArrayView2::from_shape((k, n), &self.tensors[b].data).expect("matmul rhs view");
            let mut cv = ArrayViewMut2::from_shape((m, n), &mut out[..]).expect("matmul out view");
            general_mat_mul(1.0, &av, &bv, 0.0, &mut cv);
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, vec![m, n], rg, |out| Op::Matmul { a, b, out }))
    }

    // ── Elementwise binary ops with trailing broadcast ──────────────

    fn binary(&mut self, a: TensorId, b: TensorId, kind: u8) -> Result<TensorId> {
        let out_shape = broadcast_shape(&self.tensors[a].shape, &self.tensors[b].shape)?;
        let n: usize = out_shape.iter().product();
        let mut out = vec![0.0; n];
        let (ad, bd) = (&self.tensors[a].data, &self.tensors[b].data);
        if self.tensors[a].shape == self.tensors[b].shape {
            match kind {
                0 => out.iter_mut().zip(ad.iter().zip(bd)).for_each(|(o, (&x, &y))| *o = x + y),
                1 => out.iter_mut().zip(ad.iter().zip(bd)).for_each(|(o, (&x, &y))| *o = x - y),
                2 => out.iter_mut().zip(ad.iter().zip(bd)).for_each(|(o, (&x, &y))| *o = x * y),
                _ => out.iter_mut().zip(ad.iter().zip(bd)).for_each(|(o, (&x, &y))| *o = x / y),
            }
        } else {
            let apply = |x: f64, y: f64| match kind {
                0 => x + y,
                1 => x - y,
                2 => x * y,
                _ => x / y,
            };
            for_each_broadcast(&out_shape, &self.tensors[a].shape, &self.tensors[b].shape, |o, ai, bi| {
                out[o] = apply(ad[ai], bd[bi]);
            });
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, out_shape, rg, |out| match kind {
            0 => Op::Add { a, b, out },
            1 => Op::Sub { a, b, out },
            2 => Op::Mul { a, b, out },
            _ => Op::Div { a, b, out },
        }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, 1)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, 2)
    }

    /// Elementwise division. Divisor must be nonzero (checked in debug).
    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, 3)
    }

    // ── Elementwise unary ops ───────────────────────────────────────

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: impl FnOnce(TensorId) -> Op) -> TensorId {
        let out: Vec<f64> = self.tensors[a].data.iter().map(|&x| f(x)).collect();
        let shape = self.tensors[a].shape.clone();
        let rg = self.tensors[a].requires_grad;
        self.push(out, shape, rg, op)
    }

    /// Multiply every element by the constant `c`.
    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| x * c, |out| Op::Scale { a, c, out })
    }

    /// Add the constant `c` to every element. Recorded as a scale-by-one
    /// would be, gradient passes through unchanged.
    pub fn shift(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| x + c, |out| Op::Scale { a, c: 1.0, out })
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x * x, |out| Op::Square { a, out })
    }

    /// Elementwise square root; domain x > 0 for differentiation.
    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::sqrt, |out| Op::Sqrt { a, out })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.max(0.0), |out| Op::Relu { a, out })
    }

    /// Tanh-approximation GELU with fixed constants.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, gelu_forward, |out| Op::Gelu { a, out })
    }

    /// Componentwise clamp. `lo`/`hi` give a bound pattern tiled along the
    /// last axis (length 1 for uniform bounds). Gradient is identity for
    /// elements within bounds and zero for clipped elements.
    pub fn clamp(&mut self, a: TensorId, lo: &[f64], hi: &[f64]) -> Result<TensorId> {
        let last = *self.tensors[a].shape.last().unwrap_or(&1);
        if lo.len() != hi.len() || lo.is_empty() || last % lo.len() != 0 {
            return Err(TrcError::Dimension(format!(
                "clamp bound pattern of length {} does not tile last axis of {}",
                lo.len(),
                shape_str(&self.tensors[a].shape)
            )));
        }
        let p = lo.len();
        let out: Vec<f64> = self.tensors[a]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x.clamp(lo[i % p], hi[i % p]))
            .collect();
        let shape = self.tensors[a].shape.clone();
        let rg = self.tensors[a].requires_grad;
        let (lo, hi) = (lo.to_vec(), hi.to_vec());
        Ok(self.push(out, shape, rg, |out| Op::Clamp { a, lo, hi, out }))
    }

    // ── Structured ops ──────────────────────────────────────────────

    /// Max-subtracted softmax along the last axis.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.tensors[a].shape.clone();
        let w = *shape.last().ok_or_else(|| TrcError::Dimension("softmax on rank-0 tensor".into()))?;
        if w == 0 {
            return Err(TrcError::Dimension("softmax along empty last axis".into()));
        }
        let d = &self.tensors[a].data;
        let mut out = vec![0.0; d.len()];
        for r in 0..d.len() / w {
            let row = &d[r * w..(r + 1) * w];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &x) in out[r * w..(r + 1) * w].iter_mut().zip(row) {
                *o = (x - mx).exp();
                s += *o;
            }
            for o in &mut out[r * w..(r + 1) * w] {
                *o /= s;
            }
        }
        let rg = self.tensors[a].requires_grad;
        Ok(self.push(out, shape, rg, |out| Op::Softmax { a, out }))
    }

    /// Per-last-axis normalization to zero mean and unit variance
    /// (eps-stabilized), followed by the affine map `gamma * x + beta`.
    pub fn layernorm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let shape = self.tensors[x].shape.clone();
        let d = *shape.last().ok_or_else(|| TrcError::Dimension("layernorm on rank-0 tensor".into()))?;
        if d == 0 {
            return Err(TrcError::Dimension("layernorm along empty last axis".into()));
        }
        if self.tensors[gamma].shape != [d] || self.tensors[beta].shape != [d] {
            return Err(TrcError::Dimension(format!(
                "layernorm affine params must have shape [{}], got gamma {} beta {}",
                d,
                shape_str(&self.tensors[gamma].shape),
                shape_str(&self.tensors[beta].shape)
            )));
        }
        if eps <= 0.0 {
            return Err(TrcError::Contract(format!("layernorm eps must be positive, got {eps}")));
        }
        let xd = &self.tensors[x].data;
        let (g, b) = (&self.tensors[gamma].data, &self.tensors[beta].data);
        let mut out = vec![0.0; xd.len()];
        for r in 0..xd.len() / d {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * inv * g[j] + b[j];
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push(out, shape, rg, |out| Op::LayerNorm { x, gamma, beta, eps, out }))
    }

    // ── Reductions ──────────────────────────────────────────────────

    /// Sum of all elements (scalar output of shape `[1]`).
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.tensors[a].data.iter().sum();
        let rg = self.tensors[a].requires_grad;
        self.push(vec![s], vec![1], rg, |out| Op::Sum { a, out })
    }

    /// Mean of all elements (scalar output of shape `[1]`).
    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.tensors[a].data.len().max(1);
        let s: f64 = self.tensors[a].data.iter().sum::<f64>() / n as f64;
        let rg = self.tensors[a].requires_grad;
        self.push(vec![s], vec![1], rg, |out| Op::Mean { a, out })
    }

    /// Sum along the last axis, keeping it as a size-1 dimension.
    pub fn sum_last(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.tensors[a].shape.clone();
        let w = *shape.last().ok_or_else(|| TrcError::Dimension("sum_last on rank-0 tensor".into()))?;
        let rows = self.tensors[a].data.len() / w.max(1);
        let d = &self.tensors[a].data;
        let out: Vec<f64> = (0..rows).map(|r| d[r * w..(r + 1) * w].iter().sum()).collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = 1;
        let rg = self.tensors[a].requires_grad;
        Ok(self.push(out, out_shape, rg, |out| Op::SumLast { a, out }))
    }

    /// Euclidean norm along the last axis, keeping it as a size-1 dimension.
    /// Backward uses `x / max(norm, 1e-12)` so the zero vector is safe.
    pub fn l2_norm_last(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.tensors[a].shape.clone();
        let w = *shape.last().ok_or_else(|| TrcError::Dimension("l2_norm_last on rank-0 tensor".into()))?;
        let rows = self.tensors[a].data.len() / w.max(1);
        let d = &self.tensors[a].data;
        let out: Vec<f64> = (0..rows)
            .map(|r| d[r * w..(r + 1) * w].iter().map(|&x| x * x).sum::<f64>().sqrt())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = 1;
        let rg = self.tensors[a].requires_grad;
        Ok(self.push(out, out_shape, rg, |out| Op::L2NormLast { a, out }))
    }

    // ── Shape ops ───────────────────────────────────────────────────

    pub fn reshape(&mut self, a: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        let n: usize = new_shape.iter().product();
        if n != self.tensors[a].data.len() {
            return Err(TrcError::Dimension(format!(
                "cannot reshape {} ({} elements) to {}",
                shape_str(&self.tensors[a].shape),
                self.tensors[a].data.len(),
                shape_str(&new_shape)
            )));
        }
        let data = self.tensors[a].data.clone();
        let rg = self.tensors[a].requires_grad;
        Ok(self.push(data, new_shape, rg, |out| Op::Reshape { a, out }))
    }

    /// Concatenate along the last axis. All leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TrcError::Contract("concat_last of zero tensors".into()));
        }
        let lead = |s: &[usize]| s[..s.len() - 1].to_vec();
        let first = &self.tensors[parts[0]].shape;
        let rank = first.len();
        let lead0 = lead(first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = &self.tensors[p].shape;
            if s.len() != rank || lead(s) != lead0 {
                return Err(TrcError::Dimension(format!(
                    "concat_last shapes differ in leading dims: {} vs {}",
                    shape_str(first),
                    shape_str(s)
                )));
            }
            widths.push(s[rank - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead0.iter().product::<usize>().max(1);
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let w = widths[pi];
            let d = &self.tensors[p].data;
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut out_shape = lead0;
        out_shape.push(total);
        let rg = self.needs_grad(parts);
        let parts = parts.to_vec();
        Ok(self.push(out, out_shape, rg, |out| Op::ConcatLast { parts, widths, out }))
    }

    /// Take `width` columns starting at `start` along the last axis.
    pub fn slice_last(&mut self, a: TensorId, start: usize, width: usize) -> Result<TensorId> {
        let shape = self.tensors[a].shape.clone();
        let w = *shape.last().ok_or_else(|| TrcError::Dimension("slice_last on rank-0 tensor".into()))?;
        if start + width > w {
            return Err(TrcError::Dimension(format!(
                "slice_last [{start}, {}) out of range for last axis of {}",
                start + width,
                shape_str(&shape)
            )));
        }
        let rows = self.tensors[a].data.len() / w.max(1);
        let d = &self.tensors[a].data;
        let mut out = vec![0.0; rows * width];
        for r in 0..rows {
            out[r * width..(r + 1) * width].copy_from_slice(&d[r * w + start..r * w + start + width]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = width;
        let rg = self.tensors[a].requires_grad;
        Ok(self.push(out, out_shape, rg, |out| Op::SliceLast { a, start, width, out }))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Every `requires_grad` tensor
    /// reachable from the loss ends up holding `d(loss)/d(tensor)`;
    /// gradients accumulate additively across fan-out.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensors[loss].numel() != 1 {
            return Err(TrcError::Contract(format!(
                "backward requires a scalar loss, got shape {}",
                shape_str(&self.tensors[loss].shape)
            )));
        }
        // Gradients move out of self so tensor values stay readable while
        // accumulators are mutated; no per-op cloning.
        let mut grads = std::mem::take(&mut self.grads);
        for g in &mut grads {
            *g = None;
        }
        grads[loss] = Some(vec![1.0]);
        for oi in (0..self.ops.len()).rev() {
            self.backward_op(oi, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_op(&self, oi: usize, grads: &mut [Option<Vec<f64>>]) {
        let op = &self.ops[oi];
        let out = match op {
            Op::Matmul { out, .. }
            | Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Mul { out, .. }
            | Op::Div { out, .. }
            | Op::Scale { out, .. }
            | Op::Square { out, .. }
            | Op::Sqrt { out, .. }
            | Op::Relu { out, .. }
            | Op::Gelu { out, .. }
            | Op::Softmax { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::Sum { out, .. }
            | Op::Mean { out, .. }
            | Op::SumLast { out, .. }
            | Op::L2NormLast { out, .. }
            | Op::Reshape { out, .. }
            | Op::ConcatLast { out, .. }
            | Op::SliceLast { out, .. }
            | Op::Clamp { out, .. } => *out,
        };
        if grads[out].is_none() {
            return;
        }
        let live = |id: TensorId| self.tensors[id].requires_grad;
        let len = |id: TensorId| self.tensors[id].data.len();

        match op {
            &Op::Matmul { a, b, out } => {
                let (m, k) = (self.tensors[a].shape[0], self.tensors[a].shape[1]);
                let n = self.tensors[b].shape[1];
                if live(a) {
                    let (ga, g) = grad_pair(grads, a, out, m * k);
                    let gv = ArrayView2::from_shape((m, n), g).expect("grad view");
                    let bv = ArrayView2::from_shape((k, n), &self.tensors[b].data[..]).expect("rhs view");
                    let mut gav = ArrayViewMut2::from_shape((m, k), ga).expect("lhs grad view");
                    general_mat_mul(1.0, &gv, &bv.t(), 1.0, &mut gav);
                }
                if live(b) {
                    let (gb, g) = grad_pair(grads, b, out, k * n);
                    let gv = ArrayView2::from_shape((m, n), g).expect("grad view");
                    let av = ArrayView2::from_shape((m, k), &self.tensors[a].data[..]).expect("lhs view");
                    let mut gbv = ArrayViewMut2::from_shape((k, n), gb).expect("rhs grad view");
                    general_mat_mul(1.0, &av.t(), &gv, 1.0, &mut gbv);
                }
            }
            &Op::Add { a, b, out } | &Op::Sub { a, b, out } => {
                let sign = if matches!(op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                for (input, via_lhs, s) in [(a, true, 1.0), (b, false, sign)] {
                    if !live(input) {
                        continue;
                    }
                    let same = self.tensors[input].shape == self.tensors[out].shape;
                    let (gi, g) = grad_pair(grads, input, out, len(input));
                    if same {
                        for (x, &go) in gi.iter_mut().zip(g.iter()) {
                            *x += s * go;
                        }
                    } else {
                        for_each_broadcast(
                            &self.tensors[out].shape,
                            &self.tensors[a].shape,
                            &self.tensors[b].shape,
                            |o, ai, bi| gi[if via_lhs { ai } else { bi }] += s * g[o],
                        );
                    }
                }
            }
            &Op::Mul { a, b, out } => {
                let same = self.tensors[a].shape == self.tensors[b].shape;
                if live(a) {
                    let bd = &self.tensors[b].data;
                    let (ga, g) = grad_pair(grads, a, out, len(a));
                    if same {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * bd[i];
                        }
                    } else {
                        for_each_broadcast(
                            &self.tensors[out].shape,
                            &self.tensors[a].shape,
                            &self.tensors[b].shape,
                            |o, ai, bi| ga[ai] += g[o] * bd[bi],
                        );
                    }
                }
                if live(b) {
                    let ad = &self.tensors[a].data;
                    let (gb, g) = grad_pair(grads, b, out, len(b));
                    if same {
                        for i in 0..gb.len() {
                            gb[i] += g[i] * ad[i];
                        }
                    } else {
                        for_each_broadcast(
                            &self.tensors[out].shape,
                            &self.tensors[a].shape,
                            &self.tensors[b].shape,
                            |o, ai, bi| gb[bi] += g[o] * ad[ai],
                        );
                    }
                }
            }
            &Op::Div { a, b, out } => {
                let same = self.tensors[a].shape == self.tensors[b].shape;
                if live(a) {
                    let bd = &self.tensors[b].data;
                    let (ga, g) = grad_pair(grads, a, out, len(a));
                    if same {
                        for i in 0..ga.len() {
                            ga[i] += g[i] / bd[i];
                        }
                    } else {
                        for_each_broadcast(
                            &self.tensors[out].shape,
                            &self.tensors[a].shape,
                            &self.tensors[b].shape,
                            |o, ai, bi| ga[ai] += g[o] / bd[bi],
                        );
                    }
                }
                if live(b) {
                    let ad = &self.tensors[a].data;
                    let bd = &self.tensors[b].data;
                    let (gb, g) = grad_pair(grads, b, out, len(b));
                    if same {
                        for i in 0..gb.len() {
                            gb[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
                        }
                    } else {
                        for_each_broadcast(
                            &self.tensors[out].shape,
                            &self.tensors[a].shape,
                            &self.tensors[b].shape,
                            |o, ai, bi| gb[bi] -= g[o] * ad[ai] / (bd[bi] * bd[bi]),
                        );
                    }
                }
            }
            &Op::Scale { a, c, out } => {
                if live(a) {
                    let (ga, g) = grad_pair(grads, a, out, len(a));
                    for (x, &go) in ga.iter_mut().zip(g.iter()) {
                        *x += c * go;
                    }
                }
            }
            &Op::Square { a, out } => {
                if live(a) {
                    let ad = &self.tensors[a].data;
                    let (ga, g) = grad_pair(grads, a, out, len(a));
                    for i in 0..ga.len() {
                        ga[i] += 2.0 * ad[i] * g[i];
                    }
                }
            }
            &Op::Sqrt { a, out } => {
                if live(a) {
                    let od = &self.tensors[out].data;
                    let (ga, g) = grad_pair(grads, a, out, len(a));
                    for i in 0..ga.len() {
                        ga[i] += g[i] / (2.0 * od[i].max(1e-300));
                    }
                }
            }
            &Op::Relu { a, out } => {
                if live(a) {
                    let ad = &self.tensors[a].data;
                    let (ga, g) = grad_pair(grads, a, out, len(a));
                    for i in 0..ga.len() {
                        if ad[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            &Op::Gelu { a, out } => {
                if live(a) {
                    let ad = &self.tensors[a].data;
                    let (ga, g) = grad_pair(grads, a, out, len(a));
                    for i in 0..ga.len() {
                        ga[i] += gelu_deriv(ad[i]) * g[i];
                    }
                }
            }
            &Op::Softmax { a, out } => {
                if live(a) {
                    let y = &self.tensors[out].data;
                    let w = *self.tensors[out].shape.last().unwrap();
                    let (ga, g) = grad_pair(grads, a, out, len(a));
                    for r in 0..y.len() / w {
                        let (ys, gs) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                        let dot: f64 = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..w {
                            ga[r * w + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            &Op::LayerNorm { x, gamma, beta, eps, out } => {
                let d = *self.tensors[x].shape.last().unwrap();
                let xd = &self.tensors[x].data;
                let gd = &self.tensors[gamma].data;
                let rows = xd.len() / d;
                // Per-row statistics recomputed once for all three inputs.
                let mut mus = vec![0.0; rows];
                let mut invs = vec![0.0; rows];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    mus[r] = mu;
                    invs[r] = 1.0 / (var + eps).sqrt();
                }
                if live(x) {
                    let (gx, g) = grad_pair(grads, x, out, len(x));
                    for r in 0..rows {
                        let (mu, inv) = (mus[r], invs[r]);
                        let row = &xd[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dxh = grow[j] * gd[j];
                            let xh = (row[j] - mu) * inv;
                            s1 += dxh;
                            s2 += dxh * xh;
                        }
                        s1 /= d as f64;
                        s2 /= d as f64;
                        for j in 0..d {
                            let dxh = grow[j] * gd[j];
                            let xh = (row[j] - mu) * inv;
                            gx[r * d + j] += inv * (dxh - s1 - xh * s2);
                        }
                    }
                }
                if live(gamma) {
                    let (gg, g) = grad_pair(grads, gamma, out, d);
                    for r in 0..rows {
                        let (mu, inv) = (mus[r], invs[r]);
                        for j in 0..d {
                            gg[j] += g[r * d + j] * (xd[r * d + j] - mu) * inv;
                        }
                    }
                }
                if live(beta) {
                    let (gb, g) = grad_pair(grads, beta, out, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
            }
            &Op::Sum { a, out } => {
                if live(a) {
                    let (ga, g) = grad_pair(grads, a, out, len(a));
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            &Op::Mean { a, out } => {
                if live(a) {
                    let n = len(a).max(1) as f64;
                    let (ga, g) = grad_pair(grads, a, out, len(a));
                    for x in ga.iter_mut() {
                        *x += g[0] / n;
                    }
                }
            }
            &Op::SumLast { a, out } => {
                if live(a) {
                    let w = *self.tensors[a].shape.last().unwrap();
                    let (ga, g) = grad_pair(grads, a, out, len(a));
                    for r in 0..g.len() {
                        for j in 0..w {
                            ga[r * w + j] += g[r];
                        }
                    }
                }
            }
            &Op::L2NormLast { a, out } => {
                if live(a) {
                    let w = *self.tensors[a].shape.last().unwrap();
                    let ad = &self.tensors[a].data;
                    let od = &self.tensors[out].data;
                    let (ga, g) = grad_pair(grads, a, out, len(a));
                    for r in 0..g.len() {
                        let inv = 1.0 / od[r].max(1e-12);
                        for j in 0..w {
                            ga[r * w + j] += g[r] * ad[r * w + j] * inv;
                        }
                    }
                }
            }
            &Op::Reshape { a, out } => {
                if live(a) {
                    let (ga, g) = grad_pair(grads, a, out, len(a));
                    for (x, &go) in ga.iter_mut().zip(g.iter()) {
                        *x += go;
                    }
                }
            }
            Op::ConcatLast { parts, widths, out } => {
                let out = *out;
                let total = *self.tensors[out].shape.last().unwrap();
                let rows = self.tensors[out].data.len() / total;
                let mut off = 0;
                for (pi, &part) in parts.iter().enumerate() {
                    let w = widths[pi];
                    if live(part) {
                        let (gp, g) = grad_pair(grads, part, out, len(part));
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            &Op::SliceLast { a, start, width, out } => {
                if live(a) {
                    let w = *self.tensors[a].shape.last().unwrap();
                    let rows = self.tensors[out].data.len() / width.max(1);
                    let (ga, g) = grad_pair(grads, a, out, len(a));
                    for r in 0..rows {
                        for j in 0..width {
                            ga[r * w + start + j] += g[r * width + j];
                        }
                    }
                }
            }
            Op::Clamp { a, lo, hi, out } => {
                let (a, out) = (*a, *out);
                if live(a) {
                    let ad = &self.tensors[a].data;
                    let p = lo.len();
                    let (ga, g) = grad_pair(grads, a, out, ad.len());
                    for i in 0..ga.len() {
                        if ad[i] >= lo[i % p] && ad[i] <= hi[i % p] {
                            ga[i] += g[i];
                        }
                    }
                }
            }
        }
    }
}

/// Split-borrow helper for the backward pass: the mutable gradient
/// accumulator of `dst` (allocated to zeros on demand) together with the
/// read-only upstream gradient at `src`. The two ids are always distinct
/// because the tape is single-assignment.
fn grad_pair<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    dst: usize,
    src: usize,
    dst_len: usize,
) -> (&'g mut [f64], &'g [f64]) {
    debug_assert_ne!(dst, src);
    if grads[dst].is_none() {
        grads[dst] = Some(vec![0.0; dst_len]);
    }
    if dst < src {
        let (lo, hi) = grads.split_at_mut(src);
        (lo[dst].as_mut().unwrap(), hi[0].as_deref().expect("upstream grad present"))
    } else {
        let (lo, hi) = grads.split_at_mut(dst);
        (hi[0].as_mut().unwrap(), lo[src].as_deref().expect("upstream grad present"))
    }
}
