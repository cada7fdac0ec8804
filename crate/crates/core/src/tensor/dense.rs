//! Dense row-major tensors and the pure numeric kernels the tape is built on.
//!
//! Values are held as `f64` internally. A tensor tagged [`DType::F32`] rounds
//! every produced value through `f32`, so 32-bit training behaves like a
//! 32-bit implementation while gradient checks can run in full 64-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// The wider of two dtypes.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>, dtype: DType) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data, dtype))
    }

    pub fn f64(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(shape, data, DType::F64)
    }

    pub fn f32(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(shape, data, DType::F32)
    }

    /// Builds a tensor whose data length is already known to match `shape`,
    /// rounding values to `dtype`.
    pub(crate) fn from_parts(shape: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if dtype == DType::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        Self { shape, dtype, data }
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        Self::full(shape, 0.0, dtype)
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Self {
        Self::full(shape, 1.0, dtype)
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel], dtype)
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Self::from_parts(vec![], vec![value], dtype)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    /// Writes one value (rounded to the tensor's dtype).
    pub fn set(&mut self, index: usize, value: f64) {
        self.data[index] = self.dtype.round(value);
    }

    /// Applies `f` to every element in place, keeping dtype rounding.
    pub fn map_inplace(&mut self, mut f: impl FnMut(f64) -> f64) {
        let dt = self.dtype;
        for v in self.data.iter_mut() {
            *v = dt.round(f(*v));
        }
    }

    pub fn map(&self, f: impl FnMut(f64) -> f64) -> Tensor {
        let data = self.data.iter().copied().map(f).collect();
        Self::from_parts(self.shape.clone(), data, self.dtype)
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.clone(), dtype)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype: self.dtype,
            data: self.data.clone(),
        })
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }

    /// Size of the last axis; rows = everything before it.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            dtype: self.dtype,
            data: out,
        })
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.shape.clone(), data, self.dtype.promote(other.dtype)))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// `self += other`, in place.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let dt = self.dtype;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = dt.round(*a + b);
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

fn check_inner(op: &'static str, a: &Tensor, b: &Tensor, ka: usize, kb: usize) -> Result<()> {
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

const MR: usize = 4;
const NR: usize = 4;

/// Row-major `a[m×k] · b[k×n]`, register-tiled. Each output accumulates
/// over `k` in order, so results match the naive triple loop exactly.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let mut panel = vec![0.0; k * NR];
    let mut j0 = 0;
    while j0 < n {
        let nr = NR.min(n - j0);
        // pack b[:, j0..j0+nr] contiguously, zero-padded to NR
        for p in 0..k {
            let dst = &mut panel[p * NR..(p + 1) * NR];
            dst[..nr].copy_from_slice(&b[p * n + j0..p * n + j0 + nr]);
            dst[nr..].fill(0.0);
        }
        let mut i0 = 0;
        while i0 < m {
            let mr = MR.min(m - i0);
            let mut acc = [[0.0f64; NR]; MR];
            if mr == MR {
                let a0 = &a[i0 * k..(i0 + 1) * k];
                let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
                let a2 = &a[(i0 + 2) * k..(i0 + 3) * k];
                let a3 = &a[(i0 + 3) * k..(i0 + 4) * k];
                for (p, bv) in panel.chunks_exact(NR).enumerate() {
                    let av = [a0[p], a1[p], a2[p], a3[p]];
                    for r in 0..MR {
                        for c in 0..NR {
                            acc[r][c] += av[r] * bv[c];
                        }
                    }
                }
            } else {
                for (p, bv) in panel.chunks_exact(NR).enumerate() {
                    for (r, row) in acc.iter_mut().enumerate().take(mr) {
                        let av = a[(i0 + r) * k + p];
                        for c in 0..NR {
                            row[c] += av * bv[c];
                        }
                    }
                }
            }
            for (r, row) in acc.iter().enumerate().take(mr) {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + nr].copy_from_slice(&row[..nr]);
            }
            i0 += MR;
        }
        j0 += NR;
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (kb, n) = b.dims2("matmul")?;
    check_inner("matmul", a, b, k, kb)?;
    let out = gemm(&a.data, &b.data, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out, a.dtype.promote(b.dtype)))
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul_bt")?;
    let (n, kb) = b.dims2("matmul_bt")?;
    check_inner("matmul_bt", a, b, k, kb)?;
    let out = gemm(&a.data, &transpose_raw(&b.data, n, k), m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out, a.dtype.promote(b.dtype)))
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2("matmul_at")?;
    let (kb, n) = b.dims2("matmul_at")?;
    check_inner("matmul_at", a, b, k, kb)?;
    let out = gemm(&transpose_raw(&a.data, k, m), &b.data, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out, a.dtype.promote(b.dtype)))
}

/// Row-wise softmax with max subtraction. Works on the last axis of any rank.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    masked_softmax_rows(x, None)
}

/// Row-wise softmax where row `i` may only see columns `j <= visible_offset + i`.
/// `None` means every column is visible.
pub fn masked_softmax_rows(x: &Tensor, visible_offset: Option<usize>) -> Tensor {
    let n = x.last_dim();
    let rows = if n == 0 { 0 } else { x.len() / n };
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        let visible = match visible_offset {
            Some(off) => (off + i + 1).min(n),
            None => n,
        };
        let row = &x.data[i * n..i * n + visible];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * n..i * n + visible];
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Tensor::from_parts(x.shape.clone(), out, x.dtype)
}

/// `y = w ⊙ x / sqrt(mean(x²) + eps)` over the last axis.
pub fn rms_norm(x: &Tensor, w: &Tensor, eps: f64) -> Result<Tensor> {
    let h = x.last_dim();
    if w.len() != h {
        return Err(Error::ShapeMismatch {
            op: "rms_norm",
            left: x.shape.clone(),
            right: w.shape.clone(),
        });
    }
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.data.chunks(h).zip(out.chunks_mut(h)) {
        let inv = rms_inverse(xr, eps);
        for ((o, &xv), &wv) in or.iter_mut().zip(xr).zip(&w.data) {
            *o = if inv.is_finite() { wv * xv * inv } else { 0.0 };
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out, x.dtype.promote(w.dtype)))
}

/// `1 / sqrt(mean(x²) + eps)`; infinite for an all-zero row with `eps = 0`.
pub(crate) fn rms_inverse(row: &[f64], eps: f64) -> f64 {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    1.0 / (ms + eps).sqrt()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

/// Rotary embedding over `[seq × heads × d_head]` (or `[seq × heads·d_head]`
/// with `d_head` supplied through the 3-d shape). Pair `(2i, 2i+1)` of each
/// head at position `p` is rotated by `p · theta_base^(-2i/d_head)`.
pub fn rope_apply(x: &Tensor, positions: &[usize], theta_base: f64) -> Result<Tensor> {
    let d_head = match x.shape[..] {
        [_, _, d] => d,
        _ => {
            return Err(Error::ShapeMismatch {
                op: "rope_apply",
                left: x.shape.clone(),
                right: vec![],
            })
        }
    };
    rope_rotate(x, positions, d_head, theta_base, false)
}

/// Rotary rotation on a tensor whose first axis is sequence and whose
/// remaining elements per row split into heads of width `d_head`.
/// `inverse` rotates by the negated angle (used by the backward pass).
pub(crate) fn rope_rotate(
    x: &Tensor,
    positions: &[usize],
    d_head: usize,
    theta_base: f64,
    inverse: bool,
) -> Result<Tensor> {
    if d_head == 0 || d_head % 2 != 0 {
        return Err(Error::config(format!("rotary head width must be even, got {d_head}")));
    }
    let seq = x.shape.first().copied().unwrap_or(0);
    if positions.len() != seq {
        return Err(Error::ShapeMismatch {
            op: "rope_apply",
            left: x.shape.clone(),
            right: vec![positions.len()],
        });
    }
    let row_len = if seq == 0 { 0 } else { x.len() / seq };
    if row_len % d_head != 0 {
        return Err(Error::ShapeMismatch {
            op: "rope_apply",
            left: x.shape.clone(),
            right: vec![d_head],
        });
    }
    let freqs: Vec<f64> = (0..d_head / 2)
        .map(|i| theta_base.powf(-2.0 * i as f64 / d_head as f64))
        .collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = x.data.clone();
    for (s, &pos) in positions.iter().enumerate() {
        let row = &mut out[s * row_len..(s + 1) * row_len];
        for head in row.chunks_mut(d_head) {
            for (i, &f) in freqs.iter().enumerate() {
                let angle = sign * pos as f64 * f;
                let (sin, cos) = angle.sin_cos();
                let a = head[2 * i];
                let b = head[2 * i + 1];
                head[2 * i] = a * cos - b * sin;
                head[2 * i + 1] = a * sin + b * cos;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out, x.dtype))
}

/// Target id marking a position that contributes nothing to the loss.
pub const IGNORE_ID: u32 = u32::MAX;

/// Mean next-token cross entropy of `logits[seq×V]` against `targets`.
/// Positions whose target is [`IGNORE_ID`] are skipped.
pub fn cross_entropy_next_token(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    let (total, count) = cross_entropy_sum(logits, targets)?;
    Ok(total / count as f64)
}

/// Summed cross entropy and number of counted positions.
pub(crate) fn cross_entropy_sum(logits: &Tensor, targets: &[u32]) -> Result<(f64, usize)> {
    let (seq, vocab) = logits.dims2("cross_entropy")?;
    if seq != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: logits.shape.clone(),
            right: vec![targets.len()],
        });
    }
    let mut total = 0.0;
    let mut count = 0;
    for (i, &t) in targets.iter().enumerate() {
        if t == IGNORE_ID {
            continue;
        }
        if t as usize >= vocab {
            return Err(Error::TargetOutOfRange { target: t, vocab });
        }
        let row = logits.row(i);
        total += log_sum_exp(row) - row[t as usize];
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoUnmaskedPositions);
    }
    Ok((total, count))
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
