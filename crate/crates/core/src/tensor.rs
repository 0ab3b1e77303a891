//! Dense rank-2 tensors of `f64` and the forward kernels used by every model.
//!
//! Everything here is a pure function of its inputs. The differentiable
//! versions of these kernels live in [`crate::graph`] and call back into the
//! row-level helpers defined below so that forward values are computed by a
//! single code path.

use std::fmt;

use rand::Rng;

use crate::error::{invalid, Error, Result, Shape};

/// Probability clamp applied inside the binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-12;

/// Train/eval switch for stochastic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Row-major matrix of 64-bit reals.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(invalid(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> Shape {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Same data viewed with a new shape of equal size.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor> {
        Tensor::from_vec(rows, cols, self.data.clone())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.shape(),
                right: bias.shape(),
            });
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm_nn(self, other, &mut out.data);
        Ok(out)
    }

    /// Concatenates tensors with equal row counts side by side.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts.first().map_or(0, |t| t.rows);
        for p in parts {
            if p.rows != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: parts[0].shape(),
                    right: p.shape(),
                });
            }
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Copies the listed rows, in order, into a new tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(invalid(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Tensor {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        check_slope(slope)?;
        Ok(self.map(|v| leaky(v, slope)))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    /// Row-wise softmax. `mask`, when given, has one flag per entry and
    /// `true` marks an entry that takes part in the normalization.
    pub fn softmax_rows(&self, mask: Option<&[bool]>) -> Result<Tensor> {
        if let Some(m) = mask {
            if m.len() != self.data.len() {
                return Err(invalid(format!(
                    "softmax mask has {} flags for a {}x{} input",
                    m.len(),
                    self.rows,
                    self.cols
                )));
            }
        }
        let mut out = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let row_mask = mask.map(|m| &m[r * self.cols..(r + 1) * self.cols]);
            softmax_row(self.row(r), row_mask, out.row_mut(r)).ok_or(Error::FullyMaskedRow { row: r })?;
        }
        Ok(out)
    }

    /// Per-row standardization with population variance followed by an
    /// elementwise affine map.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        check_norm_args(self, gain, bias, eps)?;
        let mut out = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (mean, inv) = row_moments(self.row(r), eps);
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (self.data[r * self.cols + c] - mean) * inv * gain.data[c] + bias.data[c];
            }
        }
        Ok(out)
    }

    /// Inverted dropout. Returns the output and, in train mode, the
    /// per-entry multipliers (0 or `1/(1-rate)`) that were applied.
    pub fn dropout<R: Rng + ?Sized>(
        &self,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor, Option<Vec<f64>>)> {
        check_rate(rate)?;
        if mode == Mode::Eval || rate == 0.0 {
            return Ok((self.clone(), None));
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.data.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&mask).map(|(x, m)| x * m).collect(),
        };
        Ok((out, Some(mask)))
    }
}

/// Uniform init in `±sqrt(6 / (rows + cols))`.
pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
    }
}

/// `out += a * b` for row-major `a: m x k`, `b: k x n`.
pub(crate) fn gemm_nn(a: &Tensor, b: &Tensor, out: &mut [f64]) {
    let n = b.cols;
    for i in 0..a.rows {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a.row(i).iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a * b^T` for `a: m x n`, `b: k x n`, `out: m x k`.
pub(crate) fn gemm_nt(a: &Tensor, b: &Tensor, out: &mut [f64]) {
    let k = b.rows;
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..k {
            let dot: f64 = a_row.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            out[i * k + j] += dot;
        }
    }
}

/// `out += a^T * b` for `a: m x k`, `b: m x n`, `out: k x n`.
pub(crate) fn gemm_tn(a: &Tensor, b: &Tensor, out: &mut [f64]) {
    let n = b.cols;
    for i in 0..a.rows {
        let b_row = b.row(i);
        for (p, &av) in a.row(i).iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn leaky(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

/// Logistic function, stable over the whole finite range and kept strictly
/// inside (0, 1).
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Writes the softmax of `logits` over entries whose mask flag is set.
/// Returns `None` when every entry is masked.
pub(crate) fn softmax_row(logits: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> Option<()> {
    let live = |i: usize| mask.is_none_or(|m| m[i]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| live(i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut total = 0.0;
    for (i, (o, &v)) in out.iter_mut().zip(logits).enumerate() {
        *o = if live(i) { (v - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Some(())
}

/// Mean and `1/sqrt(var + eps)` of one row (population variance).
pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn check_slope(slope: f64) -> Result<()> {
    if !(0.0..1.0).contains(&slope) {
        return Err(invalid(format!("leaky slope {slope} outside [0, 1)")));
    }
    Ok(())
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

pub(crate) fn check_norm_args(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<()> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(invalid(format!("layer-norm eps must be positive, got {eps}")));
    }
    for p in [gain, bias] {
        if p.rows != 1 || p.cols != x.cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: x.shape(),
                right: p.shape(),
            });
        }
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities `p` (`m x 1`) against labels.
pub fn bce_loss(p: &Tensor, labels: &[f64]) -> Result<f64> {
    if p.cols != 1 || p.rows != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "bce_loss",
            left: p.shape(),
            right: (labels.len(), 1),
        });
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = p.data.iter().zip(labels).map(|(&p, &y)| bce_term(p, y)).sum();
    Ok(total / labels.len() as f64)
}

#[inline]
pub(crate) fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}
