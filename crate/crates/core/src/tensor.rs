//! Dense row-major `f32` matrices and the handful of kernels the toy DiT needs.
//!
//! Every matrix product reports its multiply-accumulate cost into a
//! [`FlopTally`] as `2·m·n·k`. Elementwise work (norms, softmax, activations,
//! residual adds) is deliberately not counted.

use crate::error::{Error, Result};

/// Running count of matrix-product FLOPs for one unit of work.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct FlopTally(pub u64);

impl FlopTally {
    pub fn add(&mut self, flops: u64) {
        self.0 += flops;
    }

    /// Cost of an `(m×k)·(k×n)` product.
    pub fn matmul_cost(m: usize, k: usize, n: usize) -> u64 {
        2 * (m as u64) * (k as u64) * (n as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                format!("{} elements ({rows}x{cols})", rows * cols),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self += gate ⊙ other`, with `gate` broadcast along rows.
    pub fn add_gated(&mut self, other: &Matrix, gate: &[f32]) -> Result<()> {
        self.check_same_shape(other)?;
        if gate.len() != self.cols {
            return Err(Error::dim(self.cols, gate.len()));
        }
        for (dst, src) in self
            .data
            .chunks_mut(self.cols)
            .zip(other.data.chunks(self.cols))
        {
            for ((d, s), g) in dst.iter_mut().zip(src).zip(gate) {
                *d += g * s;
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += s;
        }
        Ok(())
    }

    /// Sum of absolute values, accumulated in `f64`.
    pub fn l1_norm(&self) -> f64 {
        l1(&self.data)
    }
}

pub(crate) fn l1(values: &[f32]) -> f64 {
    values.iter().map(|v| f64::from(v.abs())).sum()
}

/// Affine map `y = x·W + b` with `W` stored as `(in × out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix, flops: &mut FlopTally) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::dim(
                format!("{} input features", self.in_dim()),
                format!("{} input features", x.cols()),
            ));
        }
        let (m, k, n) = (x.rows(), self.in_dim(), self.out_dim());
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let row = out.row_mut(i);
            row.copy_from_slice(&self.bias);
            for (p, &a) in x.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, w) in row.iter_mut().zip(self.weight.row(p)) {
                    *o += a * w;
                }
            }
        }
        flops.add(FlopTally::matmul_cost(m, k, n));
        Ok(out)
    }

    /// Forward a single vector.
    pub fn forward_vec(&self, x: &[f32], flops: &mut FlopTally) -> Result<Vec<f32>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.forward(&m, flops)?.into_vec())
    }
}

/// Row-wise layer normalization (no affine part), followed by `gain`.
pub fn layer_norm(x: &Matrix, gain: &[f32], eps: f32) -> Matrix {
    let mut out = x.clone();
    let n = x.cols() as f32;
    for row in out.as_mut_slice().chunks_mut(x.cols()) {
        let mean = row.iter().sum::<f32>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v = (*v - mean) * inv * g;
        }
    }
    out
}

/// `x ⊙ (1 + scale) + shift`, broadcast along rows.
pub fn modulate(x: &mut Matrix, shift: &[f32], scale: &[f32]) {
    let cols = x.cols();
    for row in x.as_mut_slice().chunks_mut(cols) {
        for ((v, sh), sc) in row.iter_mut().zip(shift).zip(scale) {
            *v = *v * (1.0 + sc) + sh;
        }
    }
}

pub fn gelu_inplace(x: &mut Matrix) {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    for v in x.as_mut_slice() {
        let u = *v;
        *v = 0.5 * u * (1.0 + (SQRT_2_OVER_PI * (u + 0.044_715 * u * u * u)).tanh());
    }
}

pub fn softmax_inplace(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Multi-head scaled dot-product attention over already-projected `q`, `k`, `v`.
///
/// `q` is `(T × d)`, `k`/`v` are `(S × d)`; heads split `d` evenly.
pub fn multi_head_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    n_heads: usize,
    flops: &mut FlopTally,
) -> Result<Matrix> {
    if k.shape() != v.shape() || q.cols() != k.cols() {
        return Err(Error::dim(
            format!("q (T x {}) with k, v of equal shape", q.cols()),
            format!("k {:?}, v {:?}", k.shape(), v.shape()),
        ));
    }
    let (t, d) = q.shape();
    let s = k.rows();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = Matrix::zeros(t, d);
    let mut scores = vec![0.0f32; s];
    for h in 0..n_heads {
        let lo = h * dh;
        let hi = lo + dh;
        for i in 0..t {
            let qi = &q.row(i)[lo..hi];
            for (j, sc) in scores.iter_mut().enumerate() {
                let kj = &k.row(j)[lo..hi];
                *sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
            }
            softmax_inplace(&mut scores);
            let oi = &mut out.row_mut(i)[lo..hi];
            for (j, &p) in scores.iter().enumerate() {
                for (o, vv) in oi.iter_mut().zip(&v.row(j)[lo..hi]) {
                    *o += p * vv;
                }
            }
        }
    }
    // QK^T and PV per head.
    flops.add(2 * n_heads as u64 * FlopTally::matmul_cost(t, dh, s));
    Ok(out)
}
