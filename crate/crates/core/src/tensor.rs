use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::real::{rf, Real};
use crate::rng::Rng;

/// Dense row-major tensor. Training uses `f32`; gradient checks instantiate
/// the same code at `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::dimension(alloc::format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    /// Truncated-normal init (sigma in f64, standard ViT practice).
    pub fn randn_trunc(shape: &[usize], sigma: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rf::<T>(rng.trunc_normal(sigma))).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// Elementwise `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = s.mul_add(*b, *a);
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| x.to64()).collect() }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| x.to64() as f32).collect() }
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::numeric(alloc::format!("non-finite value in {what}")));
        }
        Ok(())
    }

    /// Frobenius norm squared, accumulated in f64.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x.to64() * x.to64()).sum()
    }
}

/// `C = A @ B` for row-major slices, `A: m x k`, `B: k x n`.
///
/// The reduction over `k` runs in ascending order for every output element,
/// so the result is bitwise deterministic regardless of thread count.
pub fn matmul_slices<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    c.iter_mut().for_each(|x| *x = T::zero());
    matmul_acc_slices(c, a, b, m, k, n);
}

/// `C += A @ B`; same determinism contract as [`matmul_slices`].
pub fn matmul_acc_slices<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }

    #[cfg(feature = "parallel")]
    {
        // Each task owns whole output rows, so scheduling cannot change
        // accumulation order. Only parallelize when there is real work.
        if m > 1 && m * k * n >= (1 << 20) {
            use rayon::prelude::*;
            let rows_per = m.div_ceil(2 * rayon::current_num_threads().max(1)).max(8);
            c.par_chunks_mut(rows_per * n)
                .zip(a.par_chunks(rows_per * k))
                .for_each(|(c_chunk, a_chunk)| {
                    matmul_rows(c_chunk, a_chunk, b, c_chunk.len() / n, k, n);
                });
            return;
        }
    }
    matmul_rows(c, a, b, m, k, n);
}

/// Sequential kernel: k-blocked with a 4-way unrolled update so the `B`
/// block stays in cache and the inner loop fuses into FMAs.
fn matmul_rows<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    const KB: usize = 128;
    let mut tb = 0;
    while tb < k {
        let te = (tb + KB).min(k);
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let c_row = &mut c[i * n..(i + 1) * n];
            let mut t = tb;
            while t + 4 <= te {
                let a0 = a_row[t];
                let a1 = a_row[t + 1];
                let a2 = a_row[t + 2];
                let a3 = a_row[t + 3];
                let b0 = &b[t * n..t * n + n];
                let b1 = &b[(t + 1) * n..(t + 1) * n + n];
                let b2 = &b[(t + 2) * n..(t + 2) * n + n];
                let b3 = &b[(t + 3) * n..(t + 3) * n + n];
                for j in 0..n {
                    let acc = a0.mul_add(b0[j], c_row[j]);
                    let acc = a1.mul_add(b1[j], acc);
                    let acc = a2.mul_add(b2[j], acc);
                    c_row[j] = a3.mul_add(b3[j], acc);
                }
                t += 4;
            }
            while t < te {
                let at = a_row[t];
                let b_row = &b[t * n..t * n + n];
                for j in 0..n {
                    c_row[j] = at.mul_add(b_row[j], c_row[j]);
                }
                t += 1;
            }
        }
        tb = te;
    }
}

/// `C += A^T @ B`, `A: k x m`, `B: k x n` (gradient of a weight matrix).
/// Materializes the transpose once and reuses the blocked kernel.
pub fn matmul_at_acc_slices<T: Real>(c: &mut [T], a: &[T], b: &[T], k: usize, m: usize, n: usize) {
    let mut at = vec![T::zero(); m * k];
    transpose_into(&mut at, a, k, m);
    matmul_acc_slices(c, &at, b, m, k, n);
}

/// `C += A @ B^T`, `A: m x k`, `B: n x k` (gradient through a weight matrix).
pub fn matmul_bt_acc_slices<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    let mut bt = vec![T::zero(); k * n];
    transpose_into(&mut bt, b, n, k);
    matmul_acc_slices(c, a, &bt, m, k, n);
}

pub fn transpose_into<T: Real>(out: &mut [T], x: &[T], rows: usize, cols: usize) {
    assert_eq!(out.len(), rows * cols);
    assert_eq!(x.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
}

/// Matrix product with shape checking, `a: m x k`, `b: k x n`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(CoreError::dimension("matmul expects 2-D tensors"));
    }
    let (m, ka) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    if ka != kb {
        return Err(CoreError::dimension(alloc::format!(
            "matmul inner dims differ: {m}x{ka} @ {kb}x{n}"
        )));
    }
    let mut c = Tensor::zeros(&[m, n]);
    matmul_acc_slices(c.data_mut(), a.data(), b.data(), m, ka, n);
    Ok(c)
}

/// Row-wise softmax at temperature `temp`, max-subtracted for stability.
pub fn softmax_rows<T: Real>(x: &Tensor<T>, temp: f64) -> Result<Tensor<T>> {
    if !(temp > 0.0) {
        return Err(CoreError::parameter(alloc::format!("softmax temperature must be > 0, got {temp}")));
    }
    let d = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        softmax_row_inplace(row, rf::<T>(temp));
    }
    Ok(out)
}

/// In-place softmax of one row at temperature `temp`.
#[inline]
pub fn softmax_row_inplace<T: Real>(row: &mut [T], temp: T) {
    let mut m = row[0];
    for &v in row.iter() {
        if v > m {
            m = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - m) / temp).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub const LN_EPS: f64 = 1e-6;

/// Normalize one vector to zero mean / unit variance (eps inside the sqrt),
/// then apply the affine `gain`/`bias`. Returns `(mean, rstd)` for backward.
#[inline]
pub fn ln_row_forward<T: Real>(x: &[T], gain: &[T], bias: &[T], out: &mut [T]) -> (T, T) {
    let d = x.len();
    let inv_d = T::one() / rf::<T>(d as f64);
    let mut mean = T::zero();
    for &v in x {
        mean += v;
    }
    mean *= inv_d;
    let mut var = T::zero();
    for &v in x {
        let c = v - mean;
        var = c.mul_add(c, var);
    }
    var *= inv_d;
    let rstd = T::one() / (var + rf::<T>(LN_EPS)).sqrt();
    for j in 0..d {
        out[j] = (x[j] - mean) * rstd * gain[j] + bias[j];
    }
    (mean, rstd)
}

/// Backward of [`ln_row_forward`]. Accumulates into `dgain`/`dbias`, writes
/// `dx`.
#[inline]
pub fn ln_row_backward<T: Real>(
    x: &[T],
    gain: &[T],
    mean: T,
    rstd: T,
    dy: &[T],
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let d = x.len();
    let inv_d = T::one() / rf::<T>(d as f64);
    let mut sum_g = T::zero();
    let mut sum_gx = T::zero();
    for j in 0..d {
        let xhat = (x[j] - mean) * rstd;
        let g = dy[j] * gain[j];
        sum_g += g;
        sum_gx = g.mul_add(xhat, sum_gx);
        dgain[j] = dy[j].mul_add(xhat, dgain[j]);
        dbias[j] += dy[j];
    }
    sum_g *= inv_d;
    sum_gx *= inv_d;
    for j in 0..d {
        let xhat = (x[j] - mean) * rstd;
        let g = dy[j] * gain[j];
        dx[j] = (g - sum_g - xhat * sum_gx) * rstd;
    }
}

/// Layer normalization over the last axis with affine parameters.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(CoreError::dimension(alloc::format!(
            "layer_norm affine length {} / {} does not match feature dim {d}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    for (xr, or) in x.data().chunks_exact(d).zip(out.data_mut().chunks_exact_mut(d)) {
        ln_row_forward(xr, gain.data(), bias.data(), or);
    }
    Ok(out)
}

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = rf::<T>(0.5);
    half * x * (T::one() + (x * rf::<T>(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = rf::<T>(0.5);
    let cdf = half * (T::one() + (x * rf::<T>(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = rf::<T>(0.3989422804014327) * (-half * x * x).exp();
    cdf + x * pdf
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// L2-normalize each row; rows with norm below `floor` are left unchanged.
pub fn l2_normalize_rows<T: Real>(x: &mut [T], d: usize) {
    for row in x.chunks_exact_mut(d) {
        let mut sq = T::zero();
        for &v in row.iter() {
            sq = v.mul_add(v, sq);
        }
        let norm = sq.sqrt();
        if norm > rf::<T>(1e-12) {
            let inv = T::one() / norm;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
    }
}
