//! Dense row-major tensors and the numeric kernels shared by the autograd ops.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Floating point element type of a tensor. Implemented for `f32` (training)
/// and `f64` (gradient checks and oracles).
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    const NAME: &'static str;

    fn erf(self) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float to f64")
    }
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    fn erf(self) -> Self {
        libm::erf(self)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values but buffer has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Independent zero-mean normal draws with standard deviation `scale`.
    pub fn randn(shape: impl Into<Vec<usize>>, stream: &mut RngStream, scale: f64) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Config(format!("randn scale must be > 0, got {scale}")));
        }
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(stream.normal() * scale))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when the tensor is viewed as a matrix over its last axis.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Sum with a fixed sequential order.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise fingerprint of the buffer, used to check frozen tensors.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over the little-endian f64 image of every element.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &d in &self.shape {
            for b in (d as u64).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        for v in &self.data {
            for b in v.as_f64().to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn transpose2d(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        Self {
            shape: vec![c, r],
            data: transpose(&self.data, r, c),
        }
    }

    /// 2-D matrix product; leading dims of `self` are flattened into rows.
    pub fn matmul2d(&self, other: &Tensor<T>) -> Result<Self> {
        if other.shape.len() != 2 || self.cols() != other.shape[0] {
            return Err(Error::Shape(format!(
                "matmul of {:?} and {:?}: inner dimensions differ",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(&mut out, &self.data, &other.data, m, k, n);
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = n;
        Ok(Self { shape, data: out })
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("empty shape {shape:?}")));
    }
    Ok(())
}

pub(crate) fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = Vec::with_capacity(src.len());
    for j in 0..cols {
        out.extend((0..rows).map(|i| src[i * cols + j]));
    }
    out
}

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// Every output element accumulates its `k` products strictly in index
/// order, so results are bitwise reproducible; the unrolled form below only
/// groups loads, `((c + a0·b0) + a1·b1) + ...` is still left-to-right.
pub(crate) fn gemm_acc<T: Element>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if n == 0 || m == 0 {
        return;
    }
    const MR: usize = 4;
    const NR: usize = 32;
    let k4 = k - k % 4;
    let m4 = m - m % MR;
    let n32 = n - n % NR;
    // Register tile: MR rows × NR columns of C stay in registers for the
    // whole k loop.
    for i in (0..m4).step_by(MR) {
        for j0 in (0..n32).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j0..(i + r) * n + j0 + NR]);
            }
            for p in 0..k {
                let bp: &[T; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for j in 0..NR {
                        row[j] = row[j] + av * bp[j];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j0..(i + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        for r in 0..MR {
            let arow = &a[(i + r) * k..(i + r + 1) * k];
            for p in 0..k {
                let av = arow[p];
                for j in n32..n {
                    c[(i + r) * n + j] = c[(i + r) * n + j] + av * b[p * n + j];
                }
            }
        }
    }
    for i in m4..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        let mut p = 0;
        while p < k4 {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                crow[j] = crow[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        while p < k {
            let a0 = arow[p];
            let b0 = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + a0 * b0[j];
            }
            p += 1;
        }
    }
}

/// `c[m×n] += a[m×k] · bᵀ` where `b` is stored `n×k`.
pub(crate) fn gemm_nt_acc<T: Element>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) {
    let bt = transpose(b, n, k);
    gemm_acc(c, a, &bt, m, k, n);
}

/// `c[k×n] += aᵀ · b` where `a` is stored `m×k` and `b` is `m×n`.
pub(crate) fn gemm_tn_acc<T: Element>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) {
    let at = transpose(a, m, k);
    gemm_acc(c, &at, b, k, m, n);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_sequential_dot_bitwise() {
        let mut s = RngStream::new(3, "gemm");
        for &(m, k, n) in &[(1, 1, 1), (3, 7, 5), (4, 8, 16), (5, 13, 3), (9, 37, 70), (8, 64, 64)] {
            let a: Vec<f64> = (0..m * k).map(|_| s.normal()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| s.normal()).collect();
            let mut c = vec![0.0; m * n];
            gemm_acc(&mut c, &a, &b, m, k, n);
            assert_eq!(c, naive(&a, &b, m, k, n));
        }
    }

    #[test]
    fn transposed_variants() {
        let mut s = RngStream::new(4, "gemm");
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|_| s.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| s.normal()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_nt_acc(&mut c, &a, &transpose(&b, k, n), m, k, n);
        assert_eq!(c, want);

        let mut c = vec![0.0; m * n];
        gemm_tn_acc(&mut c, &transpose(&a, m, k), &b, k, m, n);
        assert_eq!(c, want);
    }

    #[test]
    fn shape_checks() {
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        let t = Tensor::<f64>::zeros(vec![2, 3]);
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }

    #[test]
    fn randn_rejects_bad_input() {
        let mut s = RngStream::new(0, "x");
        assert!(Tensor::<f64>::randn(vec![2, 2], &mut s, 0.0).is_err());
        let err = Tensor::<f64>::randn(vec![2, 0], &mut s, 1.0).unwrap_err();
        assert!(err.to_string().contains("empty shape"));
    }

    #[test]
    fn randn_deterministic_per_stream() {
        let a = Tensor::<f64>::randn(vec![2, 2], &mut RngStream::new(9, "s"), 1.0).unwrap();
        let b = Tensor::<f64>::randn(vec![2, 2], &mut RngStream::new(9, "s"), 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn randn_moments() {
        // Monte Carlo oracle: 1e5 draws, mean within 0.02 of 0, std within 0.02 of scale.
        let mut s = RngStream::new(11, "moments");
        let scale = 1.5;
        let t = Tensor::<f64>::randn(vec![100_000], &mut s, scale).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - scale).abs() < 0.02, "std {}", var.sqrt());
    }
}
