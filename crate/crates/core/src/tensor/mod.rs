//! Dense tensors, seeded sampling and the numeric kernels the layers are built on.
//!
//! Layout conventions are fixed: fully connected activations are `N × F`,
//! image activations are `N × H × W × C` (channels last) and convolution
//! kernels are `kh × kw × Cin × Cout`. Every reduction that is "per channel"
//! reduces over all axes except the last one.

mod conv;
mod real;
mod rng;

pub use conv::{conv2d, Conv2dGeometry, Padding};
pub use real::Real;
pub use rng::Rng;

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: std::fmt::Debug> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<&T> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data[..8]", &preview)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("tensor must have at least one axis".into()));
    }
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return Err(Error::Shape(format!("extent of axis {axis} is zero in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self { shape: shape.to_vec(), data: vec![value; len] })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    /// Zero tensor with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self { shape: self.shape.clone(), data: vec![T::zero(); self.data.len()] }
    }

    /// Builds a tensor from `f64` values (handy for literals in tests and fixtures).
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::cast_f64(v)).collect())
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    /// I.i.d. Gaussian samples. Values are drawn in `f64` and rounded, so an
    /// `f32` tensor is the elementwise rounding of the `f64` tensor drawn from
    /// the same generator state.
    pub fn gaussian(shape: &[usize], mean: f64, std: f64, rng: &mut Rng) -> Result<Self> {
        if !mean.is_finite() || !std.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "gaussian moments must be finite (mean {mean}, std {std})"
            )));
        }
        if std < 0.0 {
            return Err(Error::InvalidArgument(format!("negative std {std}")));
        }
        let len = check_shape(shape)?;
        let mut data = Vec::with_capacity(len);
        rng.fill_standard_normal(len, |z| data.push(T::cast_f64(mean + std * z)));
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// I.i.d. samples from `U[low, high)`.
    pub fn uniform(shape: &[usize], low: f64, high: f64, rng: &mut Rng) -> Result<Self> {
        if !(low.is_finite() && high.is_finite() && low <= high) {
            return Err(Error::InvalidArgument(format!("bad uniform range [{low}, {high})")));
        }
        let len = check_shape(shape)?;
        let data = (0..len).map(|_| T::cast_f64(low + (high - low) * rng.uniform())).collect();
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Extent of the leading (batch) axis.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Extent of the trailing (channel / feature) axis.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a.as_f64() * b.as_f64()).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Biased variance pooled over every element (all channels and examples).
    pub fn pooled_variance(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.sum() / n;
        self.data.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    /// Per-channel mean and biased variance, reducing over every axis but the last.
    pub fn channel_moments(&self) -> (Vec<f64>, Vec<f64>) {
        channel_moments_slice(&self.data, self.channels())
    }

    /// Shifts and scales every channel to mean 0 and biased variance 1.
    /// Constant channels are only centered.
    pub fn standardize_channels(&self) -> Self {
        let (mean, var) = self.channel_moments();
        let inv: Vec<f64> = var.iter().map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        let c = self.channels();
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(c) {
            for ((x, m), s) in row.iter_mut().zip(&mean).zip(&inv) {
                *x = T::cast_f64((x.as_f64() - m) * s);
            }
        }
        out
    }

    /// Rows `start..end` of the batch axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.batch() {
            return Err(Error::Shape(format!(
                "batch slice {start}..{end} out of range for batch {}",
                self.batch()
            )));
        }
        let row = self.data.len() / self.batch();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self { shape, data: self.data[start * row..end * row].to_vec() })
    }

    /// Gathers the given batch rows into a new tensor.
    pub fn gather_batch(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("empty gather".into()));
        }
        let per = self.data.len() / self.batch();
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            if r >= self.batch() {
                return Err(Error::Shape(format!("row {r} out of range {}", self.batch())));
            }
            data.extend_from_slice(&self.data[r * per..(r + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self { shape, data })
    }

    /// Concatenates along the batch axis.
    pub fn concat_batch(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!(
                    "concat of {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            batch += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Ok(Self { shape, data })
    }

    /// Matrix product of a `N × K` and a `K × M` tensor.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (n, k) = self.as_matrix("matmul lhs")?;
        let (k2, m) = other.as_matrix("matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {:?} · {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(n, k, m, &self.data, [k, 1], &other.data, [m, 1], T::zero(), &mut out);
        Self::from_vec(&[n, m], out)
    }

    fn as_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("{what} must be rank 2, got {:?}", self.shape))),
        }
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

pub(crate) fn channel_moments_slice<T: Real>(data: &[T], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = data.len() / channels;
    let z = rows as f64;
    let mut mean = vec![0.0f64; channels];
    for row in data.chunks_exact(channels) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= z);
    let mut var = vec![0.0f64; channels];
    for row in data.chunks_exact(channels) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.as_f64() - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= z);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extents_and_bad_lengths() {
        assert!(Tensor::<f64>::zeros(&[2, 0]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::zeros(&[]).is_err());
    }

    #[test]
    fn gaussian_moments_at_one_million() {
        let mut rng = Rng::new(11);
        let t = Tensor::<f64>::gaussian(&[1_000_000], 0.0, 1.0, &mut rng).unwrap();
        let mean = t.sum() / t.len() as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((t.pooled_variance() - 1.0).abs() < 0.01);
    }

    #[test]
    fn gaussian_zero_std_is_constant() {
        let mut rng = Rng::new(3);
        let t = Tensor::<f64>::gaussian(&[17], 2.5, 0.0, &mut rng).unwrap();
        assert!(t.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn gaussian_rejects_non_finite_moments() {
        let mut rng = Rng::new(3);
        assert!(Tensor::<f64>::gaussian(&[4], f64::NAN, 1.0, &mut rng).is_err());
        assert!(Tensor::<f64>::gaussian(&[4], 0.0, f64::INFINITY, &mut rng).is_err());
        assert!(Tensor::<f64>::gaussian(&[4], 0.0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn gaussian_same_seed_is_bit_identical() {
        let a = Tensor::<f64>::gaussian(&[5, 7], 0.0, 1.0, &mut Rng::new(42)).unwrap();
        let b = Tensor::<f64>::gaussian(&[5, 7], 0.0, 1.0, &mut Rng::new(42)).unwrap();
        assert_eq!(a.data(), b.data());
        let c = Tensor::<f32>::gaussian(&[5, 7], 0.0, 1.0, &mut Rng::new(42)).unwrap();
        assert_eq!(a.cast::<f32>().data(), c.data());
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let b = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(Tensor::eye(2).unwrap().matmul(&b).unwrap(), b);

        let a = Tensor::<f64>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        let v = Tensor::<f64>::from_f64(&[2, 1], &[5., 6.]).unwrap();
        assert_eq!(a.matmul(&v).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::<f64>::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::<f64>::from_f64(&[4], &[-1.0, -2.0, -0.5, -3.0]).unwrap();
        assert!(neg.relu().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_zero_fraction_on_gaussian() {
        let x = Tensor::<f64>::gaussian(&[1_000_000], 0.0, 1.0, &mut Rng::new(5)).unwrap();
        let zeros = x.relu().data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / 1e6;
        assert!((frac - 0.5).abs() < 0.01, "zero fraction {frac}");
    }

    #[test]
    fn channel_moments_examples() {
        let c = Tensor::<f64>::full(&[4, 2, 2, 3], 3.0).unwrap();
        let (m, v) = c.channel_moments();
        assert!(m.iter().all(|&x| x == 3.0));
        assert!(v.iter().all(|&x| x == 0.0));

        let t = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 3.0]).unwrap();
        let (m, v) = t.channel_moments();
        assert_eq!(m, vec![2.0]);
        assert_eq!(v, vec![1.0]);
    }

    #[test]
    fn batch_slicing_round_trips_through_concat() {
        let t = Tensor::<f64>::gaussian(&[6, 2, 2, 3], 0.0, 1.0, &mut Rng::new(9)).unwrap();
        let a = t.slice_batch(0, 2).unwrap();
        let b = t.slice_batch(2, 6).unwrap();
        assert_eq!(Tensor::concat_batch(&[a, b]).unwrap(), t);
        assert!(t.slice_batch(4, 7).is_err());
    }
}
