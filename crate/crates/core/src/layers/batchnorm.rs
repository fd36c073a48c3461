use serde::{Deserialize, Serialize};

use super::{Mode, Module, Param, ParamKind, ParamMut};
use crate::error::{Error, Result};
use crate::tensor::{channel_moments_slice, Real, Tensor};

/// How many examples share one set of batch statistics in train mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GhostSize {
    /// Statistics over the whole batch handed to `forward`.
    Full,
    /// Contiguous groups of this many examples, each normalized on its own.
    Fixed(usize),
}

#[derive(Debug, Clone)]
struct Cache<T> {
    mode: Mode,
    x_hat: Tensor<T>,
    /// `1 / sqrt(var + eps)`, one row of channels per ghost group.
    inv_std: Vec<f64>,
    rows_per_group: usize,
}

/// Batch normalization over every axis but the last.
///
/// Train mode: `O = γ (I − μ) / sqrt(σ² + ε) + β` with biased per-channel
/// statistics of each ghost group, and running statistics updated as
/// `running ← momentum·running + (1 − momentum)·stat` using the mean of the
/// group statistics. Eval mode uses the running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub moving_mean: Vec<f64>,
    pub moving_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub ghost: GhostSize,
    cache: Option<Cache<T>>,
}

impl<T: Real> BatchNorm<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.9;

    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Param::new(Tensor::full(&[channels], T::one())?),
            beta: Param::new(Tensor::zeros(&[channels])?),
            moving_mean: vec![0.0; channels],
            moving_var: vec![1.0; channels],
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
            ghost: GhostSize::Full,
            cache: None,
        })
    }

    pub fn with_ghost(mut self, ghost: GhostSize) -> Self {
        self.ghost = ghost;
        self
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn channels(&self) -> usize {
        self.moving_mean.len()
    }

    /// Examples per ghost group for a batch of `batch` examples.
    fn group_size(&self, batch: usize) -> Result<usize> {
        match self.ghost {
            GhostSize::Full => Ok(batch),
            GhostSize::Fixed(0) => Err(Error::InvalidArgument("ghost size must be positive".into())),
            GhostSize::Fixed(g) if batch % g != 0 => Err(Error::InvalidArgument(format!(
                "batch {batch} is not divisible by ghost size {g}"
            ))),
            GhostSize::Fixed(g) => Ok(g),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() < 2 || x.channels() != self.channels() {
            return Err(Error::Shape(format!(
                "batchnorm over {} channels got {:?}",
                self.channels(),
                x.shape()
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        Ok(())
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.channels();
        let group = self.group_size(x.batch())?;
        let rows_per_example = x.len() / x.batch() / c;
        let rows_per_group = group * rows_per_example;
        if rows_per_group < 2 {
            return Err(Error::DegenerateBatch(format!(
                "each ghost group reduces over {rows_per_group} value(s) per channel; need at least 2"
            )));
        }
        let groups = x.batch() / group;
        let mut x_hat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(groups * c);
        let mut mean_acc = vec![0.0; c];
        let mut var_acc = vec![0.0; c];
        let span = rows_per_group * c;
        for (gi, chunk) in x.data().chunks_exact(span).enumerate() {
            let (mean, var) = channel_moments_slice(chunk, c);
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
            let mean_t: Vec<T> = mean.iter().map(|&m| T::cast_f64(m)).collect();
            let inv_t: Vec<T> = inv.iter().map(|&s| T::cast_f64(s)).collect();
            let base = gi * span;
            for (r, row) in chunk.chunks_exact(c).enumerate() {
                let o = base + r * c;
                for ch in 0..c {
                    let h = (row[ch] - mean_t[ch]) * inv_t[ch];
                    x_hat[o + ch] = h;
                    out[o + ch] = self.gamma.value.data()[ch] * h + self.beta.value.data()[ch];
                }
            }
            for ch in 0..c {
                mean_acc[ch] += mean[ch];
                var_acc[ch] += var[ch];
            }
            inv_std.extend(inv);
        }
        let m = self.momentum;
        for ch in 0..c {
            let (bm, bv) = (mean_acc[ch] / groups as f64, var_acc[ch] / groups as f64);
            self.moving_mean[ch] = m * self.moving_mean[ch] + (1.0 - m) * bm;
            self.moving_var[ch] = m * self.moving_var[ch] + (1.0 - m) * bv;
        }
        self.cache = Some(Cache {
            mode: Mode::Train,
            x_hat: Tensor::from_vec(x.shape(), x_hat)?,
            inv_std,
            rows_per_group,
        });
        Tensor::from_vec(x.shape(), out)
    }

    fn forward_eval(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.channels();
        let inv: Vec<f64> = self.moving_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mean_t: Vec<T> = self.moving_mean.iter().map(|&m| T::cast_f64(m)).collect();
        let inv_t: Vec<T> = inv.iter().map(|&s| T::cast_f64(s)).collect();
        let mut x_hat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for (r, row) in x.data().chunks_exact(c).enumerate() {
            for ch in 0..c {
                let h = (row[ch] - mean_t[ch]) * inv_t[ch];
                x_hat[r * c + ch] = h;
                out[r * c + ch] = self.gamma.value.data()[ch] * h + self.beta.value.data()[ch];
            }
        }
        self.cache = Some(Cache {
            mode: Mode::Eval,
            x_hat: Tensor::from_vec(x.shape(), x_hat)?,
            inv_std: inv,
            rows_per_group: x.len() / c,
        });
        Tensor::from_vec(x.shape(), out)
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        match mode {
            Mode::Train => self.forward_train(x),
            Mode::Eval => self.forward_eval(x),
        }
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache("batchnorm"))?;
        cache.x_hat.expect_same_shape(grad_out, "batchnorm backward")?;
        let c = self.channels();
        let gamma: Vec<f64> = self.gamma.value.data().iter().map(|v| v.as_f64()).collect();
        let span = cache.rows_per_group * c;
        let z = cache.rows_per_group as f64;
        let mut dx = vec![T::zero(); grad_out.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (gi, (g_chunk, h_chunk)) in grad_out
            .data()
            .chunks_exact(span)
            .zip(cache.x_hat.data().chunks_exact(span))
            .enumerate()
        {
            let mut sum_g = vec![0.0; c];
            let mut sum_gh = vec![0.0; c];
            for (g_row, h_row) in g_chunk.chunks_exact(c).zip(h_chunk.chunks_exact(c)) {
                for ch in 0..c {
                    let g = g_row[ch].as_f64();
                    sum_g[ch] += g;
                    sum_gh[ch] += g * h_row[ch].as_f64();
                }
            }
            let inv = &cache.inv_std[gi * c..(gi + 1) * c];
            let base = gi * span;
            for (r, (g_row, h_row)) in g_chunk.chunks_exact(c).zip(h_chunk.chunks_exact(c)).enumerate() {
                for ch in 0..c {
                    let g = g_row[ch].as_f64();
                    let v = match cache.mode {
                        // Batch statistics depend on the input: full Jacobian.
                        Mode::Train => {
                            gamma[ch] * inv[ch] / z
                                * (z * g - sum_g[ch] - h_row[ch].as_f64() * sum_gh[ch])
                        }
                        Mode::Eval => gamma[ch] * inv[ch] * g,
                    };
                    dx[base + r * c + ch] = T::cast_f64(v);
                }
            }
            for ch in 0..c {
                dgamma[ch] += sum_gh[ch];
                dbeta[ch] += sum_g[ch];
            }
        }
        for (acc, v) in self.gamma.grad.data_mut().iter_mut().zip(dgamma) {
            *acc += T::cast_f64(v);
        }
        for (acc, v) in self.beta.grad.data_mut().iter_mut().zip(dbeta) {
            *acc += T::cast_f64(v);
        }
        Tensor::from_vec(grad_out.shape(), dx)
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        vec![self.gamma.view("gamma", ParamKind::Gamma), self.beta.view("beta", ParamKind::Beta)]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}
