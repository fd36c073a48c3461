//! Differentiable layers with a uniform forward/backward contract.
//!
//! Every layer caches what its backward pass needs during `forward`, and
//! `backward` *accumulates* parameter gradients (so several sub-batches can
//! be summed before an optimizer step) while returning the input gradient.

mod batchnorm;
mod conv;
mod dropout;
mod linear;
mod loss;
mod pointwise;

pub use batchnorm::{BatchNorm, GhostSize};
pub use conv::Conv2d;
pub use dropout::Dropout;
pub use linear::Linear;
pub use loss::{l2_penalty, softmax_xent};
pub use pointwise::{ConstantScale, GlobalMeanPool, Relu, ScalarBias, ScalarMultiplier};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// What a parameter is, which decides e.g. whether L2 applies to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    Multiplier,
    ScalarBias,
}

/// Mutable view of one parameter and its gradient accumulator.
pub struct ParamMut<'a, T> {
    pub name: &'static str,
    pub kind: ParamKind,
    pub value: &'a mut Tensor<T>,
    pub grad: &'a mut Tensor<T>,
}

/// A parameter tensor and its same-shaped gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = value.zeros_like();
        Self { value, grad }
    }

    /// Borrowed view handed to optimizers and penalties.
    pub fn view(&mut self, name: &'static str, kind: ParamKind) -> ParamMut<'_, T> {
        ParamMut { name, kind, value: &mut self.value, grad: &mut self.grad }
    }
}

pub trait Module<T: Real> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Gradient with respect to the input of the most recent forward;
    /// parameter gradients are added to their accumulators.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        Vec::new()
    }

    /// Drops cached activations.
    fn clear_cache(&mut self);
}

/// The closed set of layer kinds networks are assembled from.
#[derive(Debug, Clone)]
pub enum Layer<T> {
    Linear(Linear<T>),
    Conv2d(Conv2d<T>),
    Relu(Relu<T>),
    BatchNorm(BatchNorm<T>),
    ScalarMultiplier(ScalarMultiplier<T>),
    ScalarBias(ScalarBias<T>),
    Dropout(Dropout<T>),
    Scale(ConstantScale<T>),
    GlobalMeanPool(GlobalMeanPool),
}

macro_rules! dispatch {
    ($self:ident, $l:ident => $body:expr) => {
        match $self {
            Layer::Linear($l) => $body,
            Layer::Conv2d($l) => $body,
            Layer::Relu($l) => $body,
            Layer::BatchNorm($l) => $body,
            Layer::ScalarMultiplier($l) => $body,
            Layer::ScalarBias($l) => $body,
            Layer::Dropout($l) => $body,
            Layer::Scale($l) => $body,
            Layer::GlobalMeanPool($l) => $body,
        }
    };
}

impl<T: Real> Module<T> for Layer<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        dispatch!(self, l => Module::<T>::forward(l, x, mode))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        dispatch!(self, l => Module::<T>::backward(l, grad_out))
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        dispatch!(self, l => Module::<T>::params_mut(l))
    }

    fn clear_cache(&mut self) {
        dispatch!(self, l => Module::<T>::clear_cache(l))
    }
}

impl<T: Real> Layer<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu(_) => "relu",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::ScalarMultiplier(_) => "scalar_multiplier",
            Layer::ScalarBias(_) => "scalar_bias",
            Layer::Dropout(_) => "dropout",
            Layer::Scale(_) => "scale",
            Layer::GlobalMeanPool(_) => "global_mean_pool",
        }
    }

    /// Linear and convolution layers carry the weights initializers act on.
    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Linear(_) | Layer::Conv2d(_))
    }

    /// Weight tensor and fan-in of a weighted layer.
    pub fn weight_mut(&mut self) -> Option<(&mut Tensor<T>, usize)> {
        match self {
            Layer::Linear(l) => {
                let fan_in = l.fan_in();
                Some((&mut l.weight.value, fan_in))
            }
            Layer::Conv2d(c) => {
                let fan_in = c.fan_in();
                Some((&mut c.kernel.value, fan_in))
            }
            _ => None,
        }
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor<T>> {
        match self {
            Layer::Linear(l) => l.bias.as_mut().map(|b| &mut b.value),
            Layer::Conv2d(c) => c.bias.as_mut().map(|b| &mut b.value),
            _ => None,
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.value.len()).sum()
    }
}

/// Per-column sums of a row-major `rows × channels` buffer.
pub(crate) fn column_sums<T: Real>(data: &[T], channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    for row in data.chunks_exact(channels) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v.as_f64();
        }
    }
    out
}
