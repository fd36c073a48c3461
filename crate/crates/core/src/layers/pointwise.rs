use super::{Mode, Module, Param, ParamKind, ParamMut};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    output: Option<Tensor<T>>,
}

impl<T: Real> Relu<T> {
    pub fn new() -> Self {
        Self { output: None }
    }
}

impl<T: Real> Module<T> for Relu<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = x.relu();
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.as_ref().ok_or(Error::MissingCache("relu"))?;
        y.zip_map(grad_out, |y, g| if y > T::zero() { g } else { T::zero() })
    }

    fn clear_cache(&mut self) {
        self.output = None;
    }
}

/// Learnable scalar gain `y = α·x`, the SkipInit multiplier at the end of a
/// residual branch (and Fixup's unit multiplier).
#[derive(Debug, Clone)]
pub struct ScalarMultiplier<T> {
    pub alpha: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> ScalarMultiplier<T> {
    pub fn new(alpha: f64) -> Self {
        Self { alpha: Param::new(Tensor::full(&[1], T::cast_f64(alpha)).expect("scalar")), input: None }
    }

    pub fn value(&self) -> T {
        self.alpha.value.data()[0]
    }

    pub fn set(&mut self, alpha: T) {
        self.alpha.value.data_mut()[0] = alpha;
    }
}

impl<T: Real> Module<T> for ScalarMultiplier<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        self.input = Some(x.clone());
        Ok(x.scale(self.value()))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or(Error::MissingCache("scalar_multiplier"))?;
        let d_alpha = grad_out.dot(x)?;
        self.alpha.grad.data_mut()[0] += T::cast_f64(d_alpha);
        Ok(grad_out.scale(self.value()))
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        vec![self.alpha.view("alpha", ParamKind::Multiplier)]
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }
}

/// Learnable scalar offset `y = x + b` (Fixup).
#[derive(Debug, Clone)]
pub struct ScalarBias<T> {
    pub bias: Param<T>,
    shape: Option<Vec<usize>>,
}

impl<T: Real> ScalarBias<T> {
    pub fn new() -> Self {
        Self { bias: Param::new(Tensor::zeros(&[1]).expect("scalar")), shape: None }
    }

    pub fn value(&self) -> T {
        self.bias.value.data()[0]
    }
}

impl<T: Real> Default for ScalarBias<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Module<T> for ScalarBias<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        self.shape = Some(x.shape().to_vec());
        let b = self.value();
        Ok(x.map(|v| v + b))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.shape.as_ref().ok_or(Error::MissingCache("scalar_bias"))?;
        if shape != grad_out.shape() {
            return Err(Error::Shape(format!("scalar bias grad {:?} vs {:?}", grad_out.shape(), shape)));
        }
        self.bias.grad.data_mut()[0] += T::cast_f64(grad_out.sum());
        Ok(grad_out.clone())
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        vec![self.bias.view("bias", ParamKind::ScalarBias)]
    }

    fn clear_cache(&mut self) {
        self.shape = None;
    }
}

/// Fixed, non-learnable gain (e.g. `1/√2` after a residual merge).
#[derive(Debug, Clone)]
pub struct ConstantScale<T> {
    pub factor: T,
    seen: bool,
}

impl<T: Real> ConstantScale<T> {
    pub fn new(factor: T) -> Self {
        Self { factor, seen: false }
    }
}

impl<T: Real> Module<T> for ConstantScale<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        self.seen = true;
        Ok(x.scale(self.factor))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.seen {
            return Err(Error::MissingCache("scale"));
        }
        Ok(grad_out.scale(self.factor))
    }

    fn clear_cache(&mut self) {
        self.seen = false;
    }
}

/// `N×H×W×C → N×C` spatial mean.
#[derive(Debug, Clone, Default)]
pub struct GlobalMeanPool {
    input_shape: Option<Vec<usize>>,
}

impl GlobalMeanPool {
    pub fn new() -> Self {
        Self { input_shape: None }
    }
}

impl<T: Real> Module<T> for GlobalMeanPool {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let [n, h, w, c] = *x.shape() else {
            return Err(Error::Shape(format!("global pool expects NHWC, got {:?}", x.shape())));
        };
        let mut out = vec![0.0f64; n * c];
        for (b, image) in x.data().chunks_exact(h * w * c).enumerate() {
            for px in image.chunks_exact(c) {
                for (o, v) in out[b * c..(b + 1) * c].iter_mut().zip(px) {
                    *o += v.as_f64();
                }
            }
        }
        let area = (h * w) as f64;
        self.input_shape = Some(x.shape().to_vec());
        Tensor::from_vec(&[n, c], out.into_iter().map(|s| T::cast_f64(s / area)).collect())
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.as_ref().ok_or(Error::MissingCache("global_mean_pool"))?;
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        if grad_out.shape() != [n, c] {
            return Err(Error::Shape(format!("pool grad {:?}, expected [{n}, {c}]", grad_out.shape())));
        }
        let scale = T::cast_f64(1.0 / (h * w) as f64);
        let mut dx = Vec::with_capacity(n * h * w * c);
        for g in grad_out.data().chunks_exact(c) {
            for _ in 0..h * w {
                dx.extend(g.iter().map(|&v| v * scale));
            }
        }
        Tensor::from_vec(shape, dx)
    }

    fn clear_cache(&mut self) {
        self.input_shape = None;
    }
}
