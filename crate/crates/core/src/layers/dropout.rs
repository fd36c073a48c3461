use super::{Mode, Module};
use crate::error::{Error, Result};
use crate::tensor::{Real, Rng, Tensor};

/// Inverted dropout: surviving activations are divided by `1 − p` in train
/// mode, and eval mode is the identity.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    p: f64,
    rng: Rng,
    /// Reuse the previous mask instead of drawing a new one (gradient checks).
    pub freeze_mask: bool,
    mask: Option<Tensor<T>>,
    train_pass: Option<bool>,
}

impl<T: Real> Dropout<T> {
    pub fn new(p: f64, rng: Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("drop probability {p} outside [0, 1)")));
        }
        Ok(Self { p, rng, freeze_mask: false, mask: None, train_pass: None })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn reseed(&mut self, rng: Rng) {
        self.rng = rng;
        self.mask = None;
    }
}

impl<T: Real> Module<T> for Dropout<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Eval || self.p == 0.0 {
            self.train_pass = Some(false);
            return Ok(x.clone());
        }
        let reuse = self.freeze_mask && self.mask.as_ref().is_some_and(|m| m.shape() == x.shape());
        if !reuse {
            let keep = T::cast_f64(1.0 / (1.0 - self.p));
            let p = self.p;
            let rng = &mut self.rng;
            let mask: Vec<T> = (0..x.len())
                .map(|_| if rng.uniform() >= p { keep } else { T::zero() })
                .collect();
            self.mask = Some(Tensor::from_vec(x.shape(), mask)?);
        }
        self.train_pass = Some(true);
        x.zip_map(self.mask.as_ref().expect("mask drawn above"), |v, m| v * m)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        match self.train_pass {
            None => Err(Error::MissingCache("dropout")),
            Some(false) => Ok(grad_out.clone()),
            Some(true) => {
                let mask = self.mask.as_ref().ok_or(Error::MissingCache("dropout"))?;
                grad_out.zip_map(mask, |g, m| g * m)
            }
        }
    }

    fn clear_cache(&mut self) {
        self.train_pass = None;
        if !self.freeze_mask {
            self.mask = None;
        }
    }
}
