use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamMut;
use crate::tensor::{Real, Tensor};

/// Heavy-ball SGD: `v ← m·v + g`, `w ← w − η·v`.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self { momentum, velocity: Vec::new() })
    }

    /// One update of every parameter with its accumulated gradient. A
    /// non-finite gradient aborts before anything is written.
    pub fn step(&mut self, params: Vec<ParamMut<'_, T>>, lr: f64) -> Result<()> {
        if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} is not finite", p.name)));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| p.grad.zeros_like()).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let m = T::cast_f64(self.momentum);
        let eta = T::cast_f64(lr);
        for (p, v) in params.into_iter().zip(self.velocity.iter_mut()) {
            p.grad.expect_same_shape(v, "velocity")?;
            for ((w, g), vel) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
                *vel = m * *vel + *g;
                *w -= eta * *vel;
            }
        }
        Ok(())
    }
}

/// Step decay: constant for `constant_epochs`, then divided by `factor` at
/// the start of every `interval` epochs from there on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub constant_epochs: usize,
    #[serde(default = "two")]
    pub factor: f64,
    /// `None` keeps the rate constant forever.
    #[serde(default)]
    pub interval: Option<usize>,
}

fn two() -> f64 {
    2.0
}

impl Schedule {
    pub fn constant() -> Self {
        Self { constant_epochs: 0, factor: 2.0, interval: None }
    }

    pub fn step_decay(constant_epochs: usize, interval: usize) -> Self {
        Self { constant_epochs, factor: 2.0, interval: Some(interval) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval == Some(0) {
            return Err(Error::InvalidArgument("decay interval must be positive".into()));
        }
        if !(self.factor >= 1.0) {
            return Err(Error::InvalidArgument(format!("decay factor {} must be at least 1", self.factor)));
        }
        Ok(())
    }
}

/// Learning rate at `epoch` (0-based). The first decay happens at epoch
/// `constant_epochs` itself.
pub fn schedule_lr(schedule: &Schedule, base_lr: f64, epoch: usize) -> f64 {
    match schedule.interval {
        Some(interval) if epoch >= schedule.constant_epochs => {
            let drops = (epoch - schedule.constant_epochs) / interval + 1;
            base_lr / schedule.factor.powi(drops as i32)
        }
        _ => base_lr,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Param, ParamKind};

    fn quadratic_steps(momentum: f64, lr: f64, steps: usize) -> Vec<f64> {
        let mut w = Param::new(Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap());
        let mut opt = OptimizerState::new(momentum).unwrap();
        let mut out = Vec::new();
        for _ in 0..steps {
            w.grad = w.value.clone();
            opt.step(vec![w.view("w", ParamKind::Weight)], lr).unwrap();
            out.push(w.value.data()[0]);
        }
        out
    }

    #[test]
    fn heavy_ball_hand_iteration() {
        let w = quadratic_steps(0.9, 0.1, 2);
        assert!((w[0] - 0.9).abs() < 1e-15);
        assert!((w[1] - 0.72).abs() < 1e-15);
        let plain = quadratic_steps(0.0, 0.1, 3);
        assert!((plain[2] - 0.9f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_weights() {
        let mut w = Param::new(Tensor::<f64>::from_f64(&[2], &[1.5, -2.0]).unwrap());
        let mut opt = OptimizerState::new(0.9).unwrap();
        for _ in 0..10 {
            opt.step(vec![w.view("w", ParamKind::Weight)], 0.3).unwrap();
        }
        assert_eq!(w.value.data(), &[1.5, -2.0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut w = Param::new(Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap());
        w.grad.data_mut()[0] = f64::NAN;
        let mut opt = OptimizerState::new(0.9).unwrap();
        assert!(matches!(opt.step(vec![w.view("w", ParamKind::Weight)], 0.1), Err(Error::NonFinite(_))));
        assert_eq!(w.value.data()[0], 1.0);
        assert!(OptimizerState::<f64>::new(1.0).is_err());
    }

    #[test]
    fn schedules() {
        let long = Schedule::step_decay(100, 10);
        assert_eq!(schedule_lr(&long, 1.0, 99), 1.0);
        assert_eq!(schedule_lr(&long, 1.0, 100), 0.5);
        assert_eq!(schedule_lr(&long, 1.0, 119), 0.25);
        let desk = Schedule::step_decay(20, 5);
        assert_eq!(schedule_lr(&desk, 1.0, 34), 0.125);
        assert_eq!(schedule_lr(&Schedule::constant(), 0.3, 1000), 0.3);
        assert!(Schedule::step_decay(1, 0).validate().is_err());
    }
}
