//! SGD training runs, learning-rate grids and depth / batch-size sweeps.

mod data;
mod grid;
mod optim;
mod report;

pub use data::{make_dataset, read_cifar, read_idx, Dataset, DatasetKind, Split};
pub use grid::{
    batch_sweep, depth_sweep, lr_grid_search, GridCell, GridConfig, GridResult, Metric, SweepRow, VariantSpec,
};
pub use optim::{schedule_lr, OptimizerState, Schedule};
pub use report::{write_grid_csv, write_run_csv, write_runs_csv, write_summary_csv};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{l2_penalty, softmax_xent, GhostSize, Mode, ParamMut};
use crate::models::{build_classifier, Family, NetworkSpec};
use crate::network::Network;
use crate::tensor::{Real, Rng, Tensor};

/// How BN statistics relate to the optimization batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GhostPolicy {
    /// Gradients of `size`-example sub-batches are accumulated into one
    /// step; each BN normalizes over its own sub-batch.
    Fixed { size: usize },
    /// One pass over the whole batch; BN statistics span all of it.
    FullBatch,
}

impl GhostPolicy {
    /// Sub-batch size used for a given optimization batch.
    pub fn sub_batch(&self, batch: usize) -> Result<usize> {
        match *self {
            GhostPolicy::FullBatch => Ok(batch),
            GhostPolicy::Fixed { size: 0 } => Err(Error::InvalidArgument("ghost size must be positive".into())),
            GhostPolicy::Fixed { size } => {
                let g = size.min(batch);
                if batch % g != 0 {
                    return Err(Error::InvalidArgument(format!("batch {batch} is not a multiple of ghost size {g}")));
                }
                Ok(g)
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            GhostPolicy::Fixed { size } => format!("ghost-{size}"),
            GhostPolicy::FullBatch => "full-batch".into(),
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_l2() -> f64 {
    5e-4
}

fn default_true() -> bool {
    true
}

fn default_ghost() -> GhostPolicy {
    GhostPolicy::FullBatch
}

fn default_schedule() -> Schedule {
    Schedule::constant()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_ghost")]
    pub ghost: GhostPolicy,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// L2 coefficient on weight tensors.
    #[serde(default = "default_l2")]
    pub l2: f64,
    /// Restrict L2 to weight tensors; otherwise every parameter is decayed.
    #[serde(default = "default_true")]
    pub l2_weights_only: bool,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize) -> Self {
        Self {
            epochs,
            batch_size,
            ghost: default_ghost(),
            momentum: default_momentum(),
            l2: default_l2(),
            l2_weights_only: true,
            schedule: default_schedule(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::InvalidArgument(format!("l2 coefficient {} must be ≥ 0", self.l2)));
        }
        self.schedule.validate()?;
        self.ghost.sub_batch(self.batch_size)?;
        Ok(())
    }
}

/// One training run. Per-epoch loss is the full training-set cross-entropy
/// (no L2 term) evaluated in eval mode after the epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub lr: f64,
    pub initial_loss: f64,
    pub train_loss: Vec<f64>,
    pub eval_accuracy: Vec<f64>,
    pub diverged: bool,
    /// Why the run could not train at all (e.g. degenerate BN batches).
    pub note: Option<String>,
}

impl RunResult {
    fn failed(seed: u64, lr: f64, note: String) -> Self {
        Self {
            seed,
            lr,
            initial_loss: f64::NAN,
            train_loss: Vec::new(),
            eval_accuracy: Vec::new(),
            diverged: true,
            note: Some(note),
        }
    }

    /// Final training loss, `+∞` for a diverged run.
    pub fn final_loss(&self) -> f64 {
        match self.train_loss.last() {
            Some(&l) if !self.diverged => l,
            _ => f64::INFINITY,
        }
    }

    /// Final eval accuracy, `None` for a diverged run.
    pub fn final_accuracy(&self) -> Option<f64> {
        if self.diverged {
            None
        } else {
            self.eval_accuracy.last().copied()
        }
    }
}

/// Copy of `spec` whose input shape and readout match `data`.
pub fn fit_spec_to_data(spec: &NetworkSpec, data: &Dataset) -> Result<(NetworkSpec, Dataset)> {
    let data = match spec.family {
        Family::ConvRelu => {
            if data.feature_shape.len() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "conv networks need image data, got feature shape {:?}",
                    data.feature_shape
                )));
            }
            data.clone()
        }
        _ => data.flattened()?,
    };
    let mut spec = spec.clone();
    spec.input = data.feature_shape.clone();
    Ok((spec, data))
}

struct Batches<T> {
    x: Tensor<T>,
    y: Vec<usize>,
}

/// Mean loss and accuracy over `x` in eval mode, 256 examples at a time.
fn evaluate<T: Real>(net: &mut Network<T>, split: &Batches<T>) -> Result<(f64, f64)> {
    let n = split.y.len();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for start in (0..n).step_by(256) {
        let end = (start + 256).min(n);
        let xb = split.x.slice_batch(start, end)?;
        let logits = net.forward_probed(&xb, Mode::Eval, false, &mut |_| {})?;
        let labels = &split.y[start..end];
        let (l, _) = softmax_xent(&logits, labels)?;
        loss += l * (end - start) as f64;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
            let best = (0..k).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal));
            correct += usize::from(best == Some(label));
        }
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// Accumulates the gradient of one optimization batch through ghost
/// sub-batches of size `g`, returning the batch's mean loss.
fn accumulate_batch<T: Real>(net: &mut Network<T>, x: &Tensor<T>, y: &[usize], g: usize) -> Result<f64> {
    let b = y.len();
    let weight = g as f64 / b as f64;
    let mut loss = 0.0;
    for start in (0..b).step_by(g) {
        let xs = x.slice_batch(start, start + g)?;
        let logits = net.forward(&xs, Mode::Train)?;
        let (l, grad) = softmax_xent(&logits, &y[start..start + g])?;
        net.backward(&grad.scale(T::cast_f64(weight)))?;
        loss += l * weight;
    }
    net.clear_cache();
    Ok(loss)
}

/// Trains a freshly built classifier with seed `seed`. The network draw,
/// the per-epoch shuffles and dropout masks all derive from the seed.
pub fn run_training<T: Real>(
    spec: &NetworkSpec,
    data: &Dataset,
    lr: f64,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<RunResult> {
    cfg.validate()?;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be finite and ≥ 0")));
    }
    let (spec, data) = fit_spec_to_data(spec, data)?;
    let n = data.train.len();
    if cfg.batch_size > n {
        return Err(Error::InvalidArgument(format!("batch_size {} exceeds {n} training examples", cfg.batch_size)));
    }
    let g = cfg.ghost.sub_batch(cfg.batch_size)?;
    let rng = Rng::new(seed);
    let mut net = build_classifier::<T>(&spec, data.classes, &mut rng.substream(0))?;
    net.set_ghost(GhostSize::Full);
    let mut shuffle = rng.substream(1);
    let train = Batches { x: data.train.x.cast::<T>(), y: data.train.y.clone() };
    let eval = Batches { x: data.eval.x.cast::<T>(), y: data.eval.y.clone() };
    let mut opt = OptimizerState::<T>::new(cfg.momentum)?;

    let (initial_loss, _) = evaluate(&mut net, &train)?;
    let mut result = RunResult {
        seed,
        lr,
        initial_loss,
        train_loss: Vec::with_capacity(cfg.epochs),
        eval_accuracy: Vec::with_capacity(cfg.epochs),
        diverged: !initial_loss.is_finite(),
        note: None,
    };
    if result.diverged {
        return Ok(result);
    }
    for epoch in 0..cfg.epochs {
        let eta = schedule_lr(&cfg.schedule, lr, epoch);
        let order = shuffle.permutation(n);
        for idx in order.chunks_exact(cfg.batch_size) {
            let xb = train.x.gather_batch(idx)?;
            let yb: Vec<usize> = idx.iter().map(|&i| train.y[i]).collect();
            net.zero_grad();
            let loss = accumulate_batch(&mut net, &xb, &yb, g)?;
            if !loss.is_finite() {
                result.diverged = true;
                return Ok(result);
            }
            if cfg.l2_weights_only {
                l2_penalty(net.params_mut(), cfg.l2);
            } else {
                decay_all(net.params_mut(), cfg.l2);
            }
            match opt.step(net.params_mut(), eta) {
                Ok(()) => {}
                Err(Error::NonFinite(_)) => {
                    result.diverged = true;
                    return Ok(result);
                }
                Err(e) => return Err(e),
            }
        }
        let (loss, _) = evaluate(&mut net, &train)?;
        let (_, acc) = evaluate(&mut net, &eval)?;
        if !loss.is_finite() {
            result.diverged = true;
            return Ok(result);
        }
        result.train_loss.push(loss);
        result.eval_accuracy.push(acc);
    }
    Ok(result)
}

fn decay_all<T: Real>(params: Vec<ParamMut<'_, T>>, coefficient: f64) {
    let c = T::cast_f64(coefficient);
    for p in params {
        for (g, &w) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
            *g += c * w;
        }
    }
}

/// Runs training, turning a degenerate-batch error into a failed run.
pub(crate) fn run_or_fail<T: Real>(
    spec: &NetworkSpec,
    data: &Dataset,
    lr: f64,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<RunResult> {
    match run_training::<T>(spec, data, lr, seed, cfg) {
        Err(Error::DegenerateBatch(msg)) => Ok(RunResult::failed(seed, lr, format!("degenerate batch: {msg}"))),
        other => other,
    }
}

/// Euclidean norm of the full parameter gradient of the cross-entropy on the
/// first `batch` training examples, for the network built from `seed`.
pub fn init_gradient_norm<T: Real>(spec: &NetworkSpec, data: &Dataset, batch: usize, seed: u64) -> Result<f64> {
    let (spec, data) = fit_spec_to_data(spec, data)?;
    let mut net = build_classifier::<T>(&spec, data.classes, &mut Rng::new(seed).substream(0))?;
    let batch = batch.min(data.train.len());
    let x = data.train.x.slice_batch(0, batch)?.cast::<T>();
    let logits = net.forward(&x, Mode::Train)?;
    let (_, grad) = softmax_xent(&logits, &data.train.y[..batch])?;
    net.zero_grad();
    net.backward(&grad)?;
    Ok(net.params_mut().iter().map(|p| p.grad.data().iter().map(|g| g.as_f64().powi(2)).sum::<f64>()).sum::<f64>().sqrt())
}
