use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_or_fail, Dataset, GhostPolicy, RunResult, TrainConfig};
use crate::error::{Error, Result};
use crate::models::{BlockVariant, NetworkSpec};
use crate::tensor::Real;

/// Quantity a grid cell is ranked by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Final training loss, lower is better.
    TrainLoss,
    /// Final eval accuracy, higher is better.
    EvalAccuracy,
}

impl Metric {
    fn value(&self, run: &RunResult) -> Option<f64> {
        match self {
            Metric::TrainLoss => Some(run.final_loss()).filter(|v| v.is_finite()),
            Metric::EvalAccuracy => run.final_accuracy(),
        }
    }

    fn better(&self, a: f64, b: f64) -> bool {
        match self {
            Metric::TrainLoss => a < b,
            Metric::EvalAccuracy => a > b,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Metric::TrainLoss => "train-loss",
            Metric::EvalAccuracy => "eval-accuracy",
        }
    }
}

fn default_metric() -> Metric {
    Metric::TrainLoss
}

/// Learning rates `2^min_exp, 2^(min_exp+1), …, 2^max_exp`; every rate is
/// trained with seeds `base_seed + i` for `i < runs` and the best `keep`
/// finite runs of each rate are averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub min_exp: i32,
    pub max_exp: i32,
    pub runs: usize,
    pub keep: usize,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(default)]
    pub base_seed: u64,
    pub train: TrainConfig,
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_exp > self.max_exp {
            return Err(Error::InvalidArgument(format!(
                "empty learning-rate grid 2^{}..2^{}",
                self.min_exp, self.max_exp
            )));
        }
        if self.keep == 0 || self.keep > self.runs {
            return Err(Error::InvalidArgument(format!(
                "need 1 ≤ keep ≤ runs, got keep {} and runs {}",
                self.keep, self.runs
            )));
        }
        self.train.validate()
    }

    pub fn learning_rates(&self) -> Vec<f64> {
        (self.min_exp..=self.max_exp).map(|e| 2f64.powi(e)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub lr: f64,
    pub runs: Vec<RunResult>,
    pub finite_runs: usize,
    /// Mean of the kept runs; `None` when fewer than `keep` runs finished.
    pub mean: Option<f64>,
    /// Sample standard deviation of the kept runs (0 for a single run).
    pub std: Option<f64>,
}

impl GridCell {
    fn aggregate(lr: f64, runs: Vec<RunResult>, metric: Metric, keep: usize) -> Self {
        let mut values: Vec<f64> = runs.iter().filter_map(|r| metric.value(r)).collect();
        let finite_runs = values.len();
        let (mean, std) = if finite_runs < keep {
            (None, None)
        } else {
            values.sort_by(|a, b| match metric {
                Metric::TrainLoss => a.total_cmp(b),
                Metric::EvalAccuracy => b.total_cmp(a),
            });
            let kept = &values[..keep];
            let mean = kept.iter().sum::<f64>() / keep as f64;
            let std = if keep > 1 {
                (kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (keep - 1) as f64).sqrt()
            } else {
                0.0
            };
            (Some(mean), Some(std))
        };
        Self { lr, runs, finite_runs, mean, std }
    }

    pub fn failed(&self) -> bool {
        self.mean.is_none()
    }

    /// First note among the runs, if any.
    pub fn note(&self) -> Option<&str> {
        self.runs.iter().find_map(|r| r.note.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub metric: Metric,
    pub cells: Vec<GridCell>,
    /// Index of the best non-failed cell.
    pub best: Option<usize>,
}

impl GridResult {
    pub fn best_cell(&self) -> Option<&GridCell> {
        self.best.map(|i| &self.cells[i])
    }

    pub fn best_lr(&self) -> Option<f64> {
        self.best_cell().map(|c| c.lr)
    }

    /// Best aggregated metric. With every cell failed this is `+∞` for the
    /// loss and `None` for accuracy.
    pub fn best_value(&self) -> Option<f64> {
        match self.best_cell() {
            Some(c) => c.mean,
            None if self.metric == Metric::TrainLoss => Some(f64::INFINITY),
            None => None,
        }
    }

    /// True when the best rate sits at either end of the grid.
    pub fn on_boundary(&self) -> bool {
        matches!(self.best, Some(i) if i == 0 || i + 1 == self.cells.len())
    }
}

/// Trains every (rate, seed) pair of the grid and aggregates per rate.
pub fn lr_grid_search<T: Real>(spec: &NetworkSpec, data: &Dataset, cfg: &GridConfig) -> Result<GridResult> {
    cfg.validate()?;
    let lrs = cfg.learning_rates();
    let jobs: Vec<(usize, u64)> =
        (0..lrs.len()).flat_map(|i| (0..cfg.runs as u64).map(move |s| (i, cfg.base_seed + s))).collect();
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(i, seed)| run_or_fail::<T>(spec, data, lrs[i], seed, &cfg.train))
        .collect::<Result<_>>()?;
    let mut runs = runs.into_iter();
    let cells: Vec<GridCell> = lrs
        .iter()
        .map(|&lr| GridCell::aggregate(lr, runs.by_ref().take(cfg.runs).collect(), cfg.metric, cfg.keep))
        .collect();
    let mut best: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        if let Some(v) = c.mean {
            if best.map_or(true, |b| cfg.metric.better(v, cells[b].mean.unwrap_or(f64::NAN))) {
                best = Some(i);
            }
        }
    }
    Ok(GridResult { metric: cfg.metric, cells, best })
}

/// How a block variant is turned into a concrete network at a given depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub variant: BlockVariant,
    #[serde(default)]
    pub normalized: bool,
    #[serde(default)]
    pub final_bn_only: bool,
    /// Use `α/√d` instead of `α` for SkipInit at depth `d`.
    #[serde(default)]
    pub alpha_over_sqrt_depth: bool,
    #[serde(default)]
    pub dropout: Option<f64>,
    /// Overrides the generated label.
    #[serde(default)]
    pub name: Option<String>,
}

impl VariantSpec {
    pub fn new(variant: BlockVariant) -> Self {
        Self { variant, normalized: false, final_bn_only: false, alpha_over_sqrt_depth: false, dropout: None, name: None }
    }

    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let mut s = match self.variant {
            BlockVariant::SkipInit { alpha } if self.alpha_over_sqrt_depth => format!("skipinit({alpha}/sqrt-d)"),
            v => v.label(),
        };
        if self.final_bn_only {
            s.push_str("+final-bn");
        }
        if let Some(p) = self.dropout {
            s.push_str(&format!("+dropout({p})"));
        }
        s
    }

    pub fn apply(&self, base: &NetworkSpec, depth: usize) -> NetworkSpec {
        let mut spec = base.clone();
        spec.depth = depth;
        spec.normalized = self.normalized;
        spec.final_bn_only = self.final_bn_only;
        if let Some(p) = self.dropout {
            spec.dropout = p;
        }
        spec.variant = match self.variant {
            BlockVariant::SkipInit { alpha } if self.alpha_over_sqrt_depth => {
                BlockVariant::SkipInit { alpha: alpha / (depth as f64).sqrt() }
            }
            v => v,
        };
        spec
    }
}

/// Parses the labels produced by [`VariantSpec::label`], e.g.
/// `skipinit(1/sqrt-d)`, `bn-branch+dropout(0.2)`, `no-norm+final-bn`.
impl std::str::FromStr for VariantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split('+');
        let base = parts.next().unwrap_or_default();
        let mut spec = match base.strip_suffix("/sqrt-d)").and_then(|b| b.strip_prefix("skipinit(")) {
            Some(alpha) => {
                let mut v = VariantSpec::new(format!("skipinit({alpha})").parse()?);
                v.alpha_over_sqrt_depth = true;
                v
            }
            None => match base.strip_suffix("/sqrt-d").and_then(|b| b.strip_prefix("skipinit:")) {
                Some(alpha) => {
                    let mut v = VariantSpec::new(format!("skipinit:{alpha}").parse()?);
                    v.alpha_over_sqrt_depth = true;
                    v
                }
                None => VariantSpec::new(base.parse()?),
            },
        };
        for part in parts {
            if part == "final-bn" {
                spec.final_bn_only = true;
            } else if let Some(p) = part.strip_prefix("dropout(").and_then(|r| r.strip_suffix(')')) {
                spec.dropout =
                    Some(p.parse().map_err(|_| Error::InvalidArgument(format!("bad dropout rate `{p}`")))?);
            } else {
                return Err(Error::InvalidArgument(format!("unknown variant modifier `{part}`")));
            }
        }
        Ok(spec)
    }
}

/// One (variant, depth, batch size) point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub variant: String,
    pub depth: usize,
    pub batch_size: usize,
    pub ghost: GhostPolicy,
    pub grid: GridResult,
    pub note: Option<String>,
}

/// Grid search for every variant at every depth.
pub fn depth_sweep<T: Real>(
    base: &NetworkSpec,
    depths: &[usize],
    variants: &[VariantSpec],
    data: &Dataset,
    cfg: &GridConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(depths.len() * variants.len());
    for v in variants {
        for &d in depths {
            let spec = v.apply(base, d);
            spec.validate()?;
            let grid = lr_grid_search::<T>(&spec, data, cfg)?;
            let note = grid.cells.iter().find_map(|c| c.note().map(String::from));
            rows.push(SweepRow {
                variant: v.label(),
                depth: d,
                batch_size: cfg.train.batch_size,
                ghost: cfg.train.ghost,
                grid,
                note,
            });
        }
    }
    Ok(rows)
}

/// Grid search for every variant at every batch size, at `base.depth`.
pub fn batch_sweep<T: Real>(
    base: &NetworkSpec,
    batch_sizes: &[usize],
    variants: &[VariantSpec],
    data: &Dataset,
    cfg: &GridConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(batch_sizes.len() * variants.len());
    for v in variants {
        let spec = v.apply(base, base.depth);
        spec.validate()?;
        for &b in batch_sizes {
            let mut cfg = cfg.clone();
            cfg.train.batch_size = b;
            let grid = lr_grid_search::<T>(&spec, data, &cfg)?;
            let mut note = grid.cells.iter().find_map(|c| c.note().map(String::from));
            let sub = cfg.train.ghost.sub_batch(b)?;
            if note.is_none() && sub == 1 && spec.family == crate::models::Family::ConvRelu && has_bn(&spec) {
                note = Some("single-example BN groups normalize per image (instance normalization)".into());
            }
            rows.push(SweepRow { variant: v.label(), depth: spec.depth, batch_size: b, ghost: cfg.train.ghost, grid, note });
        }
    }
    Ok(rows)
}

fn has_bn(spec: &NetworkSpec) -> bool {
    spec.branch_bn() || spec.final_bn_only || spec.variant == BlockVariant::BnBranchAndBnSkip
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ClassifierSpec, Family};
    use crate::trainer::{make_dataset, DatasetKind};

    fn fake(seed: u64, final_loss: f64, diverged: bool) -> RunResult {
        RunResult {
            seed,
            lr: 1.0,
            initial_loss: 1.0,
            train_loss: vec![final_loss],
            eval_accuracy: vec![1.0 / (1.0 + final_loss)],
            diverged,
            note: None,
        }
    }

    #[test]
    fn best_k_mean_and_sample_std() {
        let runs = vec![fake(0, 3.0, false), fake(1, 1.0, false), fake(2, 2.0, false), fake(3, 0.5, true)];
        let c = GridCell::aggregate(1.0, runs.clone(), Metric::TrainLoss, 2);
        assert_eq!(c.finite_runs, 3);
        assert_eq!(c.mean, Some(1.5));
        assert!((c.std.unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        let all = GridCell::aggregate(1.0, runs.clone(), Metric::TrainLoss, 3);
        assert_eq!(all.mean, Some(2.0));
        let one = GridCell::aggregate(1.0, runs.clone(), Metric::TrainLoss, 1);
        assert_eq!((one.mean, one.std), (Some(1.0), Some(0.0)));
        let acc = GridCell::aggregate(1.0, runs, Metric::EvalAccuracy, 1);
        assert_eq!(acc.mean, Some(0.5));
    }

    #[test]
    fn too_few_finite_runs_fail_the_cell() {
        let runs = vec![fake(0, 1.0, true), fake(1, 1.0, false)];
        let c = GridCell::aggregate(1.0, runs, Metric::TrainLoss, 2);
        assert!(c.failed());
        let g = GridResult { metric: Metric::TrainLoss, cells: vec![c], best: None };
        assert_eq!(g.best_value(), Some(f64::INFINITY));
    }

    #[test]
    fn grid_validation() {
        let mut cfg = GridConfig {
            min_exp: 0,
            max_exp: -1,
            runs: 2,
            keep: 1,
            metric: Metric::TrainLoss,
            base_seed: 0,
            train: TrainConfig::new(1, 8),
        };
        assert!(cfg.validate().is_err());
        cfg.max_exp = 2;
        assert_eq!(cfg.learning_rates(), vec![1.0, 2.0, 4.0]);
        cfg.keep = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grid_picks_trainable_rate_and_flags_boundary() {
        let data = make_dataset(
            &DatasetKind::GaussianBlobs { classes: 2, dim: 4, train: 64, eval: 32, separation: 3.0 },
            1,
        )
        .unwrap();
        let mut spec = NetworkSpec::new(Family::FcRelu, 8, 2, BlockVariant::SkipInit { alpha: 0.0 }, vec![4]);
        spec.classifier = Some(ClassifierSpec { classes: 2, global_pool: false });
        let cfg = GridConfig {
            min_exp: -6,
            max_exp: 12,
            runs: 2,
            keep: 1,
            metric: Metric::TrainLoss,
            base_seed: 10,
            train: TrainConfig::new(3, 16),
        };
        let g = lr_grid_search::<f32>(&spec, &data, &cfg).unwrap();
        assert_eq!(g.cells.len(), 19);
        assert!(g.cells.last().unwrap().failed());
        let best = g.best.unwrap();
        assert!(best < 18);
        assert!(g.cells.iter().all(|c| c.runs.iter().map(|r| r.seed).eq([10, 11])));
        let again = lr_grid_search::<f32>(&spec, &data, &cfg).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn fc_batch_of_one_with_bn_is_a_noted_failure() {
        let data = make_dataset(
            &DatasetKind::GaussianBlobs { classes: 2, dim: 4, train: 16, eval: 8, separation: 3.0 },
            1,
        )
        .unwrap();
        let mut spec = NetworkSpec::new(Family::FcRelu, 8, 2, BlockVariant::BnBranch, vec![4]);
        spec.classifier = Some(ClassifierSpec { classes: 2, global_pool: false });
        let cfg = GridConfig {
            min_exp: -2,
            max_exp: -2,
            runs: 1,
            keep: 1,
            metric: Metric::TrainLoss,
            base_seed: 0,
            train: TrainConfig::new(1, 1),
        };
        let rows = batch_sweep::<f64>(&spec, &[1, 4], &[VariantSpec::new(BlockVariant::BnBranch)], &data, &cfg).unwrap();
        assert!(rows[0].grid.cells[0].failed());
        assert!(rows[0].note.as_deref().unwrap().contains("degenerate"));
        assert!(!rows[1].grid.cells[0].failed());
    }

    #[test]
    fn alpha_over_sqrt_depth_label_and_value() {
        let mut v = VariantSpec::new(BlockVariant::SkipInit { alpha: 1.0 });
        v.alpha_over_sqrt_depth = true;
        let base = NetworkSpec::new(Family::FcRelu, 8, 1, BlockVariant::BnBranch, vec![4]);
        assert_eq!(v.apply(&base, 16).variant, BlockVariant::SkipInit { alpha: 0.25 });
        assert_eq!(v.label(), "skipinit(1/sqrt-d)");
    }

    #[test]
    fn variant_spec_labels_parse_back() {
        for label in ["skipinit(0)", "skipinit(1/sqrt-d)", "bn-branch+dropout(0.2)", "no-norm+final-bn", "fixup"] {
            assert_eq!(label.parse::<VariantSpec>().unwrap().label(), label);
        }
        assert!("skipinit:1/sqrt-d".parse::<VariantSpec>().unwrap().alpha_over_sqrt_depth);
        assert!("bn-branch+wide".parse::<VariantSpec>().is_err());
    }
}
