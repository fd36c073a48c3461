//! JSON run configuration. Every key is optional in the file; command-line
//! flags are parsed into the same struct and laid over the file values.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use resprop::init::InitOverride;
use resprop::models::{BlockVariant, Family, NetworkSpec};
use resprop::trainer::{DatasetKind, GhostPolicy, GridConfig, Metric, Schedule, TrainConfig, VariantSpec};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Analyze,
    Train,
    SweepDepth,
    SweepBatch,
    Gradcheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

macro_rules! run_config {
    ($($(#[$doc:meta])* $field:ident: $ty:ty,)*) => {
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct RunConfig {
            $(
                $(#[$doc])*
                #[serde(skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
        }

        impl RunConfig {
            /// `self` with every field set in `over` replaced.
            pub fn overlay(self, over: RunConfig) -> RunConfig {
                RunConfig { $($field: over.$field.or(self.$field),)* }
            }
        }
    };
}

run_config! {
    /// Subcommand the file is meant for; must match the one invoked.
    command: CommandKind,
    family: Family,
    width: usize,
    depth: usize,
    /// Variant label such as `bn-branch`, `skipinit(0.25)`, `fixup`.
    variant: String,
    /// Defaults to true when no variant is given, false otherwise.
    normalized: bool,
    final_bn_only: bool,
    dropout: f64,
    branch_layers: usize,
    biases: bool,
    kernel_size: usize,
    /// Per-example input shape for `analyze`; training takes it from the data.
    input: Vec<usize>,
    init: InitOverride,
    /// Examples per statistics batch.
    batch: usize,
    /// Number of seeds (`seed`, `seed + 1`, ...) averaged by `analyze`.
    seeds: usize,
    dataset: DatasetKind,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    momentum: f64,
    l2: f64,
    l2_weights_only: bool,
    schedule: Schedule,
    ghost: GhostPolicy,
    lr_min_exp: i32,
    lr_max_exp: i32,
    runs: usize,
    keep: usize,
    metric: Metric,
    depths: Vec<usize>,
    batch_sizes: Vec<usize>,
    /// Variant labels for sweeps, e.g. `skipinit(1/sqrt-d)` or `bn-branch+final-bn`.
    variants: Vec<String>,
    seed: u64,
    precision: Precision,
    out: PathBuf,
}

pub const DEFAULT_WIDTH: usize = 128;
pub const DEFAULT_BATCH: usize = 256;

pub fn default_dataset() -> DatasetKind {
    DatasetKind::GaussianBlobs { classes: 10, dim: 32, train: 512, eval: 256, separation: 1.0 }
}

fn missing(key: &str) -> CliError {
    CliError::Validation(format!("missing required setting `{key}` (pass --{} or set it in --config)", key.replace('_', "-")))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("invalid config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run configs always serialize")
    }

    pub fn check_command(&self, invoked: CommandKind) -> Result<(), CliError> {
        match self.command {
            Some(c) if c != invoked => Err(CliError::Validation(format!(
                "config is for `{}`, but `{}` was invoked",
                serde_json::to_value(c).unwrap().as_str().unwrap_or_default(),
                serde_json::to_value(invoked).unwrap().as_str().unwrap_or_default()
            ))),
            _ => Ok(()),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn precision(&self) -> Precision {
        self.precision.unwrap_or(Precision::F32)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn block_variant(&self) -> Result<BlockVariant, CliError> {
        match &self.variant {
            Some(v) => Ok(v.parse()?),
            None if self.normalized.unwrap_or(true) => Ok(BlockVariant::BnBranch),
            None => Ok(BlockVariant::NoNorm),
        }
    }

    /// Network at `depth` (the `depth` key when `None`).
    pub fn network_spec(&self, depth: Option<usize>) -> Result<NetworkSpec, CliError> {
        let family = self.family.ok_or_else(|| missing("family"))?;
        let depth = depth.or(self.depth).ok_or_else(|| missing("depth"))?;
        let width = self.width.unwrap_or(DEFAULT_WIDTH);
        let input = match (&self.input, family) {
            (Some(i), _) => i.clone(),
            (None, Family::ConvRelu) => vec![32, 32, 3],
            (None, _) => vec![width],
        };
        let mut spec = NetworkSpec::new(family, width, depth, self.block_variant()?, input);
        spec.normalized = self.normalized.unwrap_or(self.variant.is_none());
        spec.final_bn_only = self.final_bn_only.unwrap_or(false);
        spec.dropout = self.dropout.unwrap_or(0.0);
        spec.branch_layers = self.branch_layers.unwrap_or(1);
        spec.biases = self.biases.unwrap_or(false);
        spec.kernel_size = self.kernel_size.unwrap_or(3);
        spec.init = self.init;
        Ok(spec)
    }

    pub fn dataset(&self) -> DatasetKind {
        self.dataset.clone().unwrap_or_else(default_dataset)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = TrainConfig::new(self.epochs.unwrap_or(10), self.batch_size.unwrap_or(32));
        if let Some(m) = self.momentum {
            cfg.momentum = m;
        }
        if let Some(l2) = self.l2 {
            cfg.l2 = l2;
        }
        if let Some(w) = self.l2_weights_only {
            cfg.l2_weights_only = w;
        }
        if let Some(s) = self.schedule {
            cfg.schedule = s;
        }
        if let Some(g) = self.ghost {
            cfg.ghost = g;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grid_config(&self) -> Result<GridConfig, CliError> {
        let cfg = GridConfig {
            min_exp: self.lr_min_exp.unwrap_or(-10),
            max_exp: self.lr_max_exp.unwrap_or(0),
            runs: self.runs.unwrap_or(7),
            keep: self.keep.unwrap_or(5),
            metric: self.metric.unwrap_or(Metric::TrainLoss),
            base_seed: self.seed(),
            train: self.train_config()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sweep variants; a single-element list built from `variant` otherwise.
    pub fn variant_specs(&self) -> Result<Vec<VariantSpec>, CliError> {
        let make = |label: &str| -> Result<VariantSpec, CliError> {
            let mut v: VariantSpec = label.parse()?;
            v.normalized = self.normalized.unwrap_or(false);
            if v.dropout.is_none() {
                v.dropout = self.dropout;
            }
            v.final_bn_only |= self.final_bn_only.unwrap_or(false);
            Ok(v)
        };
        match &self.variants {
            Some(list) if list.is_empty() => Err(CliError::Validation("`variants` is empty".into())),
            Some(list) => list.iter().map(|l| make(l)).collect(),
            None => {
                let mut v = VariantSpec::new(self.block_variant()?);
                v.normalized = self.normalized.unwrap_or(self.variant.is_none());
                v.final_bn_only = self.final_bn_only.unwrap_or(false);
                v.dropout = self.dropout;
                Ok(vec![v])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"family": "fc-relu", "widht": 3}"#).is_err());
    }

    #[test]
    fn full_config_round_trips() {
        let text = r#"{
            "command": "sweep-depth",
            "family": "fc-relu",
            "width": 64,
            "variants": ["skipinit(0)", "skipinit(1/sqrt-d)"],
            "depths": [8, 64],
            "dataset": {"kind": "gaussian-blobs", "classes": 10, "dim": 32, "train": 512, "eval": 256, "separation": 1.0},
            "schedule": {"constant_epochs": 20, "factor": 2.0, "interval": 5},
            "ghost": {"kind": "fixed", "size": 8},
            "init": {"scheme": {"kind": "he"}, "applies_to": "branch-final"},
            "metric": "eval-accuracy",
            "precision": "f64",
            "seed": 3,
            "out": "results"
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        let again: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        let original: serde_json::Value = serde_json::from_str(text).unwrap();
        assert_eq!(again, original);
    }

    #[test]
    fn flags_override_file_values() {
        let file = RunConfig { width: Some(8), depth: Some(3), ..Default::default() };
        let flags = RunConfig { depth: Some(5), ..Default::default() };
        let merged = file.overlay(flags);
        assert_eq!((merged.width, merged.depth), (Some(8), Some(5)));
    }

    #[test]
    fn default_variant_follows_normalized() {
        let mut cfg = RunConfig { family: Some(Family::FcLinear), depth: Some(4), ..Default::default() };
        assert_eq!(cfg.network_spec(None).unwrap().variant, BlockVariant::BnBranch);
        cfg.normalized = Some(false);
        assert_eq!(cfg.network_spec(None).unwrap().variant, BlockVariant::NoNorm);
        cfg.family = None;
        assert!(matches!(cfg.network_spec(None), Err(CliError::Validation(_))));
    }

    #[test]
    fn command_mismatch_is_a_validation_error() {
        let cfg = RunConfig { command: Some(CommandKind::Train), ..Default::default() };
        assert!(cfg.check_command(CommandKind::Train).is_ok());
        assert!(cfg.check_command(CommandKind::Analyze).is_err());
    }
}
