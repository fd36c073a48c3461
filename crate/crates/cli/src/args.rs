use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use resprop::models::Family;
use resprop::trainer::{GhostPolicy, Metric};

use crate::config::{CommandKind, Precision, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "resprop", version, about = "Signal propagation and trainability experiments for residual networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Measure per-block variances of a freshly initialized network.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        net: NetFlags,
        /// Examples per statistics batch.
        #[arg(long)]
        batch: Option<usize>,
        /// Number of consecutive seeds to average.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Train one seeded run and write its loss trajectory.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        net: NetFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Learning-rate grid search at several depths.
    SweepDepth {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        net: NetFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        grid: GridFlags,
        #[arg(long, value_delimiter = ',')]
        depths: Option<Vec<usize>>,
    },
    /// Learning-rate grid search at several batch sizes.
    SweepBatch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        net: NetFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        grid: GridFlags,
        #[arg(long, value_delimiter = ',')]
        batch_sizes: Option<Vec<usize>>,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Add a layer with a deliberately wrong backward pass.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Output directory for CSV artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NetFlags {
    #[arg(long, value_parser = parse_family)]
    pub family: Option<Family>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Block variant, e.g. `bn-branch`, `skipinit(0)`, `divide-by-sqrt2`.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub normalized: Option<bool>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub final_bn_only: Option<bool>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Per-example input shape, e.g. `32,32,3`.
    #[arg(long, value_delimiter = ',')]
    pub input: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    /// Ghost batch size, or `full` for full-batch statistics.
    #[arg(long, value_parser = parse_ghost)]
    pub ghost: Option<GhostPolicy>,
}

#[derive(Debug, Args)]
pub struct GridFlags {
    #[arg(long, allow_hyphen_values = true)]
    pub lr_min_exp: Option<i32>,
    #[arg(long, allow_hyphen_values = true)]
    pub lr_max_exp: Option<i32>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub keep: Option<usize>,
    #[arg(long, value_parser = parse_metric)]
    pub metric: Option<Metric>,
    /// Comma-separated variant labels.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
}

fn parse_family(s: &str) -> Result<Family, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown family `{s}` (expected fc-linear, fc-relu or conv-relu)"))
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown metric `{s}` (expected train-loss or eval-accuracy)"))
}

fn parse_ghost(s: &str) -> Result<GhostPolicy, String> {
    match s {
        "full" | "full-batch" => Ok(GhostPolicy::FullBatch),
        n => n
            .parse()
            .map(|size| GhostPolicy::Fixed { size })
            .map_err(|_| format!("ghost must be a size or `full`, got `{n}`")),
    }
}

impl Common {
    fn apply(&self, cfg: &mut RunConfig) {
        cfg.seed = self.seed;
        cfg.precision = self.precision;
        cfg.out = self.out.clone();
    }
}

impl NetFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        cfg.family = self.family;
        cfg.width = self.width;
        cfg.depth = self.depth;
        cfg.variant = self.variant.clone();
        cfg.normalized = self.normalized;
        cfg.final_bn_only = self.final_bn_only;
        cfg.dropout = self.dropout;
        cfg.input = self.input.clone();
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        cfg.epochs = self.epochs;
        cfg.batch_size = self.batch_size;
        cfg.momentum = self.momentum;
        cfg.l2 = self.l2;
        cfg.ghost = self.ghost;
    }
}

impl GridFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        cfg.lr_min_exp = self.lr_min_exp;
        cfg.lr_max_exp = self.lr_max_exp;
        cfg.runs = self.runs;
        cfg.keep = self.keep;
        cfg.metric = self.metric;
        cfg.variants = self.variants.clone();
    }
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::Analyze { .. } => CommandKind::Analyze,
            Command::Train { .. } => CommandKind::Train,
            Command::SweepDepth { .. } => CommandKind::SweepDepth,
            Command::SweepBatch { .. } => CommandKind::SweepBatch,
            Command::Gradcheck { .. } => CommandKind::Gradcheck,
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Analyze { common, .. }
            | Command::Train { common, .. }
            | Command::SweepDepth { common, .. }
            | Command::SweepBatch { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }

    /// The flag values as a config to lay over the file.
    pub fn overrides(&self) -> RunConfig {
        let mut cfg = RunConfig::default();
        self.common().apply(&mut cfg);
        match self {
            Command::Analyze { net, batch, seeds, .. } => {
                net.apply(&mut cfg);
                cfg.batch = *batch;
                cfg.seeds = *seeds;
            }
            Command::Train { net, train, lr, .. } => {
                net.apply(&mut cfg);
                train.apply(&mut cfg);
                cfg.lr = *lr;
            }
            Command::SweepDepth { net, train, grid, depths, .. } => {
                net.apply(&mut cfg);
                train.apply(&mut cfg);
                grid.apply(&mut cfg);
                cfg.depths = depths.clone();
            }
            Command::SweepBatch { net, train, grid, batch_sizes, .. } => {
                net.apply(&mut cfg);
                train.apply(&mut cfg);
                grid.apply(&mut cfg);
                cfg.batch_sizes = batch_sizes.clone();
            }
            Command::Gradcheck { .. } => {}
        }
        cfg
    }
}
