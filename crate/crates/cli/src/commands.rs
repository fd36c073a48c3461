use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use resprop::gradcheck::{default_suite, negative_control, write_results_csv, CheckResult, Outcome, DEFAULT_TOLERANCE};
use resprop::signalprop::{analyze, average_reports, predict, write_prediction_csv, write_report_csv};
use resprop::trainer::{
    batch_sweep, depth_sweep, make_dataset, run_training, write_grid_csv, write_run_csv, write_runs_csv,
    write_summary_csv, SweepRow,
};
use resprop::{Real, Rng};

use crate::args::{Cli, Command};
use crate::config::{Precision, RunConfig, DEFAULT_BATCH};
use crate::CliError;

/// File config (if any) overlaid with the flags of `cli`.
pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let file = match &cli.command.common().config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    let kind = cli.command.kind();
    file.check_command(kind)?;
    let mut cfg = file.overlay(cli.command.overrides());
    cfg.command = Some(kind);
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Analyze { .. } => dispatch(&cfg, cmd_analyze::<f32>, cmd_analyze::<f64>),
        Command::Train { .. } => dispatch(&cfg, cmd_train::<f32>, cmd_train::<f64>),
        Command::SweepDepth { .. } => dispatch(&cfg, cmd_sweep_depth::<f32>, cmd_sweep_depth::<f64>),
        Command::SweepBatch { .. } => dispatch(&cfg, cmd_sweep_batch::<f32>, cmd_sweep_batch::<f64>),
        Command::Gradcheck { corrupt, common } => cmd_gradcheck(&cfg, *corrupt, common.out.is_some() || cfg.out.is_some()),
    }
}

type Handler = fn(&RunConfig) -> Result<(), CliError>;

fn dispatch(cfg: &RunConfig, single: Handler, double: Handler) -> Result<(), CliError> {
    match cfg.precision() {
        Precision::F32 => single(cfg),
        Precision::F64 => double(cfg),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

pub fn cmd_analyze<T: Real>(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.network_spec(None)?;
    spec.validate()?;
    let batch = cfg.batch.unwrap_or(DEFAULT_BATCH);
    let seeds = cfg.seeds.unwrap_or(1);
    if seeds == 0 {
        return Err(CliError::Validation("seeds must be at least 1".into()));
    }
    let reports = (0..seeds as u64)
        .map(|i| analyze::<T>(&spec, batch, cfg.seed() + i))
        .collect::<Result<Vec<_>, _>>()?;
    let report = average_reports(&reports)?;
    let prediction = predict(spec.variant, spec.family, spec.normalized, spec.depth).ok();
    let dir = out_dir(cfg)?;
    write_report_csv(create(&dir.join("stats.csv"))?, &report, prediction.as_ref())?;
    if let Some(p) = &prediction {
        write_prediction_csv(create(&dir.join("prediction.csv"))?, p)?;
    }
    println!(
        "analyzed {} blocks of {} ({} seeds, batch {batch}) -> {}",
        report.blocks.len(),
        report.variant,
        seeds,
        dir.display()
    );
    if report.diverged {
        return Err(CliError::Runtime(format!(
            "activations became non-finite after block {}; partial statistics written",
            report.blocks.len()
        )));
    }
    Ok(())
}

pub fn cmd_train<T: Real>(cfg: &RunConfig) -> Result<(), CliError> {
    let mut spec = cfg.network_spec(None)?;
    let data = make_dataset(&cfg.dataset(), cfg.seed())?;
    spec.input = data.feature_shape.clone();
    let train = cfg.train_config()?;
    let lr = cfg.lr.ok_or_else(|| CliError::Validation("missing required setting `lr` (pass --lr)".into()))?;
    let run = run_training::<T>(&spec, &data, lr, cfg.seed(), &train)?;
    let dir = out_dir(cfg)?;
    write_run_csv(create(&dir.join("run.csv"))?, &run)?;
    if run.diverged {
        println!("run diverged after {} epochs -> {}", run.train_loss.len(), dir.display());
    } else {
        println!(
            "initial loss {} final loss {} final accuracy {} -> {}",
            run.initial_loss,
            run.final_loss(),
            run.final_accuracy().unwrap_or(f64::NAN),
            dir.display()
        );
    }
    Ok(())
}

fn write_sweep(cfg: &RunConfig, rows: &[SweepRow]) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    write_runs_csv(create(&dir.join("runs.csv"))?, rows)?;
    write_grid_csv(create(&dir.join("grid.csv"))?, rows)?;
    write_summary_csv(create(&dir.join("summary.csv"))?, rows)?;
    for row in rows {
        let best = match (row.grid.best_lr(), row.grid.best_value()) {
            (Some(lr), Some(v)) => format!("best lr {lr} -> {v}"),
            _ => "training failed at every learning rate".into(),
        };
        let boundary = if row.grid.on_boundary() { " (optimum on grid boundary)" } else { "" };
        let note = row.note.as_deref().map(|n| format!(" [{n}]")).unwrap_or_default();
        println!("{} depth {} batch {}: {best}{boundary}{note}", row.variant, row.depth, row.batch_size);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn sweep_data(cfg: &RunConfig, depth: Option<usize>) -> Result<(resprop::NetworkSpec, resprop::trainer::Dataset), CliError> {
    let mut spec = cfg.network_spec(depth)?;
    let data = make_dataset(&cfg.dataset(), cfg.seed())?;
    spec.input = data.feature_shape.clone();
    Ok((spec, data))
}

pub fn cmd_sweep_depth<T: Real>(cfg: &RunConfig) -> Result<(), CliError> {
    let depths = cfg.depths.clone().ok_or_else(|| CliError::Validation("missing required setting `depths`".into()))?;
    if depths.is_empty() {
        return Err(CliError::Validation("`depths` is empty".into()));
    }
    let (spec, data) = sweep_data(cfg, Some(depths[0]))?;
    let rows = depth_sweep::<T>(&spec, &depths, &cfg.variant_specs()?, &data, &cfg.grid_config()?)?;
    write_sweep(cfg, &rows)
}

pub fn cmd_sweep_batch<T: Real>(cfg: &RunConfig) -> Result<(), CliError> {
    let sizes =
        cfg.batch_sizes.clone().ok_or_else(|| CliError::Validation("missing required setting `batch_sizes`".into()))?;
    if sizes.is_empty() {
        return Err(CliError::Validation("`batch_sizes` is empty".into()));
    }
    let (spec, data) = sweep_data(cfg, None)?;
    let mut first = cfg.clone();
    first.batch_size = Some(sizes[0]);
    let grid = first.grid_config()?;
    let rows = batch_sweep::<T>(&spec, &sizes, &cfg.variant_specs()?, &data, &grid)?;
    write_sweep(cfg, &rows)
}

fn report_line(r: &CheckResult) -> String {
    match &r.outcome {
        Outcome::Skipped { reason } => format!("SKIP {}: {reason}", r.name),
        Outcome::Checked { .. } => {
            let status = if r.passed(DEFAULT_TOLERANCE) { "PASS" } else { "FAIL" };
            format!("{status} {} max relative error {:e}", r.name, r.max_error())
        }
    }
}

pub fn cmd_gradcheck(cfg: &RunConfig, corrupt: bool, write: bool) -> Result<(), CliError> {
    if cfg.precision == Some(Precision::F32) {
        return Err(CliError::Validation("gradient checks always run in 64-bit; drop --precision f32".into()));
    }
    let mut results = default_suite(cfg.seed())?;
    if corrupt {
        results.push(negative_control(1e-3, &mut Rng::new(cfg.seed()))?);
    }
    for r in &results {
        println!("{}", report_line(r));
    }
    if write {
        let dir = out_dir(cfg)?;
        write_results_csv(create(&dir.join("gradcheck.csv"))?, &results, DEFAULT_TOLERANCE)?;
    }
    let failed = results.iter().filter(|r| !r.passed(DEFAULT_TOLERANCE)).count();
    let skipped = results.iter().filter(|r| r.is_skipped()).count();
    println!("{} checks, {failed} failed, {skipped} skipped", results.len());
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} gradient checks exceeded relative error {DEFAULT_TOLERANCE:e}")));
    }
    Ok(())
}
