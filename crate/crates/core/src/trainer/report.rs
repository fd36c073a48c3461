use std::io::Write;

use super::{RunResult, SweepRow};
use crate::error::Result;
use crate::signalprop::csv_err;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-epoch trace of one run; row 0 is the initial loss.
pub fn write_run_csv<W: Write>(writer: W, run: &RunResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "train_loss", "eval_accuracy", "diverged"]).map_err(csv_err)?;
    w.write_record(["0".into(), run.initial_loss.to_string(), String::new(), String::new()]).map_err(csv_err)?;
    for (e, (l, a)) in run.train_loss.iter().zip(&run.eval_accuracy).enumerate() {
        w.write_record([(e + 1).to_string(), l.to_string(), a.to_string(), String::new()]).map_err(csv_err)?;
    }
    if run.diverged {
        w.write_record([(run.train_loss.len() + 1).to_string(), "inf".into(), String::new(), "true".into()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per training run of a sweep.
pub fn write_runs_csv<W: Write>(writer: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "variant", "depth", "batch_size", "ghost", "lr", "seed", "final_loss", "final_accuracy", "diverged", "note",
    ])
    .map_err(csv_err)?;
    for row in rows {
        for cell in &row.grid.cells {
            for r in &cell.runs {
                w.write_record([
                    row.variant.clone(),
                    row.depth.to_string(),
                    row.batch_size.to_string(),
                    row.ghost.label(),
                    r.lr.to_string(),
                    r.seed.to_string(),
                    r.final_loss().to_string(),
                    opt(r.final_accuracy()),
                    r.diverged.to_string(),
                    r.note.clone().unwrap_or_default(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per (sweep point, learning rate) with the best-k aggregate.
pub fn write_grid_csv<W: Write>(writer: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "variant", "depth", "batch_size", "ghost", "metric", "lr", "mean", "std", "finite_runs", "failed", "best",
    ])
    .map_err(csv_err)?;
    for row in rows {
        for (i, cell) in row.grid.cells.iter().enumerate() {
            w.write_record([
                row.variant.clone(),
                row.depth.to_string(),
                row.batch_size.to_string(),
                row.ghost.label(),
                row.grid.metric.label().into(),
                cell.lr.to_string(),
                opt(cell.mean),
                opt(cell.std),
                cell.finite_runs.to_string(),
                cell.failed().to_string(),
                (row.grid.best == Some(i)).to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per sweep point: best rate and value.
pub fn write_summary_csv<W: Write>(writer: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "variant", "depth", "batch_size", "ghost", "metric", "best_lr", "best_value", "best_std", "on_boundary", "note",
    ])
    .map_err(csv_err)?;
    for row in rows {
        let g = &row.grid;
        w.write_record([
            row.variant.clone(),
            row.depth.to_string(),
            row.batch_size.to_string(),
            row.ghost.label(),
            g.metric.label().into(),
            opt(g.best_lr()),
            opt(g.best_value()),
            opt(g.best_cell().and_then(|c| c.std)),
            g.on_boundary().to_string(),
            row.note.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
