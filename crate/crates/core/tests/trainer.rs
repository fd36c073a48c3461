//! End-to-end behavior of training, grid search and sweeps on desk-scale tasks.

use resprop::layers::{BatchNorm, GhostSize, Module, Mode};
use resprop::models::{BlockVariant, Family, NetworkSpec};
use resprop::trainer::*;
use resprop::{Rng, Tensor};

fn blobs() -> Dataset {
    make_dataset(&DatasetKind::GaussianBlobs { classes: 4, dim: 8, train: 256, eval: 128, separation: 1.0 }, 0).unwrap()
}

fn grid(min_exp: i32, max_exp: i32, runs: usize, keep: usize, train: TrainConfig) -> GridConfig {
    GridConfig { min_exp, max_exp, runs, keep, metric: Metric::TrainLoss, base_seed: 0, train }
}

fn best_loss(row: &SweepRow) -> f64 {
    row.grid.best_value().unwrap()
}

#[test]
fn skipinit_zero_grid_has_interior_optimum() {
    let spec = NetworkSpec::new(Family::FcRelu, 32, 32, BlockVariant::SkipInit { alpha: 0.0 }, vec![8]);
    let mut train = TrainConfig::new(2, 32);
    train.momentum = 0.0;
    let result = lr_grid_search::<f64>(&spec, &blobs(), &grid(-3, 0, 3, 2, train)).unwrap();
    assert_eq!(result.cells.len(), 4);
    assert!(result.best.is_some());
    assert!(!result.on_boundary(), "best lr {:?}", result.best_lr());
}

#[test]
fn grid_cells_share_seeds_across_rates() {
    let spec = NetworkSpec::new(Family::FcRelu, 8, 2, BlockVariant::SkipInit { alpha: 0.0 }, vec![8]);
    let mut cfg = grid(-4, -3, 3, 3, TrainConfig::new(1, 32));
    cfg.base_seed = 40;
    let result = lr_grid_search::<f64>(&spec, &blobs(), &cfg).unwrap();
    for cell in &result.cells {
        let seeds: Vec<u64> = cell.runs.iter().map(|r| r.seed).collect();
        assert_eq!(seeds, vec![40, 41, 42]);
        let direct = run_training::<f64>(&spec, &blobs(), cell.lr, 41, &cfg.train).unwrap();
        assert_eq!(cell.runs[1], direct);
    }
}

#[test]
fn depth_sweep_unit_skip_fails_deep() {
    let base = NetworkSpec::new(Family::FcRelu, 32, 8, BlockVariant::NoNorm, vec![8]);
    let variants: Vec<VariantSpec> = ["skipinit(0)", "skipinit(1)"].iter().map(|s| s.parse().unwrap()).collect();
    let rows = depth_sweep::<f64>(&base, &[8, 64], &variants, &blobs(), &grid(-8, -1, 2, 1, TrainConfig::new(3, 32))).unwrap();
    assert_eq!(rows.len(), 4);
    let find = |v: &str, d: usize| rows.iter().find(|r| r.variant == v && r.depth == d).unwrap();
    assert!(best_loss(find("skipinit(1)", 64)) > best_loss(find("skipinit(0)", 64)));
    assert!(best_loss(find("skipinit(0)", 8)).is_finite());
}

#[test]
fn divide_by_sqrt2_underperforms_deep() {
    let base = NetworkSpec::new(Family::FcRelu, 32, 64, BlockVariant::NoNorm, vec![8]);
    let variants: Vec<VariantSpec> = ["skipinit(0)", "divide-by-sqrt2"].iter().map(|s| s.parse().unwrap()).collect();
    let rows = depth_sweep::<f64>(&base, &[64], &variants, &blobs(), &grid(-8, -1, 2, 1, TrainConfig::new(3, 32))).unwrap();
    assert!(best_loss(&rows[1]) > best_loss(&rows[0]), "{} vs {}", best_loss(&rows[1]), best_loss(&rows[0]));
}

#[test]
fn ghost_equal_to_batch_matches_full_batch_policy() {
    let base = NetworkSpec::new(Family::FcRelu, 16, 4, BlockVariant::BnBranch, vec![8]);
    let mut v = VariantSpec::new(BlockVariant::BnBranch);
    v.normalized = true;
    let mut ghost = TrainConfig::new(2, 16);
    ghost.ghost = GhostPolicy::Fixed { size: 16 };
    let full = TrainConfig::new(2, 16);
    let a = batch_sweep::<f64>(&base, &[16], &[v.clone()], &blobs(), &grid(-4, -2, 2, 1, ghost)).unwrap();
    let b = batch_sweep::<f64>(&base, &[16], &[v], &blobs(), &grid(-4, -2, 2, 1, full)).unwrap();
    assert_eq!(a[0].grid, b[0].grid);
    assert_ne!(a[0].ghost, b[0].ghost);
}

#[test]
fn batch_one_conv_bn_is_instance_norm() {
    let mut bn = BatchNorm::<f64>::new(3).unwrap().with_ghost(GhostSize::Fixed(1));
    let x = Tensor::gaussian(&[4, 5, 5, 3], 1.0, 2.0, &mut Rng::new(3)).unwrap();
    let y = bn.forward(&x, Mode::Train).unwrap();
    for n in 0..4 {
        let (mean, _) = y.slice_batch(n, n + 1).unwrap().channel_moments();
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
    }

    let data = make_dataset(&DatasetKind::GaussianBlobs { classes: 2, dim: 192, train: 16, eval: 8, separation: 2.0 }, 1).unwrap();
    let image = |s: Split| Split { x: s.x.reshape(&[s.y.len(), 8, 8, 3]).unwrap(), y: s.y };
    let data = Dataset { train: image(data.train), eval: image(data.eval), classes: data.classes, feature_shape: vec![8, 8, 3] };
    let mut base = NetworkSpec::new(Family::ConvRelu, 4, 1, BlockVariant::BnBranch, vec![8, 8, 3]);
    base.kernel_size = 1;
    let mut v = VariantSpec::new(BlockVariant::BnBranch);
    v.normalized = true;
    let rows = batch_sweep::<f64>(&base, &[1], &[v], &data, &grid(-4, -4, 1, 1, TrainConfig::new(1, 1))).unwrap();
    assert!(rows[0].note.as_deref().unwrap().contains("instance normalization"), "{:?}", rows[0].note);
    assert!(rows[0].grid.best.is_some());
}

#[test]
fn every_rate_diverging_is_a_failed_grid() {
    let spec = NetworkSpec::new(Family::FcRelu, 16, 40, BlockVariant::SkipInit { alpha: 1.0 }, vec![8]);
    let result = lr_grid_search::<f64>(&spec, &blobs(), &grid(-2, 0, 2, 1, TrainConfig::new(1, 32))).unwrap();
    assert!(result.cells.iter().all(|c| c.failed()));
    assert_eq!(result.best, None);
    assert_eq!(result.best_value(), Some(f64::INFINITY));
}

#[test]
fn sweep_csvs_have_one_line_per_row() {
    let base = NetworkSpec::new(Family::FcRelu, 8, 2, BlockVariant::NoNorm, vec![8]);
    let variants = vec![VariantSpec::new(BlockVariant::SkipInit { alpha: 0.0 })];
    let rows = depth_sweep::<f64>(&base, &[1, 2], &variants, &blobs(), &grid(-3, -2, 2, 1, TrainConfig::new(1, 32))).unwrap();
    let mut summary = Vec::new();
    write_summary_csv(&mut summary, &rows).unwrap();
    let text = String::from_utf8(summary).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("variant,depth,batch_size,ghost,metric,best_lr,best_value,best_std,on_boundary,note"));
    let mut cells = Vec::new();
    write_grid_csv(&mut cells, &rows).unwrap();
    assert_eq!(String::from_utf8(cells).unwrap().lines().count(), 1 + 2 * 2);
    let mut runs = Vec::new();
    write_runs_csv(&mut runs, &rows).unwrap();
    assert_eq!(String::from_utf8(runs).unwrap().lines().count(), 1 + 2 * 2 * 2);
}
