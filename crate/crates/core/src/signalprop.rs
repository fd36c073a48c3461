//! Per-block activation statistics at initialization and their closed-form
//! predictions.
//!
//! All variances pool every channel and every example of a single weight
//! draw, with the biased estimator. BN statistics are read from the first
//! BN of each residual branch after one train-mode pass at momentum 0.

use std::f64::consts::PI;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{Layer, Mode};
use crate::models::{BlockVariant, Family, NetworkSpec};
use crate::network::Network;
use crate::tensor::{Real, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockStats {
    /// 1-based block index.
    pub block: usize,
    pub skip_var: f64,
    pub branch_var: f64,
    pub output_var: f64,
    /// Mean over channels of the branch BN's moving variance.
    pub bn_moving_var: Option<f64>,
    /// Mean over channels of the branch BN's squared moving mean.
    pub bn_moving_mean_sq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatReport {
    pub seed: u64,
    pub width: usize,
    pub batch: usize,
    pub variant: String,
    pub blocks: Vec<BlockStats>,
    /// Activations went non-finite; `blocks` stops at the last finite one.
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PredictedBlock {
    pub skip_var: Option<f64>,
    pub branch_var: Option<f64>,
    pub bn_moving_var: Option<f64>,
    pub bn_moving_mean_sq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryPrediction {
    pub blocks: Vec<PredictedBlock>,
}

fn branch_bn_stats<T: Real>(branch: &[Layer<T>]) -> Option<(f64, f64)> {
    branch.iter().find_map(|l| match l {
        Layer::BatchNorm(bn) => {
            let c = bn.moving_var.len() as f64;
            let var = bn.moving_var.iter().sum::<f64>() / c;
            let mean_sq = bn.moving_mean.iter().map(|m| m * m).sum::<f64>() / c;
            Some((var, mean_sq))
        }
        _ => None,
    })
}

/// Runs `f` with every BN momentum set to 0, then restores the momenta.
fn with_zero_momentum<T: Real, R>(network: &mut Network<T>, f: impl FnOnce(&mut Network<T>) -> R) -> (bool, R) {
    let saved: Vec<f64> = network.batchnorms_mut().into_iter().map(|bn| std::mem::replace(&mut bn.momentum, 0.0)).collect();
    let out = f(network);
    for (bn, m) in network.batchnorms_mut().into_iter().zip(saved.iter()) {
        bn.momentum = *m;
    }
    (!saved.is_empty(), out)
}

/// One train-mode pass at momentum 0, so every BN's moving statistics become
/// exactly the statistics of `batch`. Returns `false` (and does nothing) when
/// the network has no BN layers.
pub fn capture_bn_statistics<T: Real>(network: &mut Network<T>, batch: &Tensor<T>) -> Result<bool> {
    if !network.has_batchnorm() {
        return Ok(false);
    }
    let (_, out) = with_zero_momentum(network, |net| net.forward_probed(batch, Mode::Train, false, &mut |_| {}));
    out?;
    Ok(true)
}

/// Records skip, branch and output variances of every block during a single
/// train-mode pass that also captures BN statistics.
pub fn measure<T: Real>(network: &mut Network<T>, batch: &Tensor<T>, seed: u64, variant: &str) -> Result<StatReport> {
    let mut stats = Vec::with_capacity(network.depth());
    let mut diverged = false;
    let mut width = 0;
    let (_, out) = with_zero_momentum(network, |net| {
        net.forward_probed(batch, Mode::Train, false, &mut |p| {
            width = p.skip.channels();
            if diverged {
                return;
            }
            if !(p.skip.all_finite() && p.branch.all_finite() && p.output.all_finite()) {
                diverged = true;
                return;
            }
            stats.push(BlockStats {
                block: p.index + 1,
                skip_var: p.skip.pooled_variance(),
                branch_var: p.branch.pooled_variance(),
                output_var: p.output.pooled_variance(),
                bn_moving_var: None,
                bn_moving_mean_sq: None,
            });
        })
    });
    match out {
        Ok(_) => {}
        Err(Error::NonFinite(_)) => diverged = true,
        Err(e) => return Err(e),
    }
    for (s, block) in stats.iter_mut().zip(&network.blocks) {
        if let Some((v, m)) = branch_bn_stats(&block.branch) {
            s.bn_moving_var = Some(v);
            s.bn_moving_mean_sq = Some(m);
        }
    }
    Ok(StatReport {
        seed,
        width,
        batch: batch.batch(),
        variant: variant.to_string(),
        blocks: stats,
        diverged,
    })
}

/// Unit-variance Gaussian inputs for a statistics run, standardized per
/// channel (per feature for fully connected inputs).
pub fn standard_inputs<T: Real>(spec: &NetworkSpec, batch: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    let mut shape = vec![batch];
    shape.extend_from_slice(&spec.input);
    Ok(Tensor::<f64>::gaussian(&shape, 0.0, 1.0, rng)?.standardize_channels().cast())
}

/// Builds `spec` from `seed`, draws a standardized input batch from an
/// independent stream and measures it.
pub fn analyze<T: Real>(spec: &NetworkSpec, batch: usize, seed: u64) -> Result<StatReport> {
    let rng = Rng::new(seed);
    let mut net = crate::models::build::<T>(spec, &mut rng.substream(0))?;
    let x = standard_inputs::<T>(spec, batch, &mut rng.substream(1))?;
    measure(&mut net, &x, seed, &spec.variant.label())
}

/// Blockwise mean of several reports (e.g. over seeds). Blocks missing from a
/// diverged report are dropped from the mean.
pub fn average_reports(reports: &[StatReport]) -> Result<StatReport> {
    let first = reports.first().ok_or_else(|| Error::InvalidArgument("no reports to average".into()))?;
    let depth = reports.iter().map(|r| r.blocks.len()).min().unwrap_or(0);
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&BlockStats) -> f64, i: usize| reports.iter().map(|r| f(&r.blocks[i])).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&BlockStats) -> Option<f64>, i: usize| {
        reports.iter().map(|r| f(&r.blocks[i])).sum::<Option<f64>>().map(|s| s / n)
    };
    let blocks = (0..depth)
        .map(|i| BlockStats {
            block: i + 1,
            skip_var: mean(&|b| b.skip_var, i),
            branch_var: mean(&|b| b.branch_var, i),
            output_var: mean(&|b| b.output_var, i),
            bn_moving_var: mean_opt(&|b| b.bn_moving_var, i),
            bn_moving_mean_sq: mean_opt(&|b| b.bn_moving_mean_sq, i),
        })
        .collect();
    Ok(StatReport {
        seed: first.seed,
        width: first.width,
        batch: first.batch,
        variant: first.variant.clone(),
        blocks,
        diverged: reports.iter().any(|r| r.diverged),
    })
}

/// Closed-form per-block statistics for the variants with a known answer,
/// under the convention that the input to the first block has unit variance.
///
/// * no normalization, linear: every block doubles the variance, `2^(ℓ-1)`;
/// * SkipInit(α), linear, no BN: `(1 + α²)^(ℓ-1)` on the skip path;
/// * ÷√2, linear, no BN: variance stays 1;
/// * BN branch, linear: skip `ℓ`, branch 1, BN moving var `ℓ`, moving mean 0;
/// * BN branch, ReLU: skip `ℓ`, branch 1, BN moving var `ℓ(1 − 1/π)`,
///   squared moving mean `ℓ/π`.
pub fn predict(variant: BlockVariant, family: Family, normalized: bool, depth: usize) -> Result<TheoryPrediction> {
    let blocks = (1..=depth)
        .map(|l| {
            let l_f = l as f64;
            match (variant, family, normalized) {
                (BlockVariant::NoNorm, Family::FcLinear, _) => {
                    let v = 2f64.powi(l as i32 - 1);
                    Ok(PredictedBlock { skip_var: Some(v), branch_var: Some(v), ..Default::default() })
                }
                (BlockVariant::SkipInit { alpha }, Family::FcLinear, false) => {
                    let v = (1.0 + alpha * alpha).powi(l as i32 - 1);
                    Ok(PredictedBlock { skip_var: Some(v), branch_var: Some(alpha * alpha * v), ..Default::default() })
                }
                (BlockVariant::DivideBySqrt2, Family::FcLinear, false) => {
                    Ok(PredictedBlock { skip_var: Some(1.0), branch_var: Some(1.0), ..Default::default() })
                }
                (BlockVariant::BnBranch, Family::FcLinear, _) => Ok(PredictedBlock {
                    skip_var: Some(l_f),
                    branch_var: Some(1.0),
                    bn_moving_var: Some(l_f),
                    bn_moving_mean_sq: Some(0.0),
                }),
                (BlockVariant::BnBranch, Family::FcRelu, _) => Ok(PredictedBlock {
                    skip_var: Some(l_f),
                    branch_var: Some(1.0),
                    bn_moving_var: Some(l_f * (1.0 - 1.0 / PI)),
                    bn_moving_mean_sq: Some(l_f / PI),
                }),
                _ => Err(Error::Unsupported(format!(
                    "no closed form for variant {} on {family:?}",
                    variant.label()
                ))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TheoryPrediction { blocks })
}

/// `branch_var / (branch_var + skip_var)` per block, 0 when both vanish.
pub fn branch_fraction(report: &StatReport) -> Vec<f64> {
    report
        .blocks
        .iter()
        .map(|b| {
            let total = b.branch_var + b.skip_var;
            if total == 0.0 {
                0.0
            } else {
                b.branch_var / total
            }
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV with one row per block; prediction columns are empty when unknown.
pub fn write_report_csv<W: Write>(out: W, report: &StatReport, prediction: Option<&TheoryPrediction>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "block",
        "skip_var",
        "branch_var",
        "bn_moving_var",
        "bn_moving_mean_sq",
        "branch_fraction",
        "predicted_skip_var",
        "predicted_branch_var",
        "predicted_bn_moving_var",
        "predicted_bn_moving_mean_sq",
    ])
    .map_err(csv_err)?;
    for (b, frac) in report.blocks.iter().zip(branch_fraction(report)) {
        let p = prediction.and_then(|p| p.blocks.get(b.block - 1)).copied().unwrap_or_default();
        w.write_record([
            b.block.to_string(),
            b.skip_var.to_string(),
            b.branch_var.to_string(),
            cell(b.bn_moving_var),
            cell(b.bn_moving_mean_sq),
            frac.to_string(),
            cell(p.skip_var),
            cell(p.branch_var),
            cell(p.bn_moving_var),
            cell(p.bn_moving_mean_sq),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV of the closed-form prediction alone, one row per block.
pub fn write_prediction_csv<W: Write>(out: W, prediction: &TheoryPrediction) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["block", "skip_var", "branch_var", "bn_moving_var", "bn_moving_mean_sq"]).map_err(csv_err)?;
    for (i, p) in prediction.blocks.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            cell(p.skip_var),
            cell(p.branch_var),
            cell(p.bn_moving_var),
            cell(p.bn_moving_mean_sq),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Least-squares slope, intercept and R² of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::apply_skipinit;
    use crate::models::build;

    fn small(variant: BlockVariant, family: Family, depth: usize) -> NetworkSpec {
        NetworkSpec::new(family, 64, depth, variant, vec![16])
    }

    #[test]
    fn relu_prediction_at_ten() {
        let p = predict(BlockVariant::BnBranch, Family::FcRelu, true, 10).unwrap();
        assert!((p.blocks[9].bn_moving_var.unwrap() - 6.817).abs() < 1e-3);
        assert!((p.blocks[9].bn_moving_mean_sq.unwrap() - 3.183).abs() < 1e-3);
        let p = predict(BlockVariant::NoNorm, Family::FcLinear, false, 3).unwrap();
        assert_eq!(p.blocks[0].skip_var, Some(1.0));
        let p = predict(BlockVariant::BnBranch, Family::FcLinear, true, 7).unwrap();
        assert!(p.blocks.iter().all(|b| b.branch_var == Some(1.0)));
        assert!(predict(BlockVariant::Fixup, Family::ConvRelu, false, 3).is_err());
    }

    #[test]
    fn capture_copies_batch_stats_and_is_idempotent() {
        let spec = small(BlockVariant::BnBranch, Family::FcLinear, 3);
        let mut rng = Rng::new(1);
        let mut net = build::<f64>(&spec, &mut rng).unwrap();
        let x = standard_inputs::<f64>(&spec, 32, &mut rng).unwrap();
        assert!(capture_bn_statistics(&mut net, &x).unwrap());
        let (mean, _) = x.channel_moments();
        let first = net.batchnorms_mut()[0].moving_mean.clone();
        for (a, b) in first.iter().zip(&mean) {
            assert_eq!(a, b);
        }
        let snapshot: Vec<Vec<f64>> = net.batchnorms_mut().iter().map(|b| b.moving_var.clone()).collect();
        capture_bn_statistics(&mut net, &x).unwrap();
        let again: Vec<Vec<f64>> = net.batchnorms_mut().iter().map(|b| b.moving_var.clone()).collect();
        assert_eq!(snapshot, again);
        assert!(net.batchnorms_mut().iter().all(|b| b.momentum == 0.9));

        let train = net.forward(&x, Mode::Train).unwrap();
        let eval = net.forward(&x, Mode::Eval).unwrap();
        let diff = train.zip_map(&eval, |a, b| a - b).unwrap();
        assert!(diff.norm() / train.norm() < 1e-6);

        let mut plain = build::<f64>(&small(BlockVariant::NoNorm, Family::FcLinear, 2), &mut Rng::new(2)).unwrap();
        assert!(!capture_bn_statistics(&mut plain, &x).unwrap());
    }

    #[test]
    fn skipinit_zero_keeps_skip_var_constant() {
        let spec = small(BlockVariant::SkipInit { alpha: 0.3 }, Family::FcRelu, 6);
        let mut rng = Rng::new(3);
        let mut net = build::<f64>(&spec, &mut rng).unwrap();
        apply_skipinit(&mut net, 0.0).unwrap();
        let x = standard_inputs::<f64>(&spec, 16, &mut rng).unwrap();
        let r = measure(&mut net, &x, 3, "skipinit(0)").unwrap();
        assert!(r.blocks.iter().all(|b| b.skip_var == r.blocks[0].skip_var));
        assert!(branch_fraction(&r).iter().all(|&f| f == 0.0));
    }

    #[test]
    fn divergence_yields_partial_report() {
        let mut spec = small(BlockVariant::SkipInit { alpha: 1e30 }, Family::FcLinear, 12);
        spec.width = 8;
        let r = analyze::<f32>(&spec, 8, 4).unwrap();
        assert!(r.diverged);
        assert!(r.blocks.len() < 12);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let spec = small(BlockVariant::BnBranch, Family::FcRelu, 4);
        let r = analyze::<f64>(&spec, 32, 5).unwrap();
        let p = predict(spec.variant, spec.family, true, 4).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &r, Some(&p)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("block,skip_var,branch_var,bn_moving_var,bn_moving_mean_sq"));
        assert_eq!(lines[1].split(',').count(), 10);
    }

    #[test]
    fn fit_of_a_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [3.0, 5.0, 7.0, 9.0];
        let (s, i, r2) = linear_fit(&x, &y);
        assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }
}
