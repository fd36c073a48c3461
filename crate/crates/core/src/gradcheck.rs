//! Central finite-difference checks of every backward pass, in 64-bit.
//!
//! A module is reduced to the scalar `L = Σ y ⊙ R` with a fixed random `R`,
//! so `R` is the upstream gradient. Each input and parameter tensor is
//! compared with `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-4)`.
//! The floor keeps gradients that are exactly zero (a bias feeding straight
//! into BN) from being judged on finite-difference roundoff alone.

use crate::error::{Error, Result};
use crate::layers::{
    l2_penalty, softmax_xent, BatchNorm, ConstantScale, Conv2d, Dropout, GhostSize, GlobalMeanPool, Layer, Linear,
    Mode, Module, Param, ParamKind, ParamMut, Relu, ScalarBias, ScalarMultiplier,
};
use crate::models::{build, BlockVariant, ClassifierSpec, Family, NetworkSpec};
use crate::tensor::{Padding, Rng, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const NORM_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorError {
    pub name: String,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Checked { errors: Vec<TensorError> },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub outcome: Outcome,
}

impl CheckResult {
    pub fn max_error(&self) -> f64 {
        match &self.outcome {
            Outcome::Checked { errors } => errors.iter().map(|e| e.rel_error).fold(0.0, f64::max),
            Outcome::Skipped { .. } => 0.0,
        }
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        match &self.outcome {
            Outcome::Checked { errors } => errors.iter().all(|e| e.rel_error <= tolerance),
            Outcome::Skipped { .. } => true,
        }
    }

    pub fn is_skipped(&self) -> bool {
        matches!(self.outcome, Outcome::Skipped { .. })
    }
}

/// Norm-wise relative error with the [`NORM_FLOOR`] on the denominator.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    diff / norm(analytic).max(norm(numeric)).max(NORM_FLOOR)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn projected<M: Module<f64> + ?Sized>(m: &mut M, x: &Tensor<f64>, r: &Tensor<f64>, mode: Mode) -> Result<f64> {
    m.forward(x, mode)?.dot(r)
}

/// Checks the input gradient and every parameter gradient of `module` at `x`.
pub fn check_module<M: Module<f64> + ?Sized>(
    module: &mut M,
    x: &Tensor<f64>,
    mode: Mode,
    h: f64,
    rng: &mut Rng,
) -> Result<Vec<TensorError>> {
    let y = module.forward(x, mode)?;
    let r = Tensor::<f64>::gaussian(y.shape(), 0.0, 1.0, rng)?;
    for p in module.params_mut() {
        p.grad.fill(0.0);
    }
    let dx = module.backward(&r)?;
    let analytic: Vec<(&'static str, Vec<f64>)> =
        module.params_mut().into_iter().map(|p| (p.name, p.grad.data().to_vec())).collect();

    let mut numeric_dx = vec![0.0; x.len()];
    let mut xp = x.clone();
    for (i, slot) in numeric_dx.iter_mut().enumerate() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let up = projected(module, &xp, &r, mode)?;
        xp.data_mut()[i] = orig - h;
        let down = projected(module, &xp, &r, mode)?;
        xp.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    let mut errors = vec![TensorError { name: "input".into(), rel_error: relative_error(dx.data(), &numeric_dx) }];

    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = nth_param(module, pi).value.data()[j];
            nth_param(module, pi).value.data_mut()[j] = orig + h;
            let up = projected(module, x, &r, mode)?;
            nth_param(module, pi).value.data_mut()[j] = orig - h;
            let down = projected(module, x, &r, mode)?;
            nth_param(module, pi).value.data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        errors.push(TensorError { name: format!("{name}#{pi}"), rel_error: relative_error(grad, &numeric) });
    }
    module.clear_cache();
    Ok(errors)
}

fn nth_param<M: Module<f64> + ?Sized>(module: &mut M, index: usize) -> ParamMut<'_, f64> {
    module.params_mut().into_iter().nth(index).expect("parameter list changed during a gradient check")
}

/// Wraps a module and scales its input gradient by `1 + epsilon`. Used as a
/// negative control: a check of the wrapped module must fail.
pub struct CorruptBackward<M> {
    pub inner: M,
    pub epsilon: f64,
}

impl<M: Module<f64>> Module<f64> for CorruptBackward<M> {
    fn forward(&mut self, x: &Tensor<f64>, mode: Mode) -> Result<Tensor<f64>> {
        self.inner.forward(x, mode)
    }

    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.inner.backward(grad_out)?.scale(1.0 + self.epsilon))
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, f64>> {
        self.inner.params_mut()
    }

    fn clear_cache(&mut self) {
        self.inner.clear_cache()
    }
}

fn gaussian(shape: &[usize], rng: &mut Rng) -> Result<Tensor<f64>> {
    Tensor::gaussian(shape, 0.0, 1.0, rng)
}

fn randomize_params<M: Module<f64> + ?Sized>(m: &mut M, rng: &mut Rng) -> Result<()> {
    for p in m.params_mut() {
        let base = if matches!(p.kind, ParamKind::Gamma | ParamKind::Multiplier) { 1.0 } else { 0.0 };
        *p.value = Tensor::gaussian(p.value.shape(), base, 0.5, rng)?;
    }
    Ok(())
}

fn run_case<M: Module<f64> + ?Sized>(
    name: &str,
    module: &mut M,
    x: &Tensor<f64>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<CheckResult> {
    let outcome = match check_module(module, x, mode, DEFAULT_STEP, rng) {
        Ok(errors) => Outcome::Checked { errors },
        Err(Error::DegenerateBatch(reason)) => Outcome::Skipped { reason },
        Err(e) => return Err(e),
    };
    Ok(CheckResult { name: name.into(), outcome })
}

fn layer_case(name: &str, mut layer: Layer<f64>, x_shape: &[usize], mode: Mode, rng: &mut Rng) -> Result<CheckResult> {
    randomize_params(&mut layer, rng)?;
    if let Layer::Dropout(d) = &mut layer {
        d.freeze_mask = true;
    }
    let x = gaussian(x_shape, rng)?;
    run_case(name, &mut layer, &x, mode, rng)
}

/// Checks of the softmax cross-entropy and L2 penalty gradients.
pub fn check_losses(rng: &mut Rng) -> Result<Vec<CheckResult>> {
    let h = DEFAULT_STEP;
    let logits = gaussian(&[4, 3], rng)?;
    let labels = [0, 2, 1, 2];
    let (_, g) = softmax_xent(&logits, &labels)?;
    let mut numeric = vec![0.0; logits.len()];
    let mut lp = logits.clone();
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = lp.data()[i];
        lp.data_mut()[i] = orig + h;
        let up = softmax_xent(&lp, &labels)?.0;
        lp.data_mut()[i] = orig - h;
        let down = softmax_xent(&lp, &labels)?.0;
        lp.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    let xent = CheckResult {
        name: "softmax_xent".into(),
        outcome: Outcome::Checked {
            errors: vec![TensorError { name: "logits".into(), rel_error: relative_error(g.data(), &numeric) }],
        },
    };

    let coefficient = 5e-4;
    let mut w = Param::new(gaussian(&[3, 4], rng)?);
    l2_penalty([w.view("weight", ParamKind::Weight)], coefficient);
    let analytic = w.grad.data().to_vec();
    let penalty = |v: &Tensor<f64>| 0.5 * coefficient * v.data().iter().map(|x| x * x).sum::<f64>();
    let mut numeric = vec![0.0; w.value.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut up = w.value.clone();
        up.data_mut()[i] += h;
        let mut down = w.value.clone();
        down.data_mut()[i] -= h;
        *slot = (penalty(&up) - penalty(&down)) / (2.0 * h);
    }
    let l2 = CheckResult {
        name: "l2_penalty".into(),
        outcome: Outcome::Checked {
            errors: vec![TensorError { name: "weight".into(), rel_error: relative_error(&analytic, &numeric) }],
        },
    };
    Ok(vec![xent, l2])
}

/// Every layer kind in its relevant modes, with BN batch 1 reported as skipped.
pub fn layer_suite(rng: &mut Rng) -> Result<Vec<CheckResult>> {
    let t = Mode::Train;
    let mut out = vec![
        layer_case("linear", Layer::Linear(Linear::new(4, 3, true)?), &[5, 4], t, rng)?,
        layer_case("conv2d_same_s1", Layer::Conv2d(Conv2d::new(3, 2, 3, 1, Padding::Same, true)?), &[2, 5, 5, 2], t, rng)?,
        layer_case("conv2d_same_s2", Layer::Conv2d(Conv2d::new(3, 2, 3, 2, Padding::Same, false)?), &[2, 6, 6, 2], t, rng)?,
        layer_case("conv2d_valid", Layer::Conv2d(Conv2d::new(2, 3, 2, 1, Padding::Valid, false)?), &[1, 4, 5, 3], t, rng)?,
        layer_case("relu", Layer::Relu(Relu::new()), &[4, 6], t, rng)?,
        layer_case("batchnorm_train", Layer::BatchNorm(BatchNorm::new(5)?), &[8, 5], t, rng)?,
        layer_case(
            "batchnorm_ghost",
            Layer::BatchNorm(BatchNorm::new(5)?.with_ghost(GhostSize::Fixed(4))),
            &[8, 5],
            t,
            rng,
        )?,
        layer_case("batchnorm_conv", Layer::BatchNorm(BatchNorm::new(2)?), &[2, 3, 3, 2], t, rng)?,
        layer_case("batchnorm_eval", Layer::BatchNorm(BatchNorm::new(5)?), &[8, 5], Mode::Eval, rng)?,
        layer_case("scalar_multiplier", Layer::ScalarMultiplier(ScalarMultiplier::new(0.7)), &[3, 4], t, rng)?,
        layer_case("scalar_bias", Layer::ScalarBias(ScalarBias::new()), &[3, 4], t, rng)?,
        layer_case("constant_scale", Layer::Scale(ConstantScale::new(std::f64::consts::FRAC_1_SQRT_2)), &[3, 4], t, rng)?,
        layer_case("global_mean_pool", Layer::GlobalMeanPool(GlobalMeanPool::new()), &[2, 3, 3, 4], t, rng)?,
        layer_case("dropout", Layer::Dropout(Dropout::new(0.4, rng.substream(7))?), &[4, 6], t, rng)?,
        layer_case("batchnorm_batch1_full", Layer::BatchNorm(BatchNorm::new(3)?), &[1, 3], t, rng)?,
    ];
    out.extend(check_losses(rng)?);
    Ok(out)
}

/// Small networks covering every family and block variant.
pub fn network_specs() -> Vec<(&'static str, NetworkSpec)> {
    let fc = |variant| {
        let mut s = NetworkSpec::new(Family::FcRelu, 8, 3, variant, vec![5]);
        s.classifier = Some(ClassifierSpec { classes: 3, global_pool: false });
        s
    };
    let mut fixup = fc(BlockVariant::Fixup);
    fixup.branch_layers = 2;
    let mut dropout = fc(BlockVariant::SkipInit { alpha: 0.5 });
    dropout.dropout = 0.3;
    let mut final_bn = fc(BlockVariant::BnBranch);
    final_bn.final_bn_only = true;
    let mut conv = NetworkSpec::new(Family::ConvRelu, 4, 2, BlockVariant::BnBranch, vec![8, 8, 2]);
    conv.classifier = Some(ClassifierSpec { classes: 3, global_pool: true });
    conv.biases = true;
    vec![
        ("fc_linear_bn", NetworkSpec::new(Family::FcLinear, 8, 4, BlockVariant::BnBranch, vec![5])),
        ("fc_relu_bn_classifier", fc(BlockVariant::BnBranch)),
        ("fc_relu_skipinit_dropout", dropout),
        ("fc_relu_divide_by_sqrt2", fc(BlockVariant::DivideBySqrt2)),
        ("fc_relu_bn_skip", fc(BlockVariant::BnBranchAndBnSkip)),
        ("fc_relu_final_bn_only", final_bn),
        ("fc_relu_fixup", fixup),
        ("conv_relu_bn_classifier", conv),
    ]
}

/// Full-network checks. Every parameter is redrawn at random so zero-initialized
/// layers (Fixup, SkipInit) still exercise their gradients.
pub fn network_suite(rng: &mut Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, spec) in network_specs() {
        let mut net = build::<f64>(&spec, rng)?;
        randomize_params(&mut net, rng)?;
        for layer in net.layers_mut() {
            if let Layer::Dropout(d) = layer {
                d.freeze_mask = true;
            }
        }
        let mut shape = vec![4];
        shape.extend_from_slice(&spec.input);
        let x = gaussian(&shape, rng)?;
        out.push(run_case(name, &mut net, &x, Mode::Train, rng)?);
    }
    Ok(out)
}

/// A linear layer whose input gradient is scaled by `1 + epsilon`; its check
/// must fail for any `epsilon` well above the tolerance.
pub fn negative_control(epsilon: f64, rng: &mut Rng) -> Result<CheckResult> {
    let mut m = CorruptBackward { inner: Layer::Linear(Linear::new(3, 2, true)?), epsilon };
    randomize_params(&mut m, rng)?;
    let x = gaussian(&[4, 3], rng)?;
    run_case("corrupted linear backward", &mut m, &x, Mode::Train, rng)
}

/// One CSV row per check: name, status (`passed`/`failed`/`skipped`), the
/// largest relative error and the skip reason.
pub fn write_results_csv<W: std::io::Write>(out: W, results: &[CheckResult], tolerance: f64) -> Result<()> {
    use crate::signalprop::csv_err;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["check", "status", "max_error", "detail"]).map_err(csv_err)?;
    for r in results {
        let (status, detail) = match &r.outcome {
            Outcome::Skipped { reason } => ("skipped", reason.as_str()),
            Outcome::Checked { .. } if r.passed(tolerance) => ("passed", ""),
            Outcome::Checked { .. } => ("failed", ""),
        };
        w.write_record([r.name.as_str(), status, &r.max_error().to_string(), detail]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Layer, loss and network checks with a fixed seed.
pub fn default_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed);
    let mut out = layer_suite(&mut rng)?;
    out.extend(network_suite(&mut rng)?);
    Ok(out)
}
