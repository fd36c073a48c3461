//! Weight initializers and the network-level SkipInit / Fixup schemes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::network::Network;
use crate::tensor::{Real, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitScheme {
    He,
    LeCun,
    SkipInit { alpha: f64 },
    Fixup { m: usize },
    Zero,
}

impl InitScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            InitScheme::SkipInit { alpha } if !alpha.is_finite() => {
                Err(Error::InvalidArgument(format!("SkipInit alpha must be finite, got {alpha}")))
            }
            InitScheme::Fixup { m } if m < 2 => Err(fixup_m_error(m)),
            _ => Ok(()),
        }
    }
}

fn fixup_m_error(m: usize) -> Error {
    Error::InvalidArgument(format!(
        "Fixup needs at least 2 weighted layers per branch (got {m}); the scale d^(-1/(2m-2)) is undefined"
    ))
}

fn gaussian_fill<T: Real>(weight: &mut Tensor<T>, variance: f64, fan_in: usize, rng: &mut Rng) -> Result<()> {
    if fan_in == 0 {
        return Err(Error::InvalidArgument("fan_in must be positive".into()));
    }
    *weight = Tensor::gaussian(weight.shape(), 0.0, variance.sqrt(), rng)?;
    Ok(())
}

/// Fills `weight` with i.i.d. `N(0, 2 / fan_in)` samples.
pub fn he_init<T: Real>(weight: &mut Tensor<T>, fan_in: usize, rng: &mut Rng) -> Result<()> {
    gaussian_fill(weight, 2.0 / fan_in as f64, fan_in, rng)
}

/// Fills `weight` with i.i.d. `N(0, 1 / fan_in)` samples.
pub fn lecun_init<T: Real>(weight: &mut Tensor<T>, fan_in: usize, rng: &mut Rng) -> Result<()> {
    gaussian_fill(weight, 1.0 / fan_in as f64, fan_in, rng)
}

/// Sets the multiplier closing every residual branch to `alpha`.
pub fn apply_skipinit<T: Real>(network: &mut Network<T>, alpha: f64) -> Result<()> {
    InitScheme::SkipInit { alpha }.validate()?;
    if network.blocks.is_empty() {
        return Err(Error::InvalidArgument("network has no residual blocks".into()));
    }
    for (i, block) in network.blocks.iter_mut().enumerate() {
        let m = block.branch_multiplier_mut().ok_or_else(|| {
            Error::InvalidArgument(format!("residual branch {i} does not end in a scalar multiplier"))
        })?;
        m.set(T::cast_f64(alpha));
    }
    Ok(())
}

/// Fixup: zero the last weighted layer of every branch and the classifier,
/// redraw the other branch layers from He init scaled by `d^(-1/(2m-2))`,
/// reset multipliers to 1 and scalar biases to 0.
pub fn apply_fixup<T: Real>(network: &mut Network<T>, d: usize, m: usize, rng: &mut Rng) -> Result<()> {
    if m < 2 {
        return Err(fixup_m_error(m));
    }
    if d == 0 || d != network.blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "Fixup d = {d} but the network has {} residual branches",
            network.blocks.len()
        )));
    }
    let scale = (d as f64).powf(-1.0 / (2.0 * m as f64 - 2.0));
    for (i, block) in network.blocks.iter_mut().enumerate() {
        let weighted = block.branch.iter().filter(|l| l.is_weighted()).count();
        if weighted != m {
            return Err(Error::InvalidArgument(format!(
                "branch {i} has {weighted} weighted layers, Fixup was asked for m = {m}"
            )));
        }
        if block.branch_multiplier_mut().is_none() {
            return Err(Error::InvalidArgument(format!("branch {i} has no closing scalar multiplier")));
        }
        let mut seen = 0;
        for layer in block.branch.iter_mut() {
            match layer {
                Layer::ScalarMultiplier(mult) => mult.set(T::one()),
                Layer::ScalarBias(b) => b.bias.value.fill(T::zero()),
                _ => {}
            }
            if let Some(bias) = layer.bias_mut() {
                bias.fill(T::zero());
            }
            if let Some((w, fan_in)) = layer.weight_mut() {
                seen += 1;
                if seen == m {
                    w.fill(T::zero());
                } else {
                    he_init(w, fan_in, rng)?;
                    *w = w.scale(T::cast_f64(scale));
                }
            }
        }
    }
    let classifier = network
        .classifier_mut()
        .ok_or_else(|| Error::InvalidArgument("Fixup needs a classification layer".into()))?;
    if let Some((w, _)) = classifier.weight_mut() {
        w.fill(T::zero());
    }
    if let Some(b) = classifier.bias_mut() {
        b.fill(T::zero());
    }
    for layer in network.layers_mut() {
        if let Layer::ScalarBias(b) = layer {
            b.bias.value.fill(T::zero());
        }
    }
    Ok(())
}

/// Which weighted layers a plain initializer (He, LeCun, Zero) rewrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamSelector {
    /// Every weighted layer inside residual branches.
    #[default]
    BranchWeights,
    /// The last weighted layer of each branch.
    BranchFinal,
    /// The readout layer.
    Classifier,
    /// Every weighted layer of the network.
    AllWeights,
}

/// An initializer and the parameters it applies to. SkipInit and Fixup act
/// on the whole network and ignore the selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitOverride {
    pub scheme: InitScheme,
    #[serde(default)]
    pub applies_to: ParamSelector,
}

fn fill_layer<T: Real>(layer: &mut Layer<T>, scheme: InitScheme, rng: &mut Rng) -> Result<()> {
    if let Some((w, fan_in)) = layer.weight_mut() {
        match scheme {
            InitScheme::He => he_init(w, fan_in, rng)?,
            InitScheme::LeCun => lecun_init(w, fan_in, rng)?,
            InitScheme::Zero => w.fill(T::zero()),
            InitScheme::SkipInit { .. } | InitScheme::Fixup { .. } => unreachable!("network-level scheme"),
        }
    }
    Ok(())
}

/// Applies `init` to `network`, which has `network.blocks.len()` branches.
pub fn apply_init<T: Real>(network: &mut Network<T>, init: InitOverride, rng: &mut Rng) -> Result<()> {
    init.scheme.validate()?;
    match init.scheme {
        InitScheme::SkipInit { alpha } => return apply_skipinit(network, alpha),
        InitScheme::Fixup { m } => {
            let d = network.blocks.len();
            return apply_fixup(network, d, m, rng);
        }
        _ => {}
    }
    match init.applies_to {
        ParamSelector::BranchWeights => {
            for block in network.blocks.iter_mut() {
                for layer in block.branch.iter_mut() {
                    fill_layer(layer, init.scheme, rng)?;
                }
            }
        }
        ParamSelector::BranchFinal => {
            for block in network.blocks.iter_mut() {
                if let Some(layer) = block.branch.iter_mut().rev().find(|l| l.is_weighted()) {
                    fill_layer(layer, init.scheme, rng)?;
                }
            }
        }
        ParamSelector::Classifier => {
            let layer = network
                .classifier_mut()
                .ok_or_else(|| Error::InvalidArgument("network has no classification layer".into()))?;
            fill_layer(layer, init.scheme, rng)?;
        }
        ParamSelector::AllWeights => {
            for layer in network.layers_mut() {
                fill_layer(layer, init.scheme, rng)?;
            }
        }
    }
    Ok(())
}
