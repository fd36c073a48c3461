//! Builders for the reference residual networks and the block-variant zoo.
//!
//! A [`NetworkSpec`] without a classifier describes one of the plain
//! statistics networks:
//!
//! | family      | stem                                   | branch                  | init   |
//! |-------------|----------------------------------------|-------------------------|--------|
//! | `FcLinear`  | (BN) → linear                          | (BN) → linear           | LeCun  |
//! | `FcRelu`    | (BN) → ReLU → linear                   | (BN) → ReLU → linear    | He     |
//! | `ConvRelu`  | conv/2 → (BN) → ReLU → conv/2          | (BN) → ReLU → conv      | He     |
//!
//! With a classifier the fully connected stem is a single linear layer on
//! the raw features, and the head is (BN) → ReLU → (global mean pool) →
//! (dropout) → linear readout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{apply_fixup, apply_init, he_init, lecun_init, InitOverride};
use crate::layers::{
    BatchNorm, ConstantScale, Conv2d, Dropout, GlobalMeanPool, Layer, Linear, Relu, ScalarBias,
    ScalarMultiplier,
};
use crate::network::{Network, ResidualBlock};
use crate::tensor::{Padding, Real, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    FcLinear,
    FcRelu,
    ConvRelu,
}

/// How a residual block is normalized or scaled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BlockVariant {
    /// BN at the start of every branch.
    BnBranch,
    /// A learnable multiplier closing every branch, initialized to `alpha`.
    SkipInit { alpha: f64 },
    /// The merged block output is multiplied by `1/√2`.
    DivideBySqrt2,
    /// BN on the branch plus a BN applied after the skip and branch merge.
    BnBranchAndBnSkip,
    NoNorm,
    Fixup,
}

impl BlockVariant {
    pub fn label(&self) -> String {
        match self {
            BlockVariant::BnBranch => "bn-branch".into(),
            BlockVariant::SkipInit { alpha } => format!("skipinit({alpha})"),
            BlockVariant::DivideBySqrt2 => "divide-by-sqrt2".into(),
            BlockVariant::BnBranchAndBnSkip => "bn-branch-and-bn-skip".into(),
            BlockVariant::NoNorm => "no-norm".into(),
            BlockVariant::Fixup => "fixup".into(),
        }
    }
}

/// Parses a variant label: `bn-branch`, `skipinit` (α = 0), `skipinit(α)`
/// or `skipinit:α`, `divide-by-sqrt2`, `bn-branch-and-bn-skip` (also
/// `bn-skip`), `no-norm`, `fixup`.
impl std::str::FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let alpha = |a: &str| -> Result<Self> {
            let alpha: f64 =
                a.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad SkipInit alpha `{a}`")))?;
            Ok(BlockVariant::SkipInit { alpha })
        };
        if let Some(a) = s.strip_prefix("skipinit:") {
            return alpha(a);
        }
        if let Some(a) = s.strip_prefix("skipinit(").and_then(|r| r.strip_suffix(')')) {
            return alpha(a);
        }
        match s {
            "bn-branch" => Ok(BlockVariant::BnBranch),
            "skipinit" => Ok(BlockVariant::SkipInit { alpha: 0.0 }),
            "divide-by-sqrt2" => Ok(BlockVariant::DivideBySqrt2),
            "bn-branch-and-bn-skip" | "bn-skip" => Ok(BlockVariant::BnBranchAndBnSkip),
            "no-norm" => Ok(BlockVariant::NoNorm),
            "fixup" => Ok(BlockVariant::Fixup),
            other => Err(Error::InvalidArgument(format!("unknown block variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub classes: usize,
    /// Average over spatial positions before the readout (conv only).
    #[serde(default)]
    pub global_pool: bool,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub family: Family,
    /// Units of every hidden layer, or channels for the conv family.
    pub width: usize,
    /// Number of residual blocks.
    pub depth: usize,
    pub variant: BlockVariant,
    /// Adds BN to `SkipInit` / `DivideBySqrt2` branches; implied by the BN
    /// variants and ignored by `NoNorm` / `Fixup`.
    #[serde(default)]
    pub normalized: bool,
    /// Per-example input shape: `[features]`, or `[h, w, c]` for conv.
    pub input: Vec<usize>,
    #[serde(default)]
    pub classifier: Option<ClassifierSpec>,
    /// Strip every BN and put a single one before the readout.
    #[serde(default)]
    pub final_bn_only: bool,
    /// Drop probability of a dropout layer right before the readout.
    #[serde(default)]
    pub dropout: f64,
    /// Weighted layers per branch.
    #[serde(default = "one")]
    pub branch_layers: usize,
    /// Zero-initialized biases on hidden linear/conv layers.
    #[serde(default)]
    pub biases: bool,
    #[serde(default = "three")]
    pub kernel_size: usize,
    /// Initializer applied after the variant's own initialization.
    #[serde(default)]
    pub init: Option<InitOverride>,
}

impl NetworkSpec {
    pub fn new(family: Family, width: usize, depth: usize, variant: BlockVariant, input: Vec<usize>) -> Self {
        Self {
            family,
            width,
            depth,
            variant,
            normalized: false,
            input,
            classifier: None,
            final_bn_only: false,
            dropout: 0.0,
            branch_layers: 1,
            biases: false,
            kernel_size: 3,
            init: None,
        }
    }

    /// BN at the start of every branch layer.
    pub fn branch_bn(&self) -> bool {
        let bn = match self.variant {
            BlockVariant::BnBranch | BlockVariant::BnBranchAndBnSkip => true,
            BlockVariant::SkipInit { .. } | BlockVariant::DivideBySqrt2 => self.normalized,
            BlockVariant::NoNorm | BlockVariant::Fixup => false,
        };
        bn && !self.final_bn_only
    }

    fn is_fixup(&self) -> bool {
        self.variant == BlockVariant::Fixup
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.width < 2 {
            return bad(format!("width must be at least 2, got {}", self.width));
        }
        if self.branch_layers == 0 {
            return bad("branch_layers must be at least 1".into());
        }
        match (self.family, self.input.as_slice()) {
            (Family::FcLinear | Family::FcRelu, [f]) if *f > 0 => {}
            (Family::ConvRelu, &[h, w, c]) => {
                if h < 4 || w < 4 || c == 0 {
                    return bad(format!("image {h}×{w}×{c} too small for two stride-2 convolutions"));
                }
                if self.kernel_size == 0 {
                    return bad("kernel_size must be positive".into());
                }
            }
            (family, input) => return bad(format!("input shape {input:?} does not fit family {family:?}")),
        }
        if let BlockVariant::SkipInit { alpha } = self.variant {
            if !alpha.is_finite() {
                return bad(format!("SkipInit alpha must be finite, got {alpha}"));
            }
        }
        if self.is_fixup() && self.branch_layers < 2 {
            return bad(format!(
                "Fixup needs at least 2 weighted layers per branch, got branch_layers = {}",
                self.branch_layers
            ));
        }
        if let Some(init) = self.init {
            init.scheme.validate()?;
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match &self.classifier {
            None => {
                if self.final_bn_only || self.dropout > 0.0 || self.is_fixup() {
                    return bad("final_bn_only, dropout and Fixup need a classifier head".into());
                }
            }
            Some(c) => {
                if self.family == Family::FcLinear {
                    return bad("classifiers are built on the fc-relu or conv-relu families".into());
                }
                if c.classes < 2 {
                    return bad(format!("need at least 2 classes, got {}", c.classes));
                }
                if c.global_pool != (self.family == Family::ConvRelu) {
                    return bad("global_pool is required for conv classifiers and unsupported otherwise".into());
                }
            }
        }
        if self.final_bn_only && matches!(self.variant, BlockVariant::BnBranchAndBnSkip | BlockVariant::Fixup) {
            return bad(format!("final_bn_only cannot be combined with variant {}", self.variant.label()));
        }
        Ok(())
    }
}

struct Ctx<'r> {
    rng: &'r mut Rng,
}

impl Ctx<'_> {
    fn linear<T: Real>(&mut self, fan_in: usize, fan_out: usize, bias: bool, he: bool) -> Result<Layer<T>> {
        let mut l = Linear::new(fan_in, fan_out, bias)?;
        if he {
            he_init(&mut l.weight.value, fan_in, self.rng)?;
        } else {
            lecun_init(&mut l.weight.value, fan_in, self.rng)?;
        }
        Ok(Layer::Linear(l))
    }

    fn conv<T: Real>(&mut self, k: usize, cin: usize, cout: usize, stride: usize, bias: bool) -> Result<Layer<T>> {
        let mut c = Conv2d::new(k, cin, cout, stride, Padding::Same, bias)?;
        let fan_in = c.fan_in();
        he_init(&mut c.kernel.value, fan_in, self.rng)?;
        Ok(Layer::Conv2d(c))
    }
}

fn bn<T: Real>(channels: usize) -> Result<Layer<T>> {
    Ok(Layer::BatchNorm(BatchNorm::new(channels)?))
}

fn build_stem<T: Real>(spec: &NetworkSpec, ctx: &mut Ctx) -> Result<Vec<Layer<T>>> {
    let w = spec.width;
    let norm = spec.branch_bn();
    let mut stem = Vec::new();
    match spec.family {
        Family::FcLinear => {
            let f = spec.input[0];
            if norm {
                stem.push(bn(f)?);
            }
            stem.push(ctx.linear(f, w, spec.biases, false)?);
        }
        Family::FcRelu if spec.classifier.is_some() => {
            stem.push(ctx.linear(spec.input[0], w, spec.biases, false)?);
        }
        Family::FcRelu => {
            let f = spec.input[0];
            if norm {
                stem.push(bn(f)?);
            }
            stem.push(Layer::Relu(Relu::new()));
            stem.push(ctx.linear(f, w, spec.biases, true)?);
        }
        Family::ConvRelu => {
            let k = spec.kernel_size;
            stem.push(ctx.conv(k, spec.input[2], w, 2, spec.biases)?);
            if norm {
                stem.push(bn(w)?);
            }
            stem.push(Layer::Relu(Relu::new()));
            stem.push(ctx.conv(k, w, w, 2, spec.biases)?);
        }
    }
    Ok(stem)
}

fn build_block<T: Real>(spec: &NetworkSpec, ctx: &mut Ctx) -> Result<ResidualBlock<T>> {
    let w = spec.width;
    let norm = spec.branch_bn();
    let fixup = spec.is_fixup();
    let relu = spec.family != Family::FcLinear;
    let mut branch = Vec::new();
    for _ in 0..spec.branch_layers {
        if norm {
            branch.push(bn(w)?);
        }
        if fixup {
            branch.push(Layer::ScalarBias(ScalarBias::new()));
        }
        if relu {
            branch.push(Layer::Relu(Relu::new()));
            if fixup {
                branch.push(Layer::ScalarBias(ScalarBias::new()));
            }
        }
        branch.push(match spec.family {
            Family::FcLinear => ctx.linear(w, w, spec.biases, false)?,
            Family::FcRelu => ctx.linear(w, w, spec.biases, true)?,
            Family::ConvRelu => ctx.conv(spec.kernel_size, w, w, 1, spec.biases)?,
        });
    }
    match spec.variant {
        BlockVariant::SkipInit { alpha } => branch.push(Layer::ScalarMultiplier(ScalarMultiplier::new(alpha))),
        BlockVariant::Fixup => {
            branch.push(Layer::ScalarMultiplier(ScalarMultiplier::new(1.0)));
            branch.push(Layer::ScalarBias(ScalarBias::new()));
        }
        _ => {}
    }
    let mut block = ResidualBlock::new(branch);
    match spec.variant {
        BlockVariant::DivideBySqrt2 => {
            block.post.push(Layer::Scale(ConstantScale::new(T::cast_f64(std::f64::consts::FRAC_1_SQRT_2))))
        }
        BlockVariant::BnBranchAndBnSkip => block.post.push(bn(w)?),
        _ => {}
    }
    Ok(block)
}

fn build_head<T: Real>(spec: &NetworkSpec, classes: usize, ctx: &mut Ctx) -> Result<Vec<Layer<T>>> {
    let w = spec.width;
    let mut head = Vec::new();
    if spec.final_bn_only || spec.branch_bn() {
        head.push(bn(w)?);
    }
    head.push(Layer::Relu(Relu::new()));
    if spec.family == Family::ConvRelu {
        head.push(Layer::GlobalMeanPool(GlobalMeanPool::new()));
    }
    if spec.is_fixup() {
        head.push(Layer::ScalarBias(ScalarBias::new()));
    }
    if spec.dropout > 0.0 {
        let stream = Rng::new(ctx.rng.next_u64());
        head.push(Layer::Dropout(Dropout::new(spec.dropout, stream)?));
    }
    head.push(ctx.linear(w, classes, true, false)?);
    Ok(head)
}

/// Builds any valid spec. Weights are drawn from `rng` in forward order.
pub fn build<T: Real>(spec: &NetworkSpec, rng: &mut Rng) -> Result<Network<T>> {
    spec.validate()?;
    let mut ctx = Ctx { rng };
    let stem = build_stem(spec, &mut ctx)?;
    let blocks = (0..spec.depth).map(|_| build_block(spec, &mut ctx)).collect::<Result<Vec<_>>>()?;
    let head = match spec.classifier {
        Some(c) => build_head(spec, c.classes, &mut ctx)?,
        None => Vec::new(),
    };
    let mut net = Network { stem, blocks, head };
    if spec.is_fixup() {
        apply_fixup(&mut net, spec.depth, spec.branch_layers, ctx.rng)?;
    }
    if let Some(init) = spec.init {
        apply_init(&mut net, init, ctx.rng)?;
    }
    Ok(net)
}

/// Fully connected linear residual network on `input_dim` features.
pub fn build_fc_linear<T: Real>(
    input_dim: usize,
    width: usize,
    depth: usize,
    normalized: bool,
    rng: &mut Rng,
) -> Result<Network<T>> {
    let variant = if normalized { BlockVariant::BnBranch } else { BlockVariant::NoNorm };
    build(&NetworkSpec::new(Family::FcLinear, width, depth, variant, vec![input_dim]), rng)
}

/// Normalized fully connected ReLU residual network.
pub fn build_fc_relu<T: Real>(input_dim: usize, width: usize, depth: usize, rng: &mut Rng) -> Result<Network<T>> {
    build(&NetworkSpec::new(Family::FcRelu, width, depth, BlockVariant::BnBranch, vec![input_dim]), rng)
}

/// Normalized convolutional ReLU residual network on `[h, w, c]` images.
pub fn build_conv_resnet<T: Real>(image: [usize; 3], channels: usize, depth: usize, rng: &mut Rng) -> Result<Network<T>> {
    build(&NetworkSpec::new(Family::ConvRelu, channels, depth, BlockVariant::BnBranch, image.to_vec()), rng)
}

/// `spec` with a `classes`-way readout attached.
pub fn build_classifier<T: Real>(spec: &NetworkSpec, classes: usize, rng: &mut Rng) -> Result<Network<T>> {
    let mut spec = spec.clone();
    spec.classifier = Some(ClassifierSpec { classes, global_pool: spec.family == Family::ConvRelu });
    build(&spec, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{softmax_xent, Mode, Module};
    use crate::tensor::Tensor;

    fn fc_classifier(variant: BlockVariant, depth: usize) -> NetworkSpec {
        let mut s = NetworkSpec::new(Family::FcRelu, 6, depth, variant, vec![5]);
        s.classifier = Some(ClassifierSpec { classes: 4, global_pool: false });
        s
    }

    fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::gaussian(shape, 0.0, 1.0, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn fc_linear_shapes_and_layout() {
        let mut net = build_fc_linear::<f64>(10, 7, 1, false, &mut Rng::new(1)).unwrap();
        assert_eq!(net.forward(&input(&[3, 10], 2), Mode::Train).unwrap().shape(), &[3, 7]);
        assert!(!net.has_batchnorm());
        let mut normed = build_fc_linear::<f64>(10, 7, 25, true, &mut Rng::new(1)).unwrap();
        assert_eq!(normed.depth(), 25);
        assert_eq!(normed.batchnorms_mut().len(), 26);
        assert_eq!(normed.stem[0].name(), "batchnorm");
        assert_eq!(normed.blocks[0].branch.iter().map(|l| l.name()).collect::<Vec<_>>(), ["batchnorm", "linear"]);
    }

    #[test]
    fn fc_relu_zero_input_passes_through() {
        let mut net = build_fc_relu::<f64>(4, 4, 1, &mut Rng::new(3)).unwrap();
        let zeros = Tensor::<f64>::zeros(&[2, 4]).unwrap();
        let y = net.blocks[0].forward(&zeros, Mode::Train).unwrap();
        assert_eq!(y, zeros);
        assert_eq!(net.blocks[0].branch.iter().map(|l| l.name()).collect::<Vec<_>>(), ["batchnorm", "relu", "linear"]);
    }

    #[test]
    fn conv_stem_reduces_to_eight_and_blocks_keep_shape() {
        let mut net = build_conv_resnet::<f64>([32, 32, 3], 4, 3, &mut Rng::new(4)).unwrap();
        let mut shapes = Vec::new();
        net.forward_probed(&input(&[2, 32, 32, 3], 5), Mode::Train, false, &mut |p| {
            shapes.push((p.skip.shape().to_vec(), p.output.shape().to_vec()))
        })
        .unwrap();
        for (skip, out) in shapes {
            assert_eq!(skip, [2, 8, 8, 4]);
            assert_eq!(out, [2, 8, 8, 4]);
        }
        let small = NetworkSpec::new(Family::ConvRelu, 4, 1, BlockVariant::BnBranch, vec![3, 3, 3]);
        assert!(build::<f64>(&small, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn skipinit_zero_blocks_are_identity() {
        let mut net = build::<f64>(&fc_classifier(BlockVariant::SkipInit { alpha: 0.0 }, 5), &mut Rng::new(6)).unwrap();
        let x = input(&[3, 5], 7);
        let mut ok = true;
        net.forward_probed(&x, Mode::Train, false, &mut |p| ok &= p.skip == p.output).unwrap();
        assert!(ok);
    }

    #[test]
    fn exact_parameter_counts() {
        let (p, w, d, k) = (5, 6, 3, 4);
        let mut bn = build::<f64>(&fc_classifier(BlockVariant::BnBranch, d), &mut Rng::new(1)).unwrap();
        let mut si = build::<f64>(&fc_classifier(BlockVariant::SkipInit { alpha: 0.0 }, d), &mut Rng::new(1)).unwrap();
        let shared = p * w + d * w * w + w * k + k;
        assert_eq!(bn.param_count(), shared + d * 2 * w + 2 * w);
        assert_eq!(si.param_count(), shared + d);
    }

    #[test]
    fn fixup_starts_at_log_k() {
        let mut spec = fc_classifier(BlockVariant::Fixup, 4);
        spec.branch_layers = 2;
        let mut net = build::<f64>(&spec, &mut Rng::new(8)).unwrap();
        let logits = net.forward(&input(&[6, 5], 9), Mode::Train).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let (loss, _) = softmax_xent(&logits, &[0, 1, 2, 3, 0, 1]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        spec.branch_layers = 1;
        assert!(build::<f64>(&spec, &mut Rng::new(8)).is_err());
    }

    #[test]
    fn zeroed_branch_leaves_identity_skip() {
        for variant in [
            BlockVariant::BnBranch,
            BlockVariant::NoNorm,
            BlockVariant::SkipInit { alpha: 1.0 },
            BlockVariant::Fixup,
        ] {
            let mut spec = fc_classifier(variant, 2);
            spec.branch_layers = 2;
            let mut net = build::<f64>(&spec, &mut Rng::new(10)).unwrap();
            for block in net.blocks.iter_mut() {
                for layer in block.branch.iter_mut() {
                    if let Some((w, _)) = layer.weight_mut() {
                        w.fill(0.0);
                    }
                }
            }
            let x = input(&[4, 6], 11);
            assert_eq!(net.blocks[1].forward(&x, Mode::Train).unwrap(), x, "{}", variant.label());
        }
    }

    #[test]
    fn invalid_combinations() {
        let mut s = NetworkSpec::new(Family::FcLinear, 4, 2, BlockVariant::NoNorm, vec![3]);
        s.classifier = Some(ClassifierSpec { classes: 3, global_pool: false });
        assert!(s.validate().is_err());
        let mut s = fc_classifier(BlockVariant::BnBranchAndBnSkip, 2);
        s.final_bn_only = true;
        assert!(s.validate().is_err());
        let s = NetworkSpec::new(Family::FcRelu, 4, 0, BlockVariant::NoNorm, vec![3]);
        assert!(s.validate().is_err());
        let s = NetworkSpec::new(Family::FcRelu, 4, 2, BlockVariant::NoNorm, vec![3, 3, 3]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn final_bn_only_has_a_single_bn() {
        let mut s = fc_classifier(BlockVariant::BnBranch, 3);
        s.final_bn_only = true;
        let mut net = build::<f64>(&s, &mut Rng::new(12)).unwrap();
        assert_eq!(net.batchnorms_mut().len(), 1);
        assert!(net.head.iter().any(|l| l.name() == "batchnorm"));
    }

    #[test]
    fn spec_json_round_trip() {
        let mut s = fc_classifier(BlockVariant::SkipInit { alpha: 0.125 }, 64);
        s.dropout = 0.6;
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"kind\":\"skip-init\""));
        assert_eq!(serde_json::from_str::<NetworkSpec>(&text).unwrap(), s);
        assert!(serde_json::from_str::<NetworkSpec>(&text.replace("\"depth\"", "\"depht\"")).is_err());
    }

    #[test]
    fn variant_labels_parse_back() {
        for v in [
            BlockVariant::BnBranch,
            BlockVariant::SkipInit { alpha: 0.0 },
            BlockVariant::SkipInit { alpha: 0.125 },
            BlockVariant::DivideBySqrt2,
            BlockVariant::BnBranchAndBnSkip,
            BlockVariant::NoNorm,
            BlockVariant::Fixup,
        ] {
            assert_eq!(v.label().parse::<BlockVariant>().unwrap(), v);
        }
        assert_eq!("skipinit:1".parse::<BlockVariant>().unwrap(), BlockVariant::SkipInit { alpha: 1.0 });
        assert!("skipinit:x".parse::<BlockVariant>().is_err());
        assert!("resnet".parse::<BlockVariant>().is_err());
    }
}
