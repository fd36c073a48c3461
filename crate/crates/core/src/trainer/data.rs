use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

fn default_eval_fraction() -> f64 {
    0.1
}

/// Where examples come from. Generated kinds draw train and eval splits
/// independently from the same distribution; file kinds split one file set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetKind {
    /// One isotropic unit Gaussian per class around a center whose
    /// coordinates are drawn from `N(0, separation²)`.
    GaussianBlobs { classes: usize, dim: usize, train: usize, eval: usize, separation: f64 },
    /// Interleaved 2-D spiral arms, one per class.
    Spirals { classes: usize, train: usize, eval: usize, noise: f64 },
    /// Gaussian features with uniformly random labels (a memorization task).
    RandomLabels { classes: usize, dim: usize, train: usize, eval: usize },
    /// IDX image and label files (the MNIST format).
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
        #[serde(default = "default_eval_fraction")]
        eval_fraction: f64,
        #[serde(default)]
        limit: Option<usize>,
    },
    /// CIFAR-10 binary batches: records of 1 label byte + 3072 CHW pixel bytes.
    CifarBinary {
        files: Vec<PathBuf>,
        #[serde(default = "default_eval_fraction")]
        eval_fraction: f64,
        #[serde(default)]
        limit: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// `[N, features...]`.
    pub x: Tensor<f64>,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub eval: Split,
    pub classes: usize,
    /// Per-example shape: `[features]`, or `[h, w, c]` for images.
    pub feature_shape: Vec<usize>,
}

impl Dataset {
    /// Same examples with every example flattened to one feature vector.
    pub fn flattened(&self) -> Result<Dataset> {
        let f: usize = self.feature_shape.iter().product();
        let flat = |s: &Split| -> Result<Split> { Ok(Split { x: s.x.clone().reshape(&[s.len(), f])?, y: s.y.clone() }) };
        Ok(Dataset { train: flat(&self.train)?, eval: flat(&self.eval)?, classes: self.classes, feature_shape: vec![f] })
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Builds the dataset and standardizes every feature with train-split
/// statistics (mean 0, variance 1 on the training split).
pub fn make_dataset(kind: &DatasetKind, seed: u64) -> Result<Dataset> {
    let rng = Rng::new(seed);
    let mut data = match kind {
        DatasetKind::GaussianBlobs { classes, dim, train, eval, separation } => {
            check_generated(*classes, *train, *eval)?;
            if *dim == 0 || !separation.is_finite() || *separation < 0.0 {
                return Err(invalid("blobs need dim ≥ 1 and a finite separation ≥ 0"));
            }
            let centers = Tensor::<f64>::gaussian(&[*classes, *dim], 0.0, *separation, &mut rng.substream(0))?;
            let draw = |n: usize, stream: u64| blobs(&centers, n, &mut rng.substream(stream));
            Dataset { train: draw(*train, 1)?, eval: draw(*eval, 2)?, classes: *classes, feature_shape: vec![*dim] }
        }
        DatasetKind::Spirals { classes, train, eval, noise } => {
            check_generated(*classes, *train, *eval)?;
            let draw = |n: usize, stream: u64| spirals(*classes, n, *noise, &mut rng.substream(stream));
            Dataset { train: draw(*train, 1)?, eval: draw(*eval, 2)?, classes: *classes, feature_shape: vec![2] }
        }
        DatasetKind::RandomLabels { classes, dim, train, eval } => {
            check_generated(*classes, *train, *eval)?;
            if *dim == 0 {
                return Err(invalid("random-labels needs dim ≥ 1"));
            }
            let draw = |n: usize, stream: u64| -> Result<Split> {
                let mut r = rng.substream(stream);
                let x = Tensor::gaussian(&[n, *dim], 0.0, 1.0, &mut r)?;
                Ok(Split { x, y: (0..n).map(|_| r.below(*classes)).collect() })
            };
            Dataset { train: draw(*train, 1)?, eval: draw(*eval, 2)?, classes: *classes, feature_shape: vec![*dim] }
        }
        DatasetKind::Idx { images, labels, classes, eval_fraction, limit } => {
            let (dims, pixels) = read_idx(&read(images)?)?;
            let (ldims, raw_labels) = read_idx(&read(labels)?)?;
            if dims.is_empty() || ldims.len() != 1 || ldims[0] != dims[0] {
                return Err(format_err(format!("image dims {dims:?} do not match label dims {ldims:?}")));
            }
            let y = raw_labels
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(format_err(format!("label {v} is not a class index")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let mut shape = dims[1..].to_vec();
            if shape.len() == 2 {
                shape.push(1);
            }
            let inferred = y.iter().max().map_or(0, |m| m + 1);
            let k = classes.unwrap_or(inferred);
            if inferred > k {
                return Err(format_err(format!("label {} outside the declared {k} classes", inferred - 1)));
            }
            split_examples(pixels, y, shape, k, *eval_fraction, *limit, &mut rng.substream(3))?
        }
        DatasetKind::CifarBinary { files, eval_fraction, limit } => {
            let mut pixels = Vec::new();
            let mut y = Vec::new();
            for f in files {
                read_cifar(&read(f)?, &mut pixels, &mut y)?;
            }
            split_examples(pixels, y, vec![32, 32, 3], 10, *eval_fraction, *limit, &mut rng.substream(3))?
        }
    };
    standardize(&mut data)?;
    Ok(data)
}

fn check_generated(classes: usize, train: usize, eval: usize) -> Result<()> {
    if classes < 2 {
        return Err(invalid(format!("need at least 2 classes, got {classes}")));
    }
    if train == 0 || eval == 0 {
        return Err(invalid("train and eval sizes must be positive"));
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn blobs(centers: &Tensor<f64>, n: usize, rng: &mut Rng) -> Result<Split> {
    let [k, dim] = *centers.shape() else { unreachable!("centers are K×D") };
    let noise = Tensor::<f64>::gaussian(&[n, dim], 0.0, 1.0, rng)?;
    let y: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut x = noise.into_vec();
    for (row, &c) in x.chunks_exact_mut(dim).zip(&y) {
        for (v, m) in row.iter_mut().zip(&centers.data()[c * dim..(c + 1) * dim]) {
            *v += m;
        }
    }
    Ok(Split { x: Tensor::from_vec(&[n, dim], x)?, y })
}

fn spirals(classes: usize, n: usize, noise: f64, rng: &mut Rng) -> Result<Split> {
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let t = rng.uniform();
        let theta = 4.0 * t + c as f64 * std::f64::consts::TAU / classes as f64;
        let (a, b) = rng.standard_normal_pair();
        x.push(t * theta.cos() + noise * a);
        x.push(t * theta.sin() + noise * b);
        y.push(c);
    }
    Ok(Split { x: Tensor::from_vec(&[n, 2], x)?, y })
}

fn split_examples(
    pixels: Vec<f64>,
    y: Vec<usize>,
    shape: Vec<usize>,
    classes: usize,
    eval_fraction: f64,
    limit: Option<usize>,
    rng: &mut Rng,
) -> Result<Dataset> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(invalid(format!("eval_fraction {eval_fraction} outside [0, 1)")));
    }
    let mut full_shape = vec![y.len()];
    full_shape.extend_from_slice(&shape);
    let all = Tensor::from_vec(&full_shape, pixels)?;
    let mut order = rng.permutation(y.len());
    if let Some(l) = limit {
        order.truncate(l);
    }
    let n_eval = ((order.len() as f64) * eval_fraction).round() as usize;
    if n_eval == 0 || n_eval >= order.len() {
        return Err(invalid(format!("cannot split {} examples with eval_fraction {eval_fraction}", order.len())));
    }
    let (eval_idx, train_idx) = order.split_at(n_eval);
    let take = |idx: &[usize]| -> Result<Split> {
        Ok(Split { x: all.gather_batch(idx)?, y: idx.iter().map(|&i| y[i]).collect() })
    };
    Ok(Dataset { train: take(train_idx)?, eval: take(eval_idx)?, classes, feature_shape: shape })
}

/// Per-feature standardization using training-split moments.
fn standardize(data: &mut Dataset) -> Result<()> {
    let f: usize = data.feature_shape.iter().product();
    let n = data.train.len() as f64;
    let mut mean = vec![0.0; f];
    for row in data.train.x.data().chunks_exact(f) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; f];
    for row in data.train.x.data().chunks_exact(f) {
        var.iter_mut().zip(row).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    let inv: Vec<f64> = var.iter().map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }).collect();
    for split in [&mut data.train, &mut data.eval] {
        for row in split.x.data_mut().chunks_exact_mut(f) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&inv) {
                *v = (*v - m) * s;
            }
        }
    }
    Ok(())
}

/// Parses an IDX file: two zero bytes, a type code, the rank, big-endian
/// `u32` extents, then big-endian values.
pub fn read_idx(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err("IDX magic must start with two zero bytes"));
    }
    let width = match bytes[2] {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        t => return Err(format_err(format!("unknown IDX type code 0x{t:02x}"))),
    };
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(format_err("IDX header truncated"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != count * width {
        return Err(format_err(format!("IDX body has {} bytes, dims {dims:?} need {}", body.len(), count * width)));
    }
    let values = body
        .chunks_exact(width)
        .map(|c| match bytes[2] {
            0x08 => c[0] as f64,
            0x09 => c[0] as i8 as f64,
            0x0B => i16::from_be_bytes([c[0], c[1]]) as f64,
            0x0C => i32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
            0x0D => f32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
            _ => f64::from_be_bytes(c.try_into().expect("8-byte chunk")),
        })
        .collect();
    Ok((dims, values))
}

const CIFAR_RECORD: usize = 1 + 3072;

/// Appends CIFAR-10 binary records, converting CHW pixels to HWC.
pub fn read_cifar(bytes: &[u8], pixels: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(format_err(format!("CIFAR file of {} bytes is not a whole number of records", bytes.len())));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(format_err(format!("CIFAR label {label} outside [0, 10)")));
        }
        labels.push(label);
        let img = &rec[1..];
        for p in 0..1024 {
            for c in 0..3 {
                pixels.push(img[c * 1024 + p] as f64);
            }
        }
    }
    Ok(())
}
