use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Spatial padding mode.
///
/// `Same` pads every spatial axis by `k - 1` in total, `floor((k - 1) / 2)`
/// before and the rest after, regardless of stride or input size, and then
/// runs a `Valid` convolution on the padded input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Resolved geometry of one NHWC convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [batch, in_h, in_w, in_c] = *input_shape else {
            return Err(Error::Shape(format!("conv input must be NHWC, got {input_shape:?}")));
        };
        let [kernel_h, kernel_w, k_in, out_c] = *kernel_shape else {
            return Err(Error::Shape(format!(
                "conv kernel must be kh×kw×Cin×Cout, got {kernel_shape:?}"
            )));
        };
        if k_in != in_c {
            return Err(Error::Shape(format!(
                "kernel expects {k_in} input channels, input has {in_c}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        let (pad_top, pad_bottom, pad_left, pad_right) = match padding {
            Padding::Valid => (0, 0, 0, 0),
            Padding::Same => {
                let (th, tw) = (kernel_h - 1, kernel_w - 1);
                (th / 2, th - th / 2, tw / 2, tw - tw / 2)
            }
        };
        let padded_h = in_h + pad_top + pad_bottom;
        let padded_w = in_w + pad_left + pad_right;
        if kernel_h > padded_h || kernel_w > padded_w {
            return Err(Error::Shape(format!(
                "kernel {kernel_h}×{kernel_w} larger than padded input {padded_h}×{padded_w}"
            )));
        }
        Ok(Self {
            batch,
            in_h,
            in_w,
            in_c,
            kernel_h,
            kernel_w,
            out_c,
            stride,
            pad_top,
            pad_bottom,
            pad_left,
            pad_right,
            out_h: (padded_h - kernel_h) / stride + 1,
            out_w: (padded_w - kernel_w) / stride + 1,
        })
    }

    /// Rows of the patch matrix: one per output pixel.
    pub fn patch_rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Columns of the patch matrix, ordered `(ky, kx, ci)` to line up with
    /// the kernel's row-major `kh × kw × Cin` leading axes.
    pub fn patch_cols(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_c
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.out_c]
    }

    /// Input coordinate hit by output row `oy` and kernel row `ky`, if not padding.
    #[inline]
    fn source(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(pad).filter(|&i| i < extent)
    }

    /// Unfolds the input into a `patch_rows × patch_cols` matrix.
    pub fn im2col<T: Real>(&self, input: &[T]) -> Vec<T> {
        let cols = self.patch_cols();
        let mut out = vec![T::zero(); self.patch_rows() * cols];
        let c = self.in_c;
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = ((b * self.out_h + oy) * self.out_w + ox) * cols;
                    for ky in 0..self.kernel_h {
                        let Some(iy) = self.source(oy, ky, self.pad_top, self.in_h) else {
                            continue;
                        };
                        for kx in 0..self.kernel_w {
                            let Some(ix) = self.source(ox, kx, self.pad_left, self.in_w) else {
                                continue;
                            };
                            let src = ((b * self.in_h + iy) * self.in_w + ix) * c;
                            let dst = row + (ky * self.kernel_w + kx) * c;
                            out[dst..dst + c].copy_from_slice(&input[src..src + c]);
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters patch gradients back
    /// onto the (unpadded) input.
    pub fn col2im<T: Real>(&self, cols_data: &[T]) -> Vec<T> {
        let cols = self.patch_cols();
        let c = self.in_c;
        let mut out = vec![T::zero(); self.batch * self.in_h * self.in_w * c];
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = ((b * self.out_h + oy) * self.out_w + ox) * cols;
                    for ky in 0..self.kernel_h {
                        let Some(iy) = self.source(oy, ky, self.pad_top, self.in_h) else {
                            continue;
                        };
                        for kx in 0..self.kernel_w {
                            let Some(ix) = self.source(ox, kx, self.pad_left, self.in_w) else {
                                continue;
                            };
                            let dst = ((b * self.in_h + iy) * self.in_w + ix) * c;
                            let src = row + (ky * self.kernel_w + kx) * c;
                            for (o, &g) in out[dst..dst + c].iter_mut().zip(&cols_data[src..src + c]) {
                                *o += g;
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// 2-D cross-correlation of an NHWC input with a `kh × kw × Cin × Cout` kernel.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let geo = Conv2dGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let patches = geo.im2col(input.data());
    let (rows, cols) = (geo.patch_rows(), geo.patch_cols());
    let mut out = vec![T::zero(); rows * geo.out_c];
    T::gemm(rows, cols, geo.out_c, &patches, [cols, 1], kernel.data(), [geo.out_c, 1], T::zero(), &mut out);
    Tensor::from_vec(&geo.output_shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn pointwise_kernel_scales() {
        let x = Tensor::<f64>::gaussian(&[2, 3, 3, 1], 0.0, 1.0, &mut Rng::new(1)).unwrap();
        let k = Tensor::<f64>::from_f64(&[1, 1, 1, 1], &[2.5]).unwrap();
        let y = conv2d(&x, &k, 1, Padding::Same).unwrap();
        assert_eq!(y.data(), x.scale(2.5).data());
    }

    #[test]
    fn same_stride_two_geometry() {
        let g = Conv2dGeometry::new(&[1, 5, 5, 1], &[3, 3, 1, 1], 2, Padding::Same).unwrap();
        assert_eq!((g.pad_top, g.pad_bottom, g.pad_left, g.pad_right), (1, 1, 1, 1));
        assert_eq!((g.out_h, g.out_w), (3, 3));
    }

    #[test]
    fn even_kernel_pads_more_after() {
        let g = Conv2dGeometry::new(&[1, 6, 6, 1], &[4, 4, 1, 1], 2, Padding::Same).unwrap();
        assert_eq!((g.pad_top, g.pad_bottom), (1, 2));
        assert_eq!(g.out_h, 3);
    }

    #[test]
    fn valid_and_errors() {
        let g = Conv2dGeometry::new(&[1, 5, 5, 1], &[3, 3, 1, 1], 1, Padding::Valid).unwrap();
        assert_eq!((g.out_h, g.out_w), (3, 3));
        assert!(Conv2dGeometry::new(&[1, 2, 2, 1], &[3, 3, 1, 1], 1, Padding::Valid).is_err());
        assert!(Conv2dGeometry::new(&[1, 5, 5, 2], &[3, 3, 1, 1], 1, Padding::Valid).is_err());
        assert!(Conv2dGeometry::new(&[1, 5, 5, 1], &[3, 3, 1, 1], 0, Padding::Valid).is_err());
    }

    #[test]
    fn stem_of_two_stride_two_convs_gives_eight() {
        let a = Conv2dGeometry::new(&[1, 32, 32, 3], &[3, 3, 3, 4], 2, Padding::Same).unwrap();
        let b = Conv2dGeometry::new(&[1, a.out_h, a.out_w, 4], &[3, 3, 4, 4], 2, Padding::Same).unwrap();
        assert_eq!((a.out_h, b.out_h, b.out_w), (16, 8, 8));
    }
}
