use super::{column_sums, Mode, Module, Param, ParamKind, ParamMut};
use crate::error::{Error, Result};
use crate::tensor::{Conv2dGeometry, Padding, Real, Tensor};

/// NHWC convolution layer (cross-correlation) backed by im2col + GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub kernel: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: Padding,
    // The input, not the patch matrix, is cached: patches are `kh·kw` times larger.
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
        with_bias: bool,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        let kernel = Param::new(Tensor::zeros(&[kernel_size, kernel_size, in_channels, out_channels])?);
        let bias = if with_bias { Some(Param::new(Tensor::zeros(&[out_channels])?)) } else { None };
        Ok(Self { kernel, bias, stride, padding, input: None })
    }

    pub fn from_kernel(kernel: Tensor<T>, stride: usize, padding: Padding) -> Result<Self> {
        if kernel.rank() != 4 {
            return Err(Error::Shape(format!("kernel must be rank 4, got {:?}", kernel.shape())));
        }
        Ok(Self { kernel: Param::new(kernel), bias: None, stride, padding, input: None })
    }

    /// `kh · kw · Cin`.
    pub fn fan_in(&self) -> usize {
        let s = self.kernel.value.shape();
        s[0] * s[1] * s[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.value.shape()[3]
    }

    fn geometry(&self, input_shape: &[usize]) -> Result<Conv2dGeometry> {
        Conv2dGeometry::new(input_shape, self.kernel.value.shape(), self.stride, self.padding)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let geo = self.geometry(x.shape())?;
        let patches = geo.im2col(x.data());
        let (rows, cols, oc) = (geo.patch_rows(), geo.patch_cols(), geo.out_c);
        let mut out = vec![T::zero(); rows * oc];
        T::gemm(rows, cols, oc, &patches, [cols, 1], self.kernel.value.data(), [oc, 1], T::zero(), &mut out);
        if let Some(b) = &self.bias {
            for row in out.chunks_exact_mut(oc) {
                for (v, &bv) in row.iter_mut().zip(b.value.data()) {
                    *v += bv;
                }
            }
        }
        self.input = Some(x.clone());
        Tensor::from_vec(&geo.output_shape(), out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or(Error::MissingCache("conv2d"))?;
        let geo = self.geometry(x.shape())?;
        if grad_out.shape() != geo.output_shape() {
            return Err(Error::Shape(format!(
                "conv grad_out {:?}, expected {:?}",
                grad_out.shape(),
                geo.output_shape()
            )));
        }
        let (rows, cols, oc) = (geo.patch_rows(), geo.patch_cols(), geo.out_c);
        let patches = geo.im2col(x.data());
        // dK += patchesᵀ·g
        T::gemm(cols, rows, oc, &patches, [1, cols], grad_out.data(), [oc, 1], T::one(), self.kernel.grad.data_mut());
        if let Some(b) = &mut self.bias {
            for (gb, s) in b.grad.data_mut().iter_mut().zip(column_sums(grad_out.data(), oc)) {
                *gb += T::cast_f64(s);
            }
        }
        // dpatches = g·Kᵀ, folded back onto the input
        let mut dpatches = patches;
        T::gemm(rows, oc, cols, grad_out.data(), [oc, 1], self.kernel.value.data(), [1, oc], T::zero(), &mut dpatches);
        Tensor::from_vec(x.shape(), geo.col2im(&dpatches))
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = vec![self.kernel.view("kernel", ParamKind::Weight)];
        if let Some(b) = &mut self.bias {
            out.push(b.view("bias", ParamKind::Bias));
        }
        out
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }
}
