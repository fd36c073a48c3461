use super::{column_sums, Mode, Module, Param, ParamKind, ParamMut};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Fully connected layer `y = x·W (+ b)` with `W` stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    /// Zero-initialized layer; initializers fill the weights afterwards.
    pub fn new(fan_in: usize, fan_out: usize, with_bias: bool) -> Result<Self> {
        let weight = Param::new(Tensor::zeros(&[fan_in, fan_out])?);
        let bias = if with_bias { Some(Param::new(Tensor::zeros(&[fan_out])?)) } else { None };
        Ok(Self { weight, bias, input: None })
    }

    pub fn from_weight(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::Shape(format!("linear weight must be rank 2, got {:?}", weight.shape())));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[1]] {
                return Err(Error::Shape(format!("bias {:?} vs weight {:?}", b.shape(), weight.shape())));
            }
        }
        Ok(Self { weight: Param::new(weight), bias: bias.map(Param::new), input: None })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[1]
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        if x.rank() != 2 || x.shape()[1] != self.fan_in() {
            return Err(Error::Shape(format!(
                "linear expects N×{}, got {:?}",
                self.fan_in(),
                x.shape()
            )));
        }
        let mut y = x.matmul(&self.weight.value)?;
        if let Some(b) = &self.bias {
            let out = self.fan_out();
            for row in y.data_mut().chunks_exact_mut(out) {
                for (v, &bv) in row.iter_mut().zip(b.value.data()) {
                    *v += bv;
                }
            }
        }
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or(Error::MissingCache("linear"))?;
        let (n, fan_in, fan_out) = (x.shape()[0], self.fan_in(), self.fan_out());
        if grad_out.shape() != [n, fan_out] {
            return Err(Error::Shape(format!(
                "linear grad_out {:?}, expected [{n}, {fan_out}]",
                grad_out.shape()
            )));
        }
        // dW += xᵀ·g
        T::gemm(
            fan_in,
            n,
            fan_out,
            x.data(),
            [1, fan_in],
            grad_out.data(),
            [fan_out, 1],
            T::one(),
            self.weight.grad.data_mut(),
        );
        if let Some(b) = &mut self.bias {
            for (gb, s) in b.grad.data_mut().iter_mut().zip(column_sums(grad_out.data(), fan_out)) {
                *gb += T::cast_f64(s);
            }
        }
        // dx = g·Wᵀ
        let mut dx = vec![T::zero(); n * fan_in];
        T::gemm(
            n,
            fan_out,
            fan_in,
            grad_out.data(),
            [fan_out, 1],
            self.weight.value.data(),
            [1, fan_out],
            T::zero(),
            &mut dx,
        );
        Tensor::from_vec(&[n, fan_in], dx)
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = vec![self.weight.view("weight", ParamKind::Weight)];
        if let Some(b) = &mut self.bias {
            out.push(b.view("bias", ParamKind::Bias));
        }
        out
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }
}
