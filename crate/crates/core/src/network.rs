//! Residual network container: a stem, a stack of residual blocks and a head.

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, GhostSize, Layer, Mode, Module, ParamMut, ScalarMultiplier};
use crate::tensor::{Real, Tensor};

fn run_forward<T: Real>(layers: &mut [Layer<T>], x: &Tensor<T>, mode: Mode, keep: bool) -> Result<Tensor<T>> {
    let mut h = x.clone();
    for layer in layers.iter_mut() {
        h = layer.forward(&h, mode)?;
        if !keep {
            layer.clear_cache();
        }
    }
    Ok(h)
}

fn run_backward<T: Real>(layers: &mut [Layer<T>], grad: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = grad.clone();
    for layer in layers.iter_mut().rev() {
        g = layer.backward(&g)?;
    }
    Ok(g)
}

/// `y = post(x + branch(x))`; `post` is empty for an identity merge.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub branch: Vec<Layer<T>>,
    pub post: Vec<Layer<T>>,
}

/// Activations seen by one block during a probed forward pass.
pub struct BlockProbe<'a, T> {
    pub index: usize,
    /// Block input, i.e. the signal on the skip path.
    pub skip: &'a Tensor<T>,
    /// Output of the residual branch before the merge.
    pub branch: &'a Tensor<T>,
    /// Block output after the merge and any post-merge layers.
    pub output: &'a Tensor<T>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new(branch: Vec<Layer<T>>) -> Self {
        Self { branch, post: Vec::new() }
    }

    /// The multiplier closing the branch, if the branch ends in one
    /// (possibly followed by a scalar bias).
    pub fn branch_multiplier_mut(&mut self) -> Option<&mut ScalarMultiplier<T>> {
        self.branch.iter_mut().rev().take(2).find_map(|l| match l {
            Layer::ScalarMultiplier(m) => Some(m),
            _ => None,
        })
    }

    fn forward_parts(&mut self, x: &Tensor<T>, mode: Mode, keep: bool) -> Result<(Tensor<T>, Tensor<T>)> {
        let f = run_forward(&mut self.branch, x, mode, keep)?;
        let merged = x.add(&f).map_err(|e| match e {
            Error::Shape(m) => Error::Shape(format!("residual branch changes the shape: {m}")),
            other => other,
        })?;
        let y = run_forward(&mut self.post, &merged, mode, keep)?;
        Ok((f, y))
    }
}

impl<T: Real> Module<T> for ResidualBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_parts(x, mode, true)?.1)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = run_backward(&mut self.post, grad_out)?;
        let mut through_branch = run_backward(&mut self.branch, &g)?;
        through_branch.add_assign(&g)?;
        Ok(through_branch)
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        self.branch.iter_mut().chain(self.post.iter_mut()).flat_map(|l| l.params_mut()).collect()
    }

    fn clear_cache(&mut self) {
        self.branch.iter_mut().chain(self.post.iter_mut()).for_each(|l| l.clear_cache());
    }
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    pub stem: Vec<Layer<T>>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub head: Vec<Layer<T>>,
}

impl<T: Real> Network<T> {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.forward_probed(x, mode, true, &mut |_| {})
    }

    /// Forward pass reporting each block's skip, branch and output signals.
    /// With `keep_cache == false` every layer drops its cache right away, so
    /// no backward is possible but peak memory stays at one layer.
    pub fn forward_probed(
        &mut self,
        x: &Tensor<T>,
        mode: Mode,
        keep_cache: bool,
        probe: &mut dyn FnMut(BlockProbe<'_, T>),
    ) -> Result<Tensor<T>> {
        let mut h = run_forward(&mut self.stem, x, mode, keep_cache)?;
        for (index, block) in self.blocks.iter_mut().enumerate() {
            let (branch, y) = block.forward_parts(&h, mode, keep_cache)?;
            probe(BlockProbe { index, skip: &h, branch: &branch, output: &y });
            h = y;
        }
        run_forward(&mut self.head, &h, mode, keep_cache)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = run_backward(&mut self.head, grad)?;
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        run_backward(&mut self.stem, &g)
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out: Vec<ParamMut<'_, T>> = self.stem.iter_mut().flat_map(|l| l.params_mut()).collect();
        for block in self.blocks.iter_mut() {
            out.extend(block.params_mut());
        }
        out.extend(self.head.iter_mut().flat_map(|l| l.params_mut()));
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.value.len()).sum()
    }

    pub fn clear_cache(&mut self) {
        self.layers_mut().for_each(|l| l.clear_cache());
    }

    /// Every layer in forward order.
    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<T>> {
        self.stem
            .iter_mut()
            .chain(self.blocks.iter_mut().flat_map(|b| b.branch.iter_mut().chain(b.post.iter_mut())))
            .chain(self.head.iter_mut())
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        self.layers_mut()
            .filter_map(|l| match l {
                Layer::BatchNorm(bn) => Some(bn),
                _ => None,
            })
            .collect()
    }

    pub fn has_batchnorm(&mut self) -> bool {
        !self.batchnorms_mut().is_empty()
    }

    pub fn set_ghost(&mut self, ghost: GhostSize) {
        self.batchnorms_mut().into_iter().for_each(|bn| bn.ghost = ghost);
    }

    /// The last weighted layer of the head (the classifier readout).
    pub fn classifier_mut(&mut self) -> Option<&mut Layer<T>> {
        self.head.iter_mut().rev().find(|l| l.is_weighted())
    }
}

impl<T: Real> Module<T> for Network<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Network::forward(self, x, mode)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        Network::backward(self, grad_out)
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        Network::params_mut(self)
    }

    fn clear_cache(&mut self) {
        Network::clear_cache(self)
    }
}
