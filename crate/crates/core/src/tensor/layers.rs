//! Parameterized layers. Each layer only holds [`ParamId`]s; values live in a
//! [`ParamStore`] so several precisions can share one architecture.

use rand::Rng;

use super::{Float, Graph, Padding, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Fully connected layer `y = xW + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add_uniform(&format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng);
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// 2-D convolution, weight `[out, in, kh, kw]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel.0 * kernel.1;
        let weight = store.add_uniform(&format!("{name}.weight"), &[out_ch, in_ch, kernel.0, kernel.1], fan_in, rng);
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self { weight, bias, padding }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.padding)
    }
}

/// Stride-1 transposed convolution, weight `[in, out, kh, kw]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: Padding,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        let fan_in = out_ch * kernel.0 * kernel.1;
        let weight = store.add_uniform(&format!("{name}.weight"), &[in_ch, out_ch, kernel.0, kernel.1], fan_in, rng);
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self { weight, bias, padding }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv_transpose2d(x, w, Some(b), self.padding)
    }
}

/// Per-feature normalization with learnable gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.add(&format!("{name}.gain"), Tensor::full(&[dim], T::one()));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias, eps: 1e-5 }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Channel-wise batch normalization for `[B, C, H, W]` inputs.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batch_norm2d(x, gamma, beta, self.running_mean, self.running_var, self.momentum, self.eps)
    }
}
