//! Small building blocks shared by the fusion modules and the denoiser:
//! convolution layers with learnable weight/bias and the parameter
//! walking used by the optimizer and checkpointing.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::param::{init_const, init_conv_weight, init_zeros, Param};
use crate::tape::{Tape, Var};
use crate::tensor::Shape4;

/// Anything that owns learnable parameters. Collection order is the
/// structural order, stable across runs, and is what the checkpoint
/// format and optimizer state rely on.
pub trait ParamSet {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>);

    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        self.collect(&mut v);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        self.collect_mut(&mut v);
        v
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Convolution with learnable weight and bias; stride 1, same padding.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Param,
    pub bias: Param,
    pub groups: usize,
}

impl ConvLayer {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(kernel_size % 2 == 1, "kernel size must be odd");
        assert!(in_channels % groups == 0 && out_channels % groups == 0);
        let wshape = Shape4::new(out_channels, in_channels / groups, kernel_size, kernel_size);
        ConvLayer {
            weight: init_conv_weight(format!("{name}.weight"), wshape, rng),
            bias: init_zeros(format!("{name}.bias"), Shape4::new(1, out_channels, 1, 1)),
            groups,
        }
    }

    pub fn depthwise(name: &str, channels: usize, kernel_size: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(name, channels, channels, kernel_size, channels, rng)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv2d(x, w, b, self.groups)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape().batch
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.value.shape().height
    }

    /// Multiply-accumulate count for one forward pass at the given
    /// spatial size (bias counted as one MAC per output element).
    pub fn macs(&self, height: usize, width: usize) -> usize {
        let ws = self.weight.value.shape();
        height * width * ws.batch * (ws.channels * ws.height * ws.width + 1)
    }
}

impl ParamSet for ConvLayer {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Per-channel LayerNorm affine + PReLU slope, the tail of every block.
#[derive(Debug, Clone)]
pub struct NormAct {
    pub gamma: Param,
    pub beta: Param,
    pub alpha: Param,
}

impl NormAct {
    pub fn new(name: &str, channels: usize) -> Self {
        let cshape = Shape4::new(1, channels, 1, 1);
        NormAct {
            gamma: init_const(format!("{name}.gamma"), cshape, 1.0),
            beta: init_zeros(format!("{name}.beta"), cshape),
            alpha: init_const(format!("{name}.alpha"), cshape, 0.25),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        let a = tape.param(&self.alpha);
        let normed = tape.layer_norm(x, g, b)?;
        tape.prelu(normed, a)
    }
}

impl ParamSet for NormAct {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.gamma);
        out.push(&self.beta);
        out.push(&self.alpha);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
        out.push(&mut self.alpha);
    }
}
