//! Dense rank-4 tensors in (batch, channel, height, width) layout.
//!
//! Everything in the network — images, features, convolution weights,
//! per-channel affine parameters — is a `Tensor4` of `f64` in row-major
//! order. Convolution weights use the shape (out_channels, in_channels,
//! k, k); per-channel vectors such as biases or PReLU slopes are stored
//! as (1, C, 1, 1).

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape4 { batch, channels, height, width }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 { shape, data: vec![0.0; shape.numel()] }
    }

    pub fn full(shape: Shape4, value: f64) -> Self {
        Tensor4 { shape, data: vec![value; shape.numel()] }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape.as_array(),
                shape.numel()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(b, c, y, x);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor4 {
        Tensor4 { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, c: f64) -> Tensor4 {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_same_shape(&self, other: &Tensor4, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.as_array().to_vec(),
                rhs: other.shape.as_array().to_vec(),
            });
        }
        Ok(())
    }

    pub fn ew_add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.check_same_shape(other, "ew_add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor4 { shape: self.shape, data })
    }

    pub fn ew_sub(&self, other: &Tensor4) -> Result<Tensor4> {
        self.check_same_shape(other, "ew_sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor4 { shape: self.shape, data })
    }

    pub fn ew_mul(&self, other: &Tensor4) -> Result<Tensor4> {
        self.check_same_shape(other, "ew_mul")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Tensor4 { shape: self.shape, data })
    }

    /// Accumulate `other` into self, used for gradient accumulation.
    pub fn add_assign(&mut self, other: &Tensor4) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }
}

/// Convolution parameters: a weight bank shaped (out_channels,
/// in_channels_per_group, k, k), a per-output-channel bias, and the
/// grouping. `groups == 1` is dense convolution, `groups == channels`
/// is depthwise. Stride is always 1 and padding is (k-1)/2 so spatial
/// size is preserved; kernels must be odd.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub weights: Tensor4,
    pub bias: Vec<f64>,
    pub groups: usize,
}

impl ConvKernel {
    pub fn new(weights: Tensor4, bias: Vec<f64>, groups: usize) -> Result<Self> {
        let s = weights.shape();
        if s.height != s.width || s.height % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel must be square with odd size, got {}x{}",
                s.height, s.width
            )));
        }
        if bias.len() != s.batch {
            return Err(Error::invalid(format!(
                "bias length {} does not match out_channels {}",
                bias.len(),
                s.batch
            )));
        }
        if groups == 0 || s.batch % groups != 0 {
            return Err(Error::invalid(format!(
                "out_channels {} not divisible by groups {}",
                s.batch, groups
            )));
        }
        Ok(ConvKernel { weights, bias, groups })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().batch
    }

    /// Total input channels expected (per-group channels times groups).
    pub fn in_channels(&self) -> usize {
        self.weights.shape().channels * self.groups
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape().height
    }

    pub fn padding(&self) -> usize {
        (self.kernel_size() - 1) / 2
    }

    pub fn param_count(&self) -> usize {
        self.weights.numel() + self.bias.len()
    }
}
