//! Learnable parameters: a named value tensor plus an accumulated
//! gradient of the same shape. Every parameter gets a process-unique id
//! at creation; the tape uses the id to route gradients back after a
//! backward pass.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Shape4, Tensor4};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
pub struct Param {
    id: u64,
    pub name: String,
    pub value: Tensor4,
    pub grad: Tensor4,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor4) -> Self {
        let grad = Tensor4::zeros(value.shape());
        Param {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Kaiming-style init for convolution weights: zero-mean normal with
/// variance 2/fan_in, suiting the PReLU nonlinearity.
pub fn init_conv_weight(
    name: impl Into<String>,
    shape: Shape4,
    rng: &mut ChaCha8Rng,
) -> Param {
    let fan_in = shape.channels * shape.height * shape.width;
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    let data = (0..shape.numel()).map(|_| dist.sample(rng)).collect();
    Param::new(name, Tensor4::from_vec(shape, data).expect("shape matches"))
}

pub fn init_zeros(name: impl Into<String>, shape: Shape4) -> Param {
    Param::new(name, Tensor4::zeros(shape))
}

pub fn init_const(name: impl Into<String>, shape: Shape4, value: f64) -> Param {
    Param::new(name, Tensor4::full(shape, value))
}

/// Uniform jitter used in tests that want asymmetric but bounded params.
pub fn init_uniform(
    name: impl Into<String>,
    shape: Shape4,
    lo: f64,
    hi: f64,
    rng: &mut ChaCha8Rng,
) -> Param {
    let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Param::new(name, Tensor4::from_vec(shape, data).expect("shape matches"))
}
