//! Equivariant layers over stacked feature maps.
//!
//! Layer structs work on batched tensors shaped `[N, C, G, H, W]` where the
//! orientation axis `G` is 8 for group feature maps and 1 for planar maps.
//! The same code path with `G = 1` gives the plain CNN layers of the regular
//! twin network.
//!
//! The free functions (`group_input_conv`, `group_hidden_conv`, ...) are the
//! single-item forms used directly by tests and tools.

mod conv;
mod kernel;
mod norm;
mod ops;

pub use conv::{expansion_indices, group_hidden_conv, group_input_conv, GroupConv};
pub use kernel::{transform_kernel_g, transform_kernel_z2, KernelG, KernelZ2};
pub use norm::{group_batchnorm, BatchNormState, GroupBatchNorm};
pub(crate) use ops::text_enum;
pub use ops::{
    group_downsample, group_output_pool, group_relu, group_skip, group_upsample, record_relu_signs, skip_backward,
    DownsampleMethod, GroupDownsample, OutputPool, Relu, SkipMode, Upsample, UpsampleMode,
};

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How a forward pass runs: normalization mode and whether to keep the
/// activations needed by `backward`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ctx {
    pub mode: Mode,
    pub cache: bool,
}

impl Ctx {
    pub const TRAIN: Ctx = Ctx {
        mode: Mode::Train,
        cache: true,
    };
    pub const EVAL: Ctx = Ctx {
        mode: Mode::Eval,
        cache: false,
    };
    /// Eval-mode normalization with caching on (used for gradient checks of inference).
    pub const EVAL_CACHED: Ctx = Ctx {
        mode: Mode::Eval,
        cache: true,
    };
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

pub trait Layer<F: Scalar> {
    fn name(&self) -> &str;

    fn forward(&mut self, x: &Tensor<F>, ctx: Ctx) -> Result<Tensor<F>>;

    /// Returns the input gradient; parameter gradients are accumulated into
    /// each [`Param::grad`].
    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>>;

    fn params(&self) -> Vec<&Param<F>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        Vec::new()
    }

    /// Non-trainable state that belongs in checkpoints (batch-norm running statistics).
    fn buffers(&self) -> Vec<(String, Tensor<F>)> {
        Vec::new()
    }

    fn load_buffer(&mut self, _name: &str, _value: &Tensor<F>) -> Result<bool> {
        Ok(false)
    }

    fn clear_cache(&mut self) {}
}

pub(crate) fn expect_rank5<F: Scalar>(x: &Tensor<F>, who: &str) -> Result<[usize; 5]> {
    match *x.shape() {
        [n, c, g, h, w] => Ok([n, c, g, h, w]),
        _ => crate::error::shape_err(format!("{who} expects [N, C, G, H, W], got {:?}", x.shape())),
    }
}
