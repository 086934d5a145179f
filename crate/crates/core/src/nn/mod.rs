//! Network operators and their parameter containers.

mod activation;
mod conv;
mod loss;
mod norm;
mod pool;

pub use activation::{prelu_scalar, sigmoid_scalar, PReLUParams, PRELU_INIT};
pub use conv::{ConvSpec, Padding};
pub use loss::BCE_CLAMP;
pub use norm::{BatchNormState, BatchStats, RunningStats, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Kernel sizes the architecture uses.
pub const KERNEL_SIZES: [usize; 4] = [1, 2, 3, 5];

/// Weights and bias of a convolution.
///
/// Forward convolutions store weights as `(out, in, kH, kW)`. The 2x2
/// transposed convolution stores `(in, out, 2, 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub spec: ConvSpec,
}

impl<T: Element> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, spec: ConvSpec) -> Result<Self> {
        let [_, _, kh, kw] = *weight.shape() else {
            return Err(Error::dim("convolution weight must be 4-d"));
        };
        if !KERNEL_SIZES.contains(&kh) || !KERNEL_SIZES.contains(&kw) {
            return Err(Error::config(format!("unsupported kernel size {kh}x{kw}")));
        }
        if !(1..=2).contains(&spec.stride) {
            return Err(Error::config(format!("unsupported stride {}", spec.stride)));
        }
        Ok(ConvParams { weight, bias, spec })
    }
}
