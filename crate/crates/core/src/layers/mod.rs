//! Layers with hand-written forward and backward passes.
//!
//! Every layer follows the same protocol: `forward` computes the output and
//! stores what `backward` needs, `backward` consumes that cache, accumulates
//! parameter gradients and returns the gradient with respect to the input.
//! `infer` is the cache-free eval-mode path used for parallel evaluation.

mod batchnorm;
mod deepe;
mod dropout;
mod linear;
mod resnet;

use serde::{Deserialize, Serialize};

pub use batchnorm::{BatchNormLayer, DEFAULT_EPS as BN_EPS, DEFAULT_MOMENTUM as BN_MOMENTUM};
pub use deepe::{identity_dropout_total_drop_prob, DeepEBlock};
pub use dropout::Dropout;
pub use linear::LinearLayer;
pub use resnet::ResNetBlock;

use crate::numkernel::{relu_backward, relu_forward, Matrix, Scalar};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Non-linearity used inside blocks. `Identity` exists only so tests can
/// collapse a network to its linear skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub(crate) fn forward<T: Scalar>(self, x: &Matrix<T>) -> Matrix<T> {
        match self {
            Activation::Relu => relu_forward(x),
            Activation::Identity => x.clone(),
        }
    }

    pub(crate) fn backward<T: Scalar>(self, x: &Matrix<T>, upstream: Matrix<T>) -> Result<Matrix<T>> {
        match self {
            Activation::Relu => relu_backward(x, &upstream),
            Activation::Identity => Ok(upstream),
        }
    }
}

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Matrix<T>) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Callback receiving a dotted parameter name and the parameter.
pub type ParamVisitor<'a, T> = dyn FnMut(&str, &mut Param<T>) + 'a;
/// Callback receiving a dotted tensor name and the tensor (parameters and buffers).
pub type TensorVisitor<'a, T> = dyn FnMut(&str, &Matrix<T>) + 'a;
pub type TensorVisitorMut<'a, T> = dyn FnMut(&str, &mut Matrix<T>) + 'a;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
