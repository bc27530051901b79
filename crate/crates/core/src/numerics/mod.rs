//! Dense tensors, reverse-mode differentiation, batch norm and Adam.

pub mod adam;
pub mod batchnorm;
pub mod nn;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use batchnorm::{BatchNormParams, ScaleBounds};
pub use nn::{BatchNorm, Ctx, Linear, Mlp, MlpSpec, ParamGrads, ParamId, ParamStore};
pub use tape::{logistic, softplus, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
