//! Dense row-major tensors with a define-by-run tape for reverse-mode
//! differentiation, plus the Adam optimizer.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are added with
//! [`Tape::leaf`] (differentiable) or [`Tape::constant`]; every primitive
//! records itself and [`Tape::backward`] walks the record in reverse.
//!
//! Everything is generic over [`Real`] so models train in `f32` and are
//! gradient-checked in `f64`.

mod adam;
mod broadcast;
mod conv;
mod error;
mod params;
mod real;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use conv::ConvGeom;
pub use error::{Result, TensorError};
pub use params::ParamSet;
pub use real::{pairwise_sum, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
