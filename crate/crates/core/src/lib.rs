//! Multi-task dense prediction decoder built from selective state-space layers.
//!
//! Tensors are channel-last (`[B, H, W, C]` for feature maps, `[B, L, C]` for
//! sequences). Everything is generic over `f32` and `f64`; training uses
//! `f32`, gradient checks run in `f64`.

pub mod autograd;
pub mod blocks;
pub mod decoder;
pub mod error;
pub mod grad_check;
pub mod io;
pub mod ops;
pub mod param;
pub mod ssm;
pub mod tasks;
pub mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use param::{ParamBuilder, ParamId, ParamStore, Parameter};
pub use tensor::{DType, Element, Tensor};
