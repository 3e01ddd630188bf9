//! Minimal NCHW tensor library with reverse-mode automatic differentiation.
//!
//! Backward rules are themselves expressed as graph operations, so gradients
//! can be differentiated again (`grad(.., create_graph = true)`).

pub mod error;
pub mod exec;
pub mod kernels;
pub mod ops;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod var;

pub use error::{Error, Result};
pub use kernels::ConvGeom;
pub use ops::concat_channels;
pub use optim::{Adam, AdamState};
pub use param::{Param, ParamRef};
pub use tensor::{Shape, Tensor};
pub use var::{grad, is_grad_enabled, no_grad, Var};
