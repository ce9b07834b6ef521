//! Minimal reverse-mode automatic differentiation over dense row-major
//! arrays, with an adaptive-moment optimizer and a named-tensor checkpoint
//! format.
//!
//! Values live on a [`Graph`] tape; handles are [`Var`]s. Gradients are
//! requested per leaf and accumulate across repeated `backward` calls until
//! zeroed.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod primitive;
pub mod store;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{central_difference, grad_check, relative_error};
pub use graph::{Graph, Var};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use primitive::{sigmoid, Attrs, Primitive, PRIMITIVE_NAMES};
pub use store::{Bound, Parameter, ParameterStore};
pub use tensor::{Real, Tensor};
