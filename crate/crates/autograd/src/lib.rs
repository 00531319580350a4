//! A small reverse-mode automatic differentiation engine over dense `f64`
//! tensors. Ops are recorded on a [`Tape`] as they execute; a single reverse
//! sweep yields gradients for every leaf. Batched kernels (convolution,
//! matrix products, normalization) run data-parallel over the leading axis
//! when the `parallel` feature is enabled.

mod error;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod par;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::cat;
pub use optim::Sgd;
pub use params::{Binding, ParamId, ParamStore};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::{broadcast_shape, broadcast_zip, numel, strides_of, Tensor};
