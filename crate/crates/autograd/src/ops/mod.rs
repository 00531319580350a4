mod conv;
mod elementwise;
pub mod linalg;
mod norm;
mod resize;
mod shape;

pub use conv::{col2im, im2col, Conv2dGeom};
pub use elementwise::{sigmoid, silu, silu_grad};
pub use norm::NORM_EPS;
pub use shape::cat;
