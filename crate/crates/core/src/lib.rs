//! Change detection on bi-temporal image pairs: a hybrid CNN-Transformer
//! feature extractor, spectral refinement blocks, a token transformer with
//! KAN channel attention, a pixelwise head, metrics and the training harness.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod feature_extraction;
pub mod head;
pub mod kan;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod spectral;
pub mod token;
pub mod train;
pub mod viz;

pub use error::{EhctError, Result};
