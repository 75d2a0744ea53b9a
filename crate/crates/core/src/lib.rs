//! Positive-pair contrastive regularization for domain generalization.

pub mod autodiff;
pub mod data;
pub mod error;

pub use error::{Error, Result};
pub mod model;
pub mod selfreg;
pub mod swa;
pub mod trainer;
