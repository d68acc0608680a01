//! Model-checkpoint merging by weighted Karcher means on the unit sphere,
//! with Euclidean and sparsified-delta baselines and spectral diagnostics
//! for representation collapse.

pub mod delta;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod merge;
pub mod rng;
pub mod sphere;
pub mod tensor_io;

pub use error::{Error, ErrorCategory, Result};
