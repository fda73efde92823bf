//! Second-moment estimation and factorization for one-sided sampled matrices.

pub mod baselines;
pub mod dense_io;
pub mod error;
pub mod experiments;
pub mod impute;
pub mod landscape;
pub mod linalg;
pub mod moment;
pub mod privacy;
pub mod rng;
pub mod sparse_io;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
