//! Long-horizon time-series forecasting with a multi-resolution patch
//! transformer.
//!
//! The crate is self-contained: it ships its own reverse-mode autodiff
//! kernel ([`autodiff`]), the model itself ([`model`], [`attention`],
//! [`tokenizer`], [`posenc`]), an Adam training loop ([`training`]) and
//! dataset plumbing ([`data`]). Everything is `f64` and deterministic for
//! a fixed seed.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod params;
pub mod posenc;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::Error;
pub use tensor::Tensor;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Cap the global worker pool used for evaluation fan-out. Must be called
/// before any parallel work starts; later calls fail.
pub fn limit_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}
