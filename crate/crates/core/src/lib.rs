//! Decoding categorical signals from pooled histogram queries.
//!
//! A population of `n` individuals, each belonging to one of `d` categories,
//! is observed only through histograms of random pooled subsets. This crate
//! implements:
//!
//! - instance generation and error metrics for the pooled-histogram model
//!   ([`model`]);
//! - the approximate message passing decoder and its relaxed belief
//!   propagation reference ([`amp`]);
//! - the multivariate state evolution dynamics on the Laplacian cone that
//!   predict the decoder's asymptotic behavior ([`se`]);
//! - phase-transition threshold computations for the binary, symmetric and
//!   matching-initialization cases ([`thresholds`]);
//! - the supporting numerical kernels ([`numerics`]) and the sweep
//!   orchestration behind the command-line interface ([`cli`]).
//!
//! # Example
//!
//! Generate an instance above the recovery threshold and decode it:
//!
//! ```
//! use hqp_core::amp::{amp_decode, AmpConfig};
//! use hqp_core::model::{generate_instance, Composition};
//!
//! let pi = [0.5, 0.5];
//! let inst = generate_instance(400, 2, 280, 0.5, &pi, 7, Composition::Exact)?;
//! let result = amp_decode(&inst, &AmpConfig::default())?;
//! assert!(result.converged);
//! assert_eq!(result.hard, inst.planted);
//! # Ok::<(), hqp_core::Error>(())
//! ```

pub mod amp;
pub mod cli;
pub mod error;
pub mod model;
pub mod numerics;
pub mod se;
pub mod thresholds;

pub use error::{Error, Result};
