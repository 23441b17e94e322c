//! Shared numerical kernels: PSD spectral operations with an explicit
//! null-space convention, seeded Gaussian expectations, scalar supremum
//! search, and seed derivation.

pub mod engine;
pub mod hermite;
pub mod seed;
pub mod spectral;
pub mod sup;

pub use engine::{gaussian_expect, ExpectationEngine, Method, SampleSet, DEFAULT_GH_NODES};
pub use hermite::GaussHermiteRule;
pub use spectral::{psd_pinv_sqrt_apply, SpectralPsd, DEFAULT_NULL_TOL};
pub use sup::{sup_search, SupResult, SupSearchConfig};
