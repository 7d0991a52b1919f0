//! Compound-uncertainty toolkit: simulated environments with controllable
//! observation masking, action delay and dynamics shift; a bootstrapped
//! dynamics ensemble; the kappa coefficient and its regimes; a
//! regime-adaptive policy; an exact mutual-information oracle; and
//! super-additivity statistics over condition sweeps.

pub mod analysis;
pub mod ensemble;
pub mod env;
pub mod error;
pub mod experiment;
pub mod kappa;
pub mod oracle;
pub mod perturb;
pub mod policy;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

/// Joint belief over `f64`.
pub type Belief = oracle::DiscreteJointBelief<f64>;
pub type Components = kappa::KappaComponents<f64>;
pub type Thresholds = kappa::RegimeThresholds<f64>;
pub type Weights = policy::PolicyWeights<f64>;

/// Toolkit version embedded in every output file.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
