//! Overload-risk estimation for sliced multi-tenancy networks.
//!
//! A slice pool evolves as a capped birth-death process (an Erlang loss
//! system) and every active slice carries an i.i.d. resource load drawn from
//! a Gaussian mixture left-truncated at zero. The crate provides:
//!
//! * [`gmm`]: truncated mixtures (pdf, cdf, tail, sampling, JSON form).
//! * [`queue`]: the Erlang stationary law and a lifecycle event simulator.
//! * [`simulate`]: random scenarios, observation generation and the
//!   stratified Monte-Carlo ground-truth oracle.
//! * [`estimate`]: the online estimator (rate extraction, histogram
//!   smoothing, peak counting, K-means fitting, Erlang weighting, Monte-Carlo
//!   composition and re-fit, risk readout).
//! * [`bench`]: the randomized benchmark harness and sensitivity sweeps.
//!
//! All randomness flows through explicit seeded streams, so every result is
//! a pure function of its inputs and seed.

pub mod bench;
pub mod error;
pub mod estimate;
pub mod gmm;
pub mod queue;
pub mod seed;
pub mod simulate;

pub use error::{Error, Result};
pub use estimate::{EmpiricalPdf, FittedModel, PipelineConfig, RiskCurve};
pub use gmm::{GaussianComponent, TruncatedMixture};
pub use queue::{BirthDeathRates, EventKind, LifecycleEvent, LifecycleTrace};
pub use simulate::{ObservationSet, ScenarioSpec};
