//! A desk-scale laboratory for adaptive action-guidance reinforcement
//! learning on synthetic sparse-reward barrier-chain tasks.
//!
//! The crate is organized around the mechanism it studies:
//!
//! - [`env`]: barrier-chain environments with exact dynamic-programming
//!   oracles for success probability, per-step visiting mass, and retention.
//! - [`policy`]: a guidance-conditioned tabular softmax policy with analytic
//!   log-probabilities, gradients, entropy, and KL.
//! - [`guidance`]: the ordered prefix family over reference plans, noise
//!   injection, and the minimal-intervention level search.
//! - [`rollout`]: reproducible group rollout collection with per-step
//!   behavior log-probabilities and source tags.
//! - [`optimizer`]: group advantages, the mixed-policy clipped objective
//!   with source-adaptive ratios, self-distillation, and the training loop.
//! - [`analysis`]: reachability/risk diagnostics — Δlogit profiles, barrier
//!   repair, log-ratio shift risk with covariance decomposition, recovery
//!   probabilities, risk-constrained selection, Hoeffding budgets.
//! - [`harness`]: experiment configuration, task generation, persistence,
//!   and the scripted experiment/verification suites.
//!
//! All numeric code is generic over [`scalar::Scalar`]; the `F64` aliases
//! below are what the harness and CLI use.

pub mod analysis;
pub mod env;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod optimizer;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar for experiments; every stated tolerance assumes it.
pub type Real = f64;

pub type EnvSpecF64 = env::EnvSpec<Real>;
pub type BarrierChainF64 = env::BarrierChain<Real>;
pub type ReachabilityProfileF64 = env::ReachabilityProfile<Real>;
pub type PolicyParamsF64 = policy::PolicyParams<Real>;
pub type TrajectoryF64 = rollout::Trajectory<Real>;
pub type RolloutGroupF64 = rollout::RolloutGroup<Real>;
pub type TrainConfigF64 = optimizer::TrainConfig<Real>;
pub type RiskReportF64 = analysis::RiskReport<Real>;
pub type UtilityCurveF64 = analysis::UtilityCurve<Real>;

// Single-precision aliases for callers that can live with f32 tolerances.
pub type EnvSpecF32 = env::EnvSpec<f32>;
pub type PolicyParamsF32 = policy::PolicyParams<f32>;
