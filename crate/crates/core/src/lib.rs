//! Robust policy optimization against correlation-constrained reward uncertainty.
//!
//! The crate works on finite MDPs and exact (or sampled) discounted occupancy
//! measures. Given a proxy reward and a reference policy, it computes the
//! worst-case reward among all rewards whose correlation with the proxy under the
//! reference occupancy is `r`, and trains policies that maximize that worst case:
//!
//! - [`adversary`]: closed-form duals, adversarial reward, robust value, and a
//!   brute-force sphere oracle for the unstructured uncertainty set.
//! - [`linear`]: the linear-feature variant (whitening, dual root-finding,
//!   nonnegative weight vector).
//! - [`policy_opt`]: Max-Min, Linear Max-Min and the χ²-regularized baseline.
//! - [`eval`]: Worst / Worst* / Occ metrics, robustness sweeps, lower-bound checks.
//!
//! The crate is `no_std` and only needs `alloc`. Randomness is always passed in
//! explicitly, so every result is a pure function of its inputs and seeds.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adversary;
pub mod env;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod linalg;
pub mod linear;
pub(crate) mod math;
pub mod mdp;
pub mod policy_opt;
pub mod ratio;
pub mod rng;

pub use adversary::{CorrelationSpec, DualSolution, DualVariables, RobustStats};
pub use env::EnvBundle;
pub use error::{Error, Result};
pub use estimators::ProxyMoments;
pub use mdp::{OccupancyMeasure, RewardTable, SoftmaxPolicy, TabularMdp, TrajectoryBatch};
pub use ratio::LogRatioModel;
