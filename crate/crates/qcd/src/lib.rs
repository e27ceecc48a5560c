//! Quickest change detection via reinforcement learning on surrogate
//! information states.
//!
//! The crate provides, in rough dependency order:
//!
//! * [`model`]: observation and change-time laws plus path simulation;
//! * [`sis`]: log-likelihood-ratio drifts and the CUSUM and
//!   Shiryaev-Roberts statistic recursions;
//! * [`asymptotics`]: log moment generating functions of the drift, root
//!   finding, drift-shift selection, and closed-form cost approximations;
//! * [`basis`]: radial basis features over statistic space, fitted by
//!   k-means over simulated statistic paths;
//! * [`qlearn`]: Q-learning with linear function approximation on the
//!   regenerative statistic chain, with an optional matrix-gain variant
//!   and iterate averaging;
//! * [`meanflow`]: estimation of the associated mean vector field, ODE
//!   integration, an instability construction for non-separable bases,
//!   and an exact contraction diagnostic on finite instances;
//! * [`eval`]: Monte-Carlo threshold sweeps, policy evaluation, posterior
//!   benchmark, batch-means variance estimation, and decision regions.
//!
//! Everything is deterministic given a master seed; see [`rng`].

pub mod asymptotics;
pub mod basis;
pub mod error;
pub mod eval;
pub mod meanflow;
pub mod model;
pub mod numerics;
pub mod qlearn;
pub mod rng;
pub mod sis;

pub use error::{Error, Result};
