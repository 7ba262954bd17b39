//! Policy-aware reward-matrix completion.
//!
//! A reward function over a finite state-action space is treated as a matrix
//! with approximate low-rank + sparse structure. Rewards are observed only at
//! entries visited by a behavior policy (missing-not-at-random), recovered by
//! a weighted robust principal-component-pursuit solver with inverse-propensity
//! weights, wrapped in split-conformal confidence intervals, and fed to a
//! tabular Q-learning loop that abstains from uncertain completions.
//!
//! Module map:
//! - [`tensor`]: dense reward matrices, observation sets, seeded randomness.
//! - [`linalg`]: exact and randomized SVD, soft/singular-value thresholding.
//! - [`mnar`]: visitation modeling, propensity estimation, overlap diagnostics.
//! - [`completion`]: the weighted PCP solver and the bilinear latent variant.
//! - [`confidence`]: split-conformal intervals and the abstention gate.
//! - [`mdp`]: finite MDPs with planted reward structure, planning oracles.
//! - [`agent`]: the end-to-end completion-gated Q-learning loop.
//! - [`experiments`]: seeded sweep studies emitting CSV tables.
//! - [`cli`]: config parsing and command dispatch for the `pamc` binary.

pub mod agent;
pub mod cli;
pub mod completion;
pub mod confidence;
pub mod experiments;
pub mod linalg;
pub mod mdp;
pub mod mnar;
pub mod tensor;

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A solver produced a non-finite intermediate. The objective trace up to
    /// the failing iteration is attached for post-mortem inspection.
    #[error("numerical failure at iteration {iteration}: {message}")]
    NumericalFailure {
        iteration: usize,
        message: String,
        trace: Vec<f64>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
