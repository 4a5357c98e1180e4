//! Hierarchical hidden Markov model of debtor behaviour with exogenous
//! covariates.
//!
//! An observed behaviour chain `B_t` is driven by a latent scheme chain
//! `S_t`; both sets of transition matrices are selected by covariates
//! (treatment, economic state, prior-case result, and a binary debt-ratio
//! indicator controlled by a threshold `alpha`). The crate provides:
//!
//! - [`domain`]: the data model, validation and covariate indexing
//! - [`inference`]: exact per-case forward-backward smoothing plus a
//!   brute-force path-enumeration oracle
//! - [`learning`]: EM with closed-form updates and grid selection of the
//!   threshold
//! - [`simulation`]: a seeded generative sampler
//! - [`io`]: CSV cohort files and JSON parameter files
//!
//! The `debt-hmm` binary exposes `simulate`, `fit`, `posterior`, `loglik`
//! and `alpha-scan` subcommands over the same file formats.

pub mod domain;
pub mod error;
pub mod inference;
pub mod io;
pub mod learning;
pub mod simulation;

pub use domain::{classify_debt_ratio, validate_case, DebtCase, ModelParams, StateSpaces};
pub use error::{Error, Result};
pub use inference::{brute_force_posterior, posterior, PosteriorSet};
pub use learning::{fit, FitConfig, FitReport, QsMode};
pub use simulation::{sample_cohort, CohortSpec};
