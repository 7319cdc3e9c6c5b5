//! Desk-scale simulation laboratory for thermalizing Markov chains.
//!
//! The crate implements three related samplers over small state spaces
//! (up to a few thousand states for exact kernel work, up to 64 for the
//! quantum simulator):
//!
//! * classical Metropolis-Hastings chains with exact kernel construction,
//!   detailed-balance checking, and mixing/rejection diagnostics,
//! * a delayed-rejection variant that works from noisy energy readings
//!   and state-preparation-and-measurement (SPAM) channels, including its
//!   per-trajectory balance identities, halting-time law, and truncation
//!   error bounds,
//! * a statevector quantum analogue driven by Gaussian-filtered phase
//!   estimation and SPAM Kraus maps, sharing the delayed-rejection
//!   decision logic verbatim.
//!
//! Everything is deterministic given a seed: randomness comes from named
//! counter-based streams derived from `(seed, chain, purpose)`.

pub mod classical;
pub mod diagnostics;
pub mod error;
pub mod halting;
pub mod imprecise;
pub mod model;
pub mod quad;
pub mod quantum;
pub mod rng;
pub mod trajectory;

pub use error::QmhError;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, QmhError>;
