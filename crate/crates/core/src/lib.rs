//! Joint 2D part localization, 3D pose and 3D shape estimation from
//! per-landmark detection hypotheses.
//!
//! The crate is organized around one convex program: landmark assignments are
//! relaxed to the simplex, rigid motion is relaxed to per-basis 2x3 motion
//! matrices penalized by their spectral norm, and the whole thing is solved
//! with ADMM. Around that core sit the upstream part-learning stages and the
//! downstream inference pipeline:
//!
//! * [`geometry`] - shape bases, weak-perspective projection, motion
//!   factorization, canonical alignment.
//! * [`solver`] - the convex program and its ADMM solver.
//! * [`selection`] - facility-location landmark selection via an LP
//!   relaxation, plus average-precision scoring.
//! * [`parts`] - HOG features, whitened clustering, LDA filters, latent
//!   offset refinement and SVM retraining.
//! * [`pipeline`] - staged inference: mean-shape solve, visibility
//!   estimation, trust-region pruning, full shape-space solve.
//! * [`bench`] - synthetic data generation, basis learning and metrics.

pub mod bench;
pub mod error;
pub mod geometry;
pub mod lp;
pub mod parts;
pub mod pipeline;
pub mod selection;
pub mod solver;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
