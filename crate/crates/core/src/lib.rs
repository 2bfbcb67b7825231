//! Simulation and estimation toolkit for stepped-wedge cluster-randomised
//! trials analysed with generalized pairwise comparisons (GPC).
//!
//! The crate is organised along the analysis pipeline:
//!
//! - [`trial`] — trial structure: stepped-wedge design, endpoint
//!   hierarchies, individual records, and validated datasets.
//! - [`datagen`] — data generation under a logistic (binary) or truncated
//!   Gaussian (continuous) random-effects model with deterministic,
//!   replicate-keyed RNG streams.
//! - [`gpc`] — pairwise comparison scoring, win statistics (win odds, win
//!   ratio, net treatment benefit), and the cluster-period-pair table.
//! - [`lmm`] — linear mixed models fitted by REML with Kenward-Roger
//!   small-sample inference.
//! - [`pim`] — probabilistic index models with pair-overlap sandwich
//!   covariance.
//! - [`estimators`] — the eight win-odds estimators (a1, a2, b1-b4, c1, c2)
//!   producing a common [`estimators::FitResult`].
//! - [`harness`] — Monte Carlo operating-characteristics harness, scenario
//!   grids, and closed-form true win odds.

pub mod datagen;
pub mod estimators;
pub mod gpc;
pub mod harness;
pub mod lmm;
pub mod pim;
pub mod trial;

pub use estimators::{FitResult, Method};
pub use trial::{Dataset, EndpointHierarchy, TrialDesign};
