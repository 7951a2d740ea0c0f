//! Meta-analysis of study-level correlations.
//!
//! The crate covers the whole path from a coded effect-size table to report
//! artifacts:
//!
//! - [`dataset`] parses and validates the coded CSV, merges raw variable names
//!   into canonical factors and applies the minimum-k inclusion rule.
//! - [`transforms`] moves values between regression-beta, correlation and
//!   Fisher-z space.
//! - [`pooling`] implements fixed- and random-effects (DerSimonian-Laird)
//!   pooling with Q, I² and τ².
//! - [`bias`] computes fail-safe N, Egger's regression test and funnel points.
//! - [`moderators`] runs subgroup Q-between tests and mixed-effects
//!   meta-regression.
//! - [`report`] assembles everything into a serializable report and renders
//!   tables and funnel-plot SVGs.
//! - [`compare`] checks a report against a table of expected cells.

pub mod bias;
pub mod compare;
pub mod dataset;
pub mod distributions;
pub mod fixture;
pub mod moderators;
pub mod pooling;
pub mod report;
pub mod transforms;

pub use dataset::{CodedDataset, Factor, FactorMapping, RegionClass, StudyEffect};
pub use pooling::{HeterogeneityStats, Model, PooledEstimate};
pub use report::{AnalysisConfig, AnalysisReport};
pub use transforms::NormalizedEffect;
