//! Debiased comparison of broadband ISP performance from speed-test records.
//!
//! The pipeline goes: raw speed-test exports are parsed into validated
//! [`ingest::TestRecord`]s, collapsed into per-household monthly values
//! ([`household`]), profiled for single-household isolation and speed-tier
//! estimation ([`tiers`]), ranked for covariate influence ([`importance`]),
//! and finally compared pairwise with Mahalanobis matching and
//! average-treatment-effect estimation ([`matching`]). The [`synth`] module
//! generates datasets with known ground truth for validating the whole
//! chain, and [`report`] emits plot-ready artifacts and drives the
//! end-to-end pipeline.

pub mod household;
pub mod importance;
pub mod ingest;
pub mod matching;
pub mod report;
pub mod seeding;
pub mod stats;
pub mod synth;
pub mod tiers;

pub use ingest::{OsClass, TestRecord};
