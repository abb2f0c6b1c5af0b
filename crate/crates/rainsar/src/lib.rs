//! Desk-scale SAR rainfall estimation pipeline.
//!
//! The crate covers the full path from calibrated SAR backscatter to rainfall
//! maps and their evaluation:
//!
//! - [`gmf`] — C-band geophysical model functions and SSR normalization of
//!   dual-pol backscatter by the wind-only expectation.
//! - [`ingest`] — ground-radar polar scans and composites, temporal matching,
//!   and projection onto georeferenced SAR rasters.
//! - [`dataset`] — patch extraction, rain/wind labeling, rainless capping,
//!   and leakage-free acquisition-level partitioning.
//! - [`tensor`] — a minimal dense-tensor engine with reverse-mode automatic
//!   differentiation and an RMSProp optimizer.
//! - [`model`] — a three-headed fully-convolutional estimator (segmentation,
//!   regression, adversarial score) plus its patch discriminator.
//! - [`training`] — the five-component composite loss, class-balanced
//!   sampling, and the alternating adversarial training loop.
//! - [`evaluation`] — categorical and regression metrics with likelihood
//!   weighting, bootstrap confidence intervals, and report emission.
//! - [`synthetic`] — a seeded synthetic-scene generator used as a
//!   ground-truth oracle for end-to-end checks.
//! - [`cli`] — the `rainsar` command-line entry points.
//!
//! Shared infrastructure lives in [`geo`] (spherical geometry, geotransforms,
//! rasters) and [`container`] (the binary file container all artifacts use).

pub mod cli;
pub mod container;
pub mod dataset;
pub mod evaluation;
pub mod geo;
pub mod gmf;
pub mod ingest;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod training;
