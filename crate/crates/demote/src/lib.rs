//! demote: train text classifiers that predict a target attribute while an
//! adversary demotes a protected one, then audit the fairness of the result.
//!
//! The pipeline has four stages, mirrored by the CLI subcommands:
//! generate or load a dataset ([`data`]), train a classifier with or without
//! the adversarial phase ([`training`] over [`model`]), and audit predictions
//! for accuracy and per-group false-positive disparity ([`metrics`]).

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};
