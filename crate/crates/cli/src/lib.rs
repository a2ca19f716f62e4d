//! Experiment harness: configuration, sweeps, metrics output and verification suites.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod instance;
pub mod runner;
pub mod verify;

pub use error::HarnessError;
