//! File formats, configuration and command-line driver for the `sss`
//! sampler.

pub mod cli;
pub mod config;
pub mod diag;
pub mod error;
pub mod output;
pub mod parallel;
pub mod problem;
