//! Command-line front end: run configs, checkpoints and artifact output.

pub mod app;
pub mod checkpoint;
pub mod config;
pub mod error;
