//! Experiment runner around [`rpo_core`]: TOML configuration, policy artifacts,
//! CSV outputs with manifests, and the randomized oracle suites.

pub use rpo_core as core;

pub mod artifact;
pub mod commands;
pub mod config;
pub mod oracle;
pub mod output;
