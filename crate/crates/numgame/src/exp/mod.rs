//! Experiment harness: named presets, TOML configuration with CLI
//! overrides, a cached multi-seed runner, and plot rendering.

pub mod config;
pub mod plot;
pub mod presets;
pub mod runner;
