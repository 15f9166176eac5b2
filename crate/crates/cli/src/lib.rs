//! Command-line driver: configuration, verbs and report rendering.

pub mod app;
pub mod config;
pub mod report;
pub mod synth;

pub use app::run;
