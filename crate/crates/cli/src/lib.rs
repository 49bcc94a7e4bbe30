//! Command-line harness around `orim-core`: configuration, matrix files,
//! experiment pipelines and report output.

pub mod commands;
pub mod config;
pub mod container;
pub mod experiments;
pub mod svg;
