//! Library half of the `afcn` command-line tool.

pub mod commands;
pub mod config;
pub mod heatmap;
