//! Command-line front end: config files, sweep orchestration, results CSV
//! and SVG charts over the collaborative-inference simulator.

pub mod commands;
pub mod config;
pub mod plot;
pub mod results;
pub mod sweep;
