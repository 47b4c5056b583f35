//! Run configurations, subcommand drivers and plot-ready CSV writers behind
//! the `mupar` binary.

pub mod commands;
pub mod config;
pub mod plotdata;
