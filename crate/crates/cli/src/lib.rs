//! Experiment runner for the shiftrisk library: configuration, subcommands
//! and output writers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod output;
