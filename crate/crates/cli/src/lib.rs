//! Command-line front end and HTTP service for the cohort-aware agent.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod http;
pub mod service;

pub use commands::{main_with, Cli};
