//! Command-line driver and HTTP triage service for the veilscan pipeline.

pub mod cli;
pub mod service;
