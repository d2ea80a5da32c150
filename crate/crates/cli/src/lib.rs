//! Batch front end: a config file in, CSV/JSON reports out.

pub mod config;
pub mod report;
pub mod run;
