//! Library surface of the experiment harness; the `metaopt` binary is a thin
//! wrapper over these modules, and integration tests drive them in-process.

pub mod config;
pub mod runner;
pub mod summary;
