//! Files, experiment orchestration and the command line around
//! [`bnnadv_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod harness;
pub mod idx;
pub mod records;

pub use error::{Error, Result};
