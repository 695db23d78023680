//! File formats, a parallel Monte Carlo driver and the `blp-ife` command
//! line on top of [`blp_ife_core`].

pub mod commands;
pub mod config;
pub mod error;
pub mod panel_io;
pub mod report;
pub mod study;

pub use error::{Error, Result};
