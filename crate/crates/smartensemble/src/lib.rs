//! Filesystem, file formats and the command-line driver around
//! [`smartensemble_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod io;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
pub use smartensemble_core as core;
