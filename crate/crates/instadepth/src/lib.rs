//! File formats, run artifacts and the command-line front end for the
//! `instadepth-core` depth-completion network.

pub mod artifacts;
pub mod cli;
pub mod colormap;
pub mod dataset;
pub mod error;
pub mod masks;
pub mod panels;
pub mod pnm;

pub use error::{Error, Result};
