//! Library side of the `flowpool` binary: file formats, synthetic datasets
//! and the experiment drivers behind each subcommand.

pub mod commands;
pub mod io;
pub mod synthetic;
