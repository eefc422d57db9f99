//! Library side of the `sandesc` command-line tool.

pub mod commands;
pub mod dataset;
pub mod descfile;
pub mod eval;
pub mod extract;
pub mod viz;
