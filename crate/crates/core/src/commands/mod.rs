//! Library side of the command-line verbs.

pub mod ablate;
pub mod analyze;
pub mod evaluate;
pub mod gen;
pub mod report;
pub mod train;
pub mod translate;
