//! Corpora, vocabularies, synthetic tasks, checkpoints and run configs.

pub mod checkpoint;
pub mod dataset;
pub mod runconfig;
pub mod synthetic;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use dataset::{Example, Record};
pub use runconfig::{OptimConfig, RunConfig};
pub use synthetic::{GenSpec, Task};
pub use vocab::Vocab;
