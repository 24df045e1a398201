//! `gen-data`: synthetic train/valid/test splits plus a vocabulary file.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::dataset::write_jsonl;
use crate::data::{GenSpec, Vocab};
use crate::error::Result;
use crate::numerics::RngState;

#[derive(Clone, Debug)]
pub struct GenOptions {
    pub spec: GenSpec,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub vocab: PathBuf,
}

impl GenPaths {
    pub fn in_dir(dir: &Path) -> Self {
        GenPaths {
            train: dir.join("train.jsonl"),
            valid: dir.join("valid.jsonl"),
            test: dir.join("test.jsonl"),
            vocab: dir.join("vocab.txt"),
        }
    }
}

/// Draws the three splits, in order, from one seeded stream.
pub fn gen_data(opts: &GenOptions) -> Result<GenPaths> {
    opts.spec.validate()?;
    fs::create_dir_all(&opts.out_dir)?;
    let paths = GenPaths::in_dir(&opts.out_dir);
    let mut rng = RngState::new(opts.seed);
    for (n, path) in [(opts.train, &paths.train), (opts.valid, &paths.valid), (opts.test, &paths.test)] {
        write_jsonl(path, &opts.spec.generate(n, &mut rng)?)?;
    }
    Vocab::synthetic(opts.spec.content).save(&paths.vocab)?;
    Ok(paths)
}
