//! Synthetic translation tasks over `C` content tokens `w0 .. w{C-1}`.
//!
//! * `copy`: target equals source.
//! * `local-fusion`: `tgt_i = (src_i + src_{i+1}) mod C`, the last position
//!   wrapping to the first; each output needs its right source neighbour.
//! * `global-sort`: target is the source sorted by id.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::dataset::Record;
use crate::error::{Error, Result};
use crate::numerics::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Copy,
    LocalFusion,
    GlobalSort,
}

impl Task {
    pub const NAMES: [&'static str; 3] = ["copy", "local-fusion", "global-sort"];

    /// Target content indices for source content indices.
    pub fn apply(self, src: &[usize], content: usize) -> Vec<usize> {
        match self {
            Task::Copy => src.to_vec(),
            Task::LocalFusion => (0..src.len())
                .map(|i| (src[i] + src[(i + 1) % src.len()]) % content)
                .collect(),
            Task::GlobalSort => {
                let mut t = src.to_vec();
                t.sort_unstable();
                t
            }
        }
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "local-fusion" => Ok(Task::LocalFusion),
            "global-sort" => Ok(Task::GlobalSort),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (valid: {})",
                Task::NAMES.join(", ")
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::LocalFusion => "local-fusion",
            Task::GlobalSort => "global-sort",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenSpec {
    pub task: Task,
    /// Number of content tokens.
    pub content: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.content == 0 {
            return Err(Error::Config("content vocabulary must be non-empty".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// Draws `count` records from `rng`.
    pub fn generate(&self, count: usize, rng: &mut RngState) -> Result<Vec<Record>> {
        self.validate()?;
        let name = |i: &usize| format!("w{i}");
        Ok((0..count)
            .map(|_| {
                let len = rng.int_inclusive(self.min_len, self.max_len);
                let src: Vec<usize> = (0..len).map(|_| rng.below(self.content)).collect();
                let tgt = self.task.apply(&src, self.content);
                Record {
                    src: src.iter().map(name).collect(),
                    tgt: tgt.iter().map(name).collect(),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_rules() {
        assert_eq!(Task::Copy.apply(&[0, 1, 2], 10), vec![0, 1, 2]);
        assert_eq!(Task::LocalFusion.apply(&[3, 5, 9], 10), vec![8, 4, 2]);
        assert_eq!(Task::GlobalSort.apply(&[9, 3, 5], 10), vec![3, 5, 9]);
        assert_eq!(Task::LocalFusion.apply(&[7], 10), vec![4]);
    }

    #[test]
    fn parse_lists_valid_names() {
        assert_eq!("local-fusion".parse::<Task>().unwrap(), Task::LocalFusion);
        let err = "reverse".parse::<Task>().unwrap_err().to_string();
        assert!(err.contains("copy") && err.contains("global-sort"));
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = GenSpec {
            task: Task::LocalFusion,
            content: 64,
            min_len: 8,
            max_len: 16,
        };
        let a = spec.generate(50, &mut RngState::new(4)).unwrap();
        let b = spec.generate(50, &mut RngState::new(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|r| (8..=16).contains(&r.src.len()) && r.src.len() == r.tgt.len()));
        assert_ne!(a, spec.generate(50, &mut RngState::new(5)).unwrap());
    }

    #[test]
    fn bad_ranges_rejected() {
        let spec = GenSpec {
            task: Task::Copy,
            content: 4,
            min_len: 5,
            max_len: 2,
        };
        assert!(spec.generate(1, &mut RngState::new(0)).is_err());
    }
}
