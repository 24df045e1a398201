//! JSON-lines parallel corpora: one `{"src": [...], "tgt": [...]}` per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::vocab::Vocab;
use crate::error::{Error, Result};
use crate::model::TokenId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

/// A record mapped through a vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
}

impl Record {
    pub fn from_ids(vocab: &Vocab, src: &[TokenId], tgt: &[TokenId]) -> Self {
        let name = |&i: &TokenId| vocab.token(i).unwrap_or("<unk>").to_string();
        Record {
            src: src.iter().map(name).collect(),
            tgt: tgt.iter().map(name).collect(),
        }
    }

    pub fn to_example(&self, vocab: &Vocab) -> Result<Example> {
        let map = |toks: &[String]| -> Result<Vec<TokenId>> {
            toks.iter()
                .map(|t| vocab.id(t).ok_or_else(|| Error::Data(format!("token {t:?} not in vocabulary"))))
                .collect()
        };
        Ok(Example {
            src: map(&self.src)?,
            tgt: map(&self.tgt)?,
        })
    }
}

pub fn to_jsonl(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("strings serialize"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_jsonl(records).as_bytes())?;
    Ok(())
}

/// Reads a corpus. Blank lines are skipped; an empty file is a valid, empty
/// corpus and prints a warning.
pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: Record = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if rec.src.is_empty() || rec.tgt.is_empty() {
            return Err(parse_err("empty src or tgt".into()));
        }
        out.push(rec);
    }
    if out.is_empty() {
        eprintln!("warning: {} contains no records", path.display());
    }
    Ok(out)
}

pub fn load_examples(path: &Path, vocab: &Vocab, max_len: usize) -> Result<Vec<Example>> {
    read_jsonl(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.src.len() > max_len || r.tgt.len() > max_len {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("sentence longer than max_len {max_len}"),
                });
            }
            r.to_example(vocab)
        })
        .collect()
}

/// Plain-text sentences, one per line, whitespace tokenized.
pub fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}
