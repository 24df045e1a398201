//! Checkpoint files.
//!
//! ```text
//! CCAN-CKPT 1\n
//! <header byte length, decimal>\n
//! <JSON header>\n
//! <payload: little-endian f32 arrays in manifest order>
//! ```
//!
//! The header holds the model config, vocabulary, training step, validation
//! score and a manifest of `{name, shape, offset}` entries where `offset` is
//! the byte offset of the tensor inside the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::vocab::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &str = "CCAN-CKPT 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    step: usize,
    val_score: f64,
    params: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub step: usize,
    pub val_score: f64,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, vocab: &Vocab, step: usize, val_score: f64) -> Self {
        Checkpoint {
            config: model.config.clone(),
            vocab: vocab.clone(),
            step,
            val_score,
            params: model.params.clone(),
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let params = self
            .params
            .iter()
            .map(|p| {
                let e = ManifestEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    offset,
                };
                offset += p.value.len() * 4;
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            step: self.step,
            val_score: self.val_score,
            params,
        };
        let json = serde_json::to_string(&header).expect("header serializes");
        let mut out = format!("{MAGIC}\n{}\n{json}\n", json.len()).into_bytes();
        out.reserve(offset);
        for p in self.params.iter() {
            for x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("checkpoint: {m}"));
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        if lines.next() != Some(MAGIC.as_bytes()) {
            return Err(bad("bad magic line"));
        }
        let len: usize = lines
            .next()
            .and_then(|l| std::str::from_utf8(l).ok())
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| bad("bad header length"))?;
        let rest = lines.next().ok_or_else(|| bad("truncated header"))?;
        if rest.len() < len + 1 || rest[len] != b'\n' {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..len])?;
        let payload = &rest[len + 1..];
        let expected: usize = header.params.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
        if payload.len() != expected {
            return Err(bad(&format!("payload is {} bytes, manifest needs {expected}", payload.len())));
        }
        let mut params = ParamStore::new();
        for e in &header.params {
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset..e.offset + 4 * n)
                .ok_or_else(|| bad(&format!("tensor `{}` out of bounds", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.add(e.name.clone(), Tensor::new(&e.shape, data)?);
        }
        let vocab = Vocab::from_tokens(header.vocab)?;
        Ok(Checkpoint {
            config: header.config,
            vocab,
            step: header.step,
            val_score: header.val_score,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    /// Element-wise mean of parameters. Metadata comes from the first
    /// checkpoint; step and score are the maximum and mean of the inputs.
    pub fn average(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
        let first = ckpts
            .first()
            .ok_or_else(|| Error::InvalidArgument("no checkpoints to average".into()))?;
        let mut params = first.params.clone();
        for c in &ckpts[1..] {
            if c.params.len() != params.len() || c.config != first.config {
                return Err(Error::Data("cannot average checkpoints of different models".into()));
            }
        }
        let n = ckpts.len() as f64;
        let inputs: Vec<Vec<&Tensor<f32>>> = ckpts.iter().map(|c| c.params.iter().map(|p| &p.value).collect()).collect();
        for (i, p) in params.iter_mut().enumerate() {
            for (j, x) in p.value.data_mut().iter_mut().enumerate() {
                let s: f64 = inputs.iter().map(|t| t[i].data()[j] as f64).sum();
                *x = (s / n) as f32;
            }
        }
        Ok(Checkpoint {
            config: first.config.clone(),
            vocab: first.vocab.clone(),
            step: ckpts.iter().map(|c| c.step).max().unwrap_or(0),
            val_score: ckpts.iter().map(|c| c.val_score).sum::<f64>() / n,
            params,
        })
    }
}
