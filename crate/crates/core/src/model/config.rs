use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::WindowSpec;
use crate::error::{Error, Result};

/// Training objective / decoder style.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Conditional masked LM: bidirectional decoder, length prediction.
    Cmlm,
    /// Left-to-right decoder with teacher forcing.
    At,
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cmlm" | "nat" => Ok(Objective::Cmlm),
            "at" => Ok(Objective::At),
            other => Err(Error::Config(format!("unknown objective `{other}` (expected cmlm or at)"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Cmlm => "cmlm",
            Objective::At => "at",
        })
    }
}

/// Which decoder layers (1-based) use context-aware cross-attention.
///
/// Text form: `all`, `none`, or a comma list of items where an item is a
/// term or a range `a..b` / `a-b`, and a term is an integer, `L` (the top
/// layer) or `L-k`. The grid `1`, `1-3`, `L`, `L-2..L`, `1..L` parses as
/// expected.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelection(pub String);

impl LayerSelection {
    pub fn all() -> Self {
        LayerSelection("all".into())
    }

    pub fn none() -> Self {
        LayerSelection("none".into())
    }

    pub fn resolve(&self, num_layers: usize) -> Result<Vec<usize>> {
        let spec = self.0.trim();
        let bad = |msg: &str| Error::Config(format!("layer selection `{spec}`: {msg}"));
        match spec {
            "all" => return Ok((1..=num_layers).collect()),
            "none" | "" => return Ok(Vec::new()),
            _ => {}
        }
        let term = |t: &str| -> Result<usize> {
            let t = t.trim();
            if t == "L" {
                return Ok(num_layers);
            }
            if let Some(k) = t.strip_prefix("L-") {
                let k: usize = k.parse().map_err(|_| bad("bad offset"))?;
                return num_layers.checked_sub(k).ok_or_else(|| bad("offset below layer 1"));
            }
            t.parse().map_err(|_| bad("expected integer, L or L-k"))
        };
        let mut out = Vec::new();
        for item in spec.split(',') {
            let item = item.trim();
            let (lo, hi) = if let Some((a, b)) = item.split_once("..") {
                (term(a)?, term(b)?)
            } else if item.starts_with(|c: char| c.is_ascii_digit()) && item.contains('-') {
                let (a, b) = item.split_once('-').expect("contains '-'");
                (term(a)?, term(b)?)
            } else {
                let t = term(item)?;
                (t, t)
            };
            if lo == 0 || hi > num_layers || lo > hi {
                return Err(bad(&format!("range {lo}..{hi} outside 1..{num_layers}")));
            }
            out.extend(lo..=hi);
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// All model hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Total vocabulary including the four reserved ids.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub win: usize,
    /// 1-based decoder layers using context-aware cross-attention.
    pub ccan_layers: Vec<usize>,
    pub max_len: usize,
    /// Length offsets are classified over `[-R, R]`.
    pub length_offset_range: usize,
    pub length_loss_weight: f64,
    pub dropout: f64,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 64,
            n_heads: 4,
            enc_layers: 4,
            dec_layers: 4,
            d_ff: 128,
            win: WindowSpec::DEFAULT_WIN,
            ccan_layers: vec![1, 2, 3, 4],
            max_len: 32,
            length_offset_range: 8,
            length_loss_weight: 0.1,
            dropout: 0.0,
            seed: 1,
            objective: Objective::Cmlm,
        }
    }
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size <= crate::data::vocab::NUM_RESERVED {
            return bad(format!("vocab_size {} leaves no content tokens", self.vocab_size));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.d_ff == 0 {
            return bad("layer counts and d_ff must be positive".into());
        }
        WindowSpec::new(self.win)?;
        if self.ccan_layers.iter().any(|&l| l == 0 || l > self.dec_layers) {
            return bad(format!(
                "ccan_layers {:?} not within 1..={}",
                self.ccan_layers, self.dec_layers
            ));
        }
        if self.objective == Objective::At && !self.ccan_layers.is_empty() {
            return bad("autoregressive models use vanilla cross-attention; set ccan_layers to none".into());
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn window(&self) -> WindowSpec {
        WindowSpec::new(self.win).expect("validated")
    }

    /// `layer` is 0-based here.
    pub fn uses_ccan(&self, layer: usize) -> bool {
        self.ccan_layers.contains(&(layer + 1))
    }

    pub fn num_length_classes(&self) -> usize {
        2 * self.length_offset_range + 1
    }
}
