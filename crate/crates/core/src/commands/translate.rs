//! `translate`: decode a file with a checkpoint, optionally dumping
//! cross-attention.
//!
//! Dump format: JSON lines, one [`AttnDump`] per input sentence:
//! `{"src_len":n,"tgt_len":m,"layers":[{"layer":1,"ccan":true,"attn":[[..n..]; m],"gate":[..m..]}]}`.
//! `gate` is present only on context-aware layers and `heads`
//! (`[heads][m][n]`) only when per-head capture is requested.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::commands::evaluate::{translate_all, DecodeConfig};
use crate::data::dataset::{read_jsonl, read_lines};
use crate::data::{Checkpoint, Vocab};
use crate::error::{Error, Result};
use crate::model::{AttnDump, Capture, Objective, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Nat,
    At,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nat" => Ok(Mode::Nat),
            "at" => Ok(Mode::At),
            o => Err(Error::Config(format!("unknown mode `{o}` (expected nat or at)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Nat => "nat",
            Mode::At => "at",
        })
    }
}

#[derive(Clone, Debug)]
pub struct TranslateOptions {
    pub checkpoint: PathBuf,
    /// `.jsonl` corpus (its `src` side is used) or plain text, one sentence
    /// per line.
    pub input: PathBuf,
    pub output: PathBuf,
    /// Must agree with the checkpoint's objective when given.
    pub mode: Option<Mode>,
    pub decode: DecodeConfig,
    pub dump_attn: Option<PathBuf>,
    pub per_head: bool,
    /// Vocabulary file that must equal the checkpoint's.
    pub vocab: Option<PathBuf>,
}

/// Reads sources (and references when the input is a corpus).
pub fn read_sources(path: &Path) -> Result<(Vec<Vec<String>>, Option<Vec<Vec<String>>>)> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let recs = read_jsonl(path)?;
        let refs = recs.iter().map(|r| r.tgt.clone()).collect();
        Ok((recs.into_iter().map(|r| r.src).collect(), Some(refs)))
    } else {
        Ok((read_lines(path)?, None))
    }
}

pub fn encode_all(vocab: &Vocab, sents: &[Vec<String>], what: &str) -> Result<Vec<Vec<TokenId>>> {
    sents
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.is_empty() {
                return Err(Error::Data(format!("{what} line {} is empty", i + 1)));
            }
            s.iter()
                .map(|t| {
                    vocab
                        .id(t)
                        .ok_or_else(|| Error::Data(format!("{what} line {}: token {t:?} not in checkpoint vocabulary", i + 1)))
                })
                .collect()
        })
        .collect()
}

/// Checks that every dump row is a probability distribution and every gate
/// lies strictly inside (0, 1).
pub fn validate_dump(d: &AttnDump) -> Result<()> {
    for l in &d.layers {
        if l.attn.len() != d.tgt_len {
            return Err(Error::Data(format!("layer {} has {} rows, expected {}", l.layer, l.attn.len(), d.tgt_len)));
        }
        for row in &l.attn {
            let s: f64 = row.iter().map(|&x| x as f64).sum();
            if row.len() != d.src_len || (s - 1.0).abs() > 1e-6 || row.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::Data(format!("layer {}: attention row is not a distribution (sum {s})", l.layer)));
            }
        }
        if let Some(g) = &l.gate {
            if g.len() != d.tgt_len || g.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
                return Err(Error::Data(format!("layer {}: gate outside (0, 1)", l.layer)));
            }
        }
    }
    Ok(())
}

pub fn write_dumps(path: &Path, dumps: &[AttnDump]) -> Result<()> {
    let mut out = String::new();
    for d in dumps {
        validate_dump(d)?;
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_dumps(path: &Path) -> Result<Vec<AttnDump>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn write_hypotheses(path: &Path, hyps: &[Vec<String>]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for h in hyps {
        writeln!(f, "{}", h.join(" "))?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TranslateSummary {
    pub sentences: usize,
    pub hypotheses: Vec<Vec<String>>,
}

pub fn translate(opts: &TranslateOptions) -> Result<TranslateSummary> {
    let ckpt = Checkpoint::load(&opts.checkpoint)?;
    if let Some(vp) = &opts.vocab {
        if Vocab::load(vp)? != ckpt.vocab {
            return Err(Error::Data(format!(
                "vocabulary {} does not match the checkpoint's",
                vp.display()
            )));
        }
    }
    let model = ckpt.model()?;
    let want = match model.config.objective {
        Objective::Cmlm => Mode::Nat,
        Objective::At => Mode::At,
    };
    if let Some(m) = opts.mode {
        if m != want {
            return Err(Error::Config(format!("checkpoint was trained for `{want}` decoding, not `{m}`")));
        }
    }
    let (src, refs) = read_sources(&opts.input)?;
    let ids = encode_all(&ckpt.vocab, &src, "input")?;
    let capture = match (&opts.dump_attn, opts.per_head) {
        (None, _) => Capture::Off,
        (Some(_), false) => Capture::HeadAverage,
        (Some(_), true) => Capture::PerHead,
    };
    let lens: Option<Vec<usize>> = match (opts.decode.oracle_length, &refs) {
        (true, Some(r)) => Some(r.iter().map(Vec::len).collect()),
        (true, None) => return Err(Error::Config("oracle length needs a .jsonl input with targets".into())),
        _ => None,
    };
    let tr = if ids.is_empty() {
        crate::commands::evaluate::Translations {
            hypotheses: Vec::new(),
            dumps: (capture != Capture::Off).then(Vec::new),
        }
    } else {
        translate_all(&model, &ids, lens.as_deref(), opts.decode, capture)?
    };
    let hyps: Vec<Vec<String>> = tr
        .hypotheses
        .iter()
        .map(|h| h.iter().map(|&t| ckpt.vocab.token(t).unwrap_or("<unk>").to_string()).collect())
        .collect();
    write_hypotheses(&opts.output, &hyps)?;
    if let (Some(p), Some(d)) = (&opts.dump_attn, &tr.dumps) {
        write_dumps(p, d)?;
    }
    Ok(TranslateSummary {
        sentences: hyps.len(),
        hypotheses: hyps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn fixture(dir: &Path, objective: Objective) -> (PathBuf, PathBuf, Vocab) {
        let vocab = Vocab::synthetic(8);
        let mut cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 2,
            d_ff: 16,
            win: 3,
            ccan_layers: vec![2],
            max_len: 12,
            seed: 3,
            objective,
            ..ModelConfig::new(vocab.len())
        };
        if objective == Objective::At {
            cfg.ccan_layers.clear();
        }
        let model = Model::<f32>::new(cfg).unwrap();
        let ck = dir.join("m.ckpt");
        Checkpoint::from_model(&model, &vocab, 0, 0.0).save(&ck).unwrap();
        let input = dir.join("in.txt");
        fs::write(&input, "w0 w1 w2\nw3 w3 w4 w5 w6\nw7\n").unwrap();
        (ck, input, vocab)
    }

    fn opts(dir: &Path, ck: PathBuf, input: PathBuf) -> TranslateOptions {
        TranslateOptions {
            checkpoint: ck,
            input,
            output: dir.join("out.txt"),
            mode: None,
            decode: DecodeConfig::default(),
            dump_attn: Some(dir.join("dump.jsonl")),
            per_head: false,
            vocab: None,
        }
    }

    #[test]
    fn dumps_are_valid_distributions() {
        let dir = tempfile::tempdir().unwrap();
        let (ck, input, _) = fixture(dir.path(), Objective::Cmlm);
        let o = opts(dir.path(), ck, input);
        let s = translate(&o).unwrap();
        assert_eq!(s.sentences, 3);
        let dumps = read_dumps(o.dump_attn.as_ref().unwrap()).unwrap();
        assert_eq!(dumps.len(), 3);
        for (d, n) in dumps.iter().zip([3, 5, 1]) {
            assert_eq!(d.src_len, n);
            assert_eq!(d.layers.len(), 2);
            assert!(d.layers[0].gate.is_none());
            assert!(d.layers[1].gate.is_some());
            validate_dump(d).unwrap();
        }
        let text = fs::read_to_string(&o.output).unwrap();
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn repeat_runs_are_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (ck, input, _) = fixture(dir.path(), Objective::Cmlm);
        let mut o = opts(dir.path(), ck, input);
        o.per_head = true;
        translate(&o).unwrap();
        let a = (fs::read(&o.output).unwrap(), fs::read(o.dump_attn.as_ref().unwrap()).unwrap());
        translate(&o).unwrap();
        let b = (fs::read(&o.output).unwrap(), fs::read(o.dump_attn.as_ref().unwrap()).unwrap());
        assert_eq!(a, b);
        let d = read_dumps(o.dump_attn.as_ref().unwrap()).unwrap();
        assert_eq!(d[0].layers[0].heads.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn vocab_mismatch_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ck, input, _) = fixture(dir.path(), Objective::Cmlm);
        let vp = dir.path().join("vocab.txt");
        Vocab::synthetic(9).save(&vp).unwrap();
        let mut o = opts(dir.path(), ck, input);
        o.vocab = Some(vp);
        let e = translate(&o).unwrap_err();
        assert!(matches!(e, Error::Data(_)));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn unknown_token_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ck, input, _) = fixture(dir.path(), Objective::Cmlm);
        fs::write(&input, "w0 zz\n").unwrap();
        let e = translate(&opts(dir.path(), ck, input)).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn mode_must_match_objective() {
        let dir = tempfile::tempdir().unwrap();
        let (ck, input, _) = fixture(dir.path(), Objective::At);
        let mut o = opts(dir.path(), ck, input);
        o.mode = Some(Mode::Nat);
        assert!(matches!(translate(&o).unwrap_err(), Error::Config(_)));
        o.mode = Some(Mode::At);
        let s = translate(&o).unwrap();
        assert_eq!(s.sentences, 3);
        for d in read_dumps(o.dump_attn.as_ref().unwrap()).unwrap() {
            assert!(d.layers.iter().all(|l| l.gate.is_none()));
            validate_dump(&d).unwrap();
        }
    }

    #[test]
    fn validate_rejects_bad_rows() {
        let mut d = AttnDump {
            src_len: 2,
            tgt_len: 1,
            layers: vec![crate::model::LayerDump {
                layer: 1,
                ccan: true,
                attn: vec![vec![0.5, 0.5]],
                gate: Some(vec![0.5]),
                heads: None,
            }],
        };
        validate_dump(&d).unwrap();
        d.layers[0].attn[0][0] = 0.6;
        assert!(validate_dump(&d).is_err());
        d.layers[0].attn[0][0] = 0.5;
        d.layers[0].gate = Some(vec![1.0]);
        assert!(validate_dump(&d).is_err());
    }
}
