//! Model evaluation shared by training, translation and ablation.

use serde::{Deserialize, Serialize};

use crate::analysis::{corpus_bleu, corpus_le, dump_locality_entropy, HeadReduction};
use crate::data::vocab::{EOS, MASK, NUM_RESERVED};
use crate::data::Example;
use crate::decoding::{greedy_at, mask_predict};
use crate::error::Result;
use crate::model::{AttnDump, Capture, Model, Objective, TokenBatch, TokenId};
use crate::numerics::{Graph, Real, RngState};

/// Seed of the fixed validation masking pattern.
pub const VALID_MASK_SEED: u64 = 0x5eed;

pub const EVAL_BATCH: usize = 64;

fn argmax_from<F: Real>(row: &[F], lo: usize) -> usize {
    let mut best = lo;
    for i in lo..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

/// Token accuracy on held-out data.
///
/// Masked-LM models: per sentence `k ~ U{1..T}` positions are masked with a
/// fixed seed, and the content-token argmax is scored on them. Autoregressive
/// models: teacher-forced next-token accuracy over `y EOS`.
pub fn token_accuracy<F: Real>(model: &Model<F>, data: &[Example]) -> Result<f64> {
    let mut rng = RngState::new(VALID_MASK_SEED);
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in data.chunks(EVAL_BATCH) {
        let src: Vec<Vec<TokenId>> = chunk.iter().map(|e| e.src.clone()).collect();
        let tgt: Vec<Vec<TokenId>> = chunk.iter().map(|e| e.tgt.clone()).collect();
        let batch = TokenBatch::new(&src, &tgt)?;
        let mut g = Graph::inference();
        let enc = model.encode(&mut g, &batch, None)?;
        match model.config.objective {
            Objective::Cmlm => {
                let tl = batch.tgt_len;
                let mut tgt_in = batch.tgt.clone();
                let mut scored = Vec::new();
                for (b, t) in tgt.iter().enumerate() {
                    let k = rng.int_inclusive(1, t.len());
                    for p in rng.sample_indices(t.len(), k) {
                        tgt_in[b * tl + p] = MASK;
                        scored.push((b * tl + p, t[p]));
                    }
                }
                let out = model.decode_cmlm(&mut g, &enc, &tgt_in, &batch.tgt_pad, tl, false)?;
                let logits = g.value(out.logits);
                for (i, want) in scored {
                    hit += (argmax_from(logits.row(i), NUM_RESERVED) == want as usize) as usize;
                    total += 1;
                }
            }
            Objective::At => {
                let len = batch.tgt_len + 1;
                let mut prefix = vec![crate::data::vocab::PAD; chunk.len() * len];
                let mut pad = vec![true; chunk.len() * len];
                for (b, t) in tgt.iter().enumerate() {
                    prefix[b * len] = crate::data::vocab::BOS;
                    prefix[b * len + 1..b * len + 1 + t.len()].copy_from_slice(t);
                    pad[b * len..b * len + 1 + t.len()].iter_mut().for_each(|p| *p = false);
                }
                let out = model.decode_at(&mut g, &enc, &prefix, &pad, len, false)?;
                let logits = g.value(out.logits);
                for (b, t) in tgt.iter().enumerate() {
                    for p in 0..=t.len() {
                        let want = if p < t.len() { t[p] } else { EOS };
                        hit += (argmax_from(logits.row(b * len + p), EOS as usize) == want as usize) as usize;
                        total += 1;
                    }
                }
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Decoding settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Mask-predict iterations.
    pub iterations: usize,
    /// Use reference lengths instead of predicted ones.
    pub oracle_length: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            iterations: 10,
            oracle_length: false,
        }
    }
}

/// Hypotheses plus optional attention dumps for a list of sources.
pub struct Translations {
    pub hypotheses: Vec<Vec<TokenId>>,
    pub dumps: Option<Vec<AttnDump>>,
}

/// Decodes `src` in batches with the model's own decoding style.
pub fn translate_all<F: Real>(
    model: &Model<F>,
    src: &[Vec<TokenId>],
    lengths: Option<&[usize]>,
    decode: DecodeConfig,
    capture: Capture,
) -> Result<Translations> {
    let mut hypotheses = Vec::with_capacity(src.len());
    let mut dumps = (capture != Capture::Off).then(Vec::new);
    for (ci, chunk) in src.chunks(EVAL_BATCH).enumerate() {
        let (h, d) = match model.config.objective {
            Objective::Cmlm => {
                let lens = lengths.map(|l| &l[ci * EVAL_BATCH..ci * EVAL_BATCH + chunk.len()]);
                let out = mask_predict(model, chunk, decode.iterations, lens, capture)?;
                (out.hypotheses(), out.dumps)
            }
            Objective::At => {
                let out = greedy_at(model, chunk, model.config.max_len, capture)?;
                (out.hypotheses, out.dumps)
            }
        };
        hypotheses.extend(h);
        if let (Some(all), Some(d)) = (dumps.as_mut(), d) {
            all.extend(d);
        }
    }
    Ok(Translations { hypotheses, dumps })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub token_acc: f64,
    pub bleu: f64,
    pub le: f64,
    /// Fraction of sentences whose predicted length equals the reference.
    pub length_acc: f64,
    pub sentences: usize,
}

/// Token accuracy, corpus BLEU of decoded output and corpus locality
/// entropy of the decoding-time cross-attention.
pub fn evaluate<F: Real>(model: &Model<F>, data: &[Example], decode: DecodeConfig) -> Result<EvalResult> {
    let token_acc = token_accuracy(model, data)?;
    let src: Vec<Vec<TokenId>> = data.iter().map(|e| e.src.clone()).collect();
    let refs: Vec<Vec<TokenId>> = data.iter().map(|e| e.tgt.clone()).collect();
    let lens: Vec<usize> = refs.iter().map(Vec::len).collect();
    let tr = translate_all(
        model,
        &src,
        decode.oracle_length.then_some(lens.as_slice()),
        decode,
        Capture::HeadAverage,
    )?;
    let bleu = corpus_bleu(&tr.hypotheses, &refs)?;
    let les: Vec<f64> = tr
        .dumps
        .as_deref()
        .unwrap_or_default()
        .iter()
        .map(|d| dump_locality_entropy(d, HeadReduction::AverageThenEntropy))
        .collect::<Result<_>>()?;
    let length_acc = tr
        .hypotheses
        .iter()
        .zip(&refs)
        .filter(|(h, r)| h.len() == r.len())
        .count() as f64
        / data.len().max(1) as f64;
    Ok(EvalResult {
        token_acc,
        bleu,
        le: corpus_le(&les)?,
        length_acc,
        sentences: data.len(),
    })
}
