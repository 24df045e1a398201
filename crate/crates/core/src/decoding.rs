//! Mask-predict refinement for masked-LM models and greedy left-to-right
//! decoding for autoregressive ones.

use crate::data::vocab::{BOS, EOS, MASK, NUM_RESERVED, PAD};
use crate::error::{Error, Result};
use crate::model::{AttnDump, Capture, Encoded, Model, TokenBatch, TokenId};
use crate::numerics::{Graph, Real, Tensor};

/// Number of positions (re)predicted at iterations `1..=n`:
/// `ceil(T·(N−k+1)/N)`.
pub fn schedule(t: usize, n: usize) -> Vec<usize> {
    (1..=n).map(|k| (t * (n - k + 1)).div_ceil(n)).collect()
}

/// Tokens and per-token confidences of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    pub tokens: Vec<TokenId>,
    pub confidences: Vec<f64>,
    pub iteration: usize,
}

impl DecodeState {
    fn masked(t: usize) -> Self {
        DecodeState {
            tokens: vec![MASK; t],
            confidences: vec![0.0; t],
            iteration: 0,
        }
    }

    /// The `n` lowest-confidence positions, ties to the lower index.
    pub fn lowest(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.tokens.len()).collect();
        idx.sort_by(|&a, &b| self.confidences[a].total_cmp(&self.confidences[b]).then(a.cmp(&b)));
        idx.truncate(n);
        idx.sort_unstable();
        idx
    }
}

#[derive(Clone, Debug)]
pub struct MaskPredictOutput {
    pub states: Vec<DecodeState>,
    /// Decoder passes performed.
    pub calls: usize,
    /// One record per iteration.
    pub history: Vec<IterationRecord>,
    /// Cross-attention of the last iteration, when captured.
    pub dumps: Option<Vec<AttnDump>>,
}

impl MaskPredictOutput {
    pub fn hypotheses(&self) -> Vec<Vec<TokenId>> {
        self.states.iter().map(|s| s.tokens.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    /// Per sentence, the positions (re)predicted in this iteration.
    pub chosen: Vec<Vec<usize>>,
    /// Per sentence, the tokens after this iteration.
    pub tokens: Vec<Vec<TokenId>>,
}

#[derive(Clone, Debug)]
pub struct GreedyOutput {
    pub hypotheses: Vec<Vec<TokenId>>,
    pub calls: usize,
    pub dumps: Option<Vec<AttnDump>>,
}

/// Most probable content token (never a reserved id) and its probability.
fn best_content<F: Real>(row: &[F]) -> (TokenId, f64) {
    best_among(row, |id| id >= NUM_RESERVED)
}

fn best_among<F: Real>(row: &[F], allowed: impl Fn(usize) -> bool) -> (TokenId, f64) {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, x) in row.iter().enumerate() {
        if allowed(i) && x.as_f64() > best.1 {
            best = (i, x.as_f64());
        }
    }
    (best.0 as TokenId, (best.1 - max).exp() / z)
}

fn encode_once<F: Real>(model: &Model<F>, batch: &TokenBatch) -> Result<(Tensor<F>, Encoded)> {
    let mut g = Graph::inference();
    let enc = model.encode(&mut g, batch, None)?;
    Ok((g.value(enc.states).clone(), enc))
}

/// Re-attaches cached encoder states to a fresh graph.
fn attach<F: Real>(g: &mut Graph<F>, states: &Tensor<F>, enc: &Encoded) -> Encoded {
    Encoded {
        states: g.constant(states.clone()),
        ..enc.clone()
    }
}

/// Iterative mask-predict. Target lengths come from the length predictor
/// unless `lengths` is given.
pub fn mask_predict<F: Real>(
    model: &Model<F>,
    src: &[Vec<TokenId>],
    iterations: usize,
    lengths: Option<&[usize]>,
    capture: Capture,
) -> Result<MaskPredictOutput> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("mask-predict needs at least one iteration".into()));
    }
    let batch = TokenBatch::sources(src)?;
    let (states, enc) = encode_once(model, &batch)?;
    let lens: Vec<usize> = match lengths {
        Some(l) => {
            if l.len() != src.len() {
                return Err(Error::InvalidArgument(format!("{} lengths for {} sentences", l.len(), src.len())));
            }
            l.to_vec()
        }
        None => {
            let mut g = Graph::inference();
            let e = attach(&mut g, &states, &enc);
            model.predict_length(&mut g, &e)?.into_iter().map(|p| p.length).collect()
        }
    };
    if let Some(&bad) = lens.iter().find(|&&t| t < 1 || t > model.config.max_len) {
        return Err(Error::InvalidArgument(format!(
            "target length {bad} outside 1..={}",
            model.config.max_len
        )));
    }
    let tl = *lens.iter().max().expect("non-empty batch");
    let mut pad = vec![true; src.len() * tl];
    for (b, &t) in lens.iter().enumerate() {
        pad[b * tl..b * tl + t].iter_mut().for_each(|p| *p = false);
    }
    let mut dstates: Vec<DecodeState> = lens.iter().map(|&t| DecodeState::masked(t)).collect();
    let scheds: Vec<Vec<usize>> = lens.iter().map(|&t| schedule(t, iterations)).collect();
    let mut history = Vec::with_capacity(iterations);
    let mut dumps = None;

    for k in 0..iterations {
        let chosen: Vec<Vec<usize>> = dstates
            .iter()
            .zip(&scheds)
            .map(|(s, sc)| if k == 0 { (0..s.tokens.len()).collect() } else { s.lowest(sc[k]) })
            .collect();
        let mut tgt_in = vec![PAD; src.len() * tl];
        for (b, s) in dstates.iter_mut().enumerate() {
            for &p in &chosen[b] {
                s.tokens[p] = MASK;
            }
            tgt_in[b * tl..b * tl + s.tokens.len()].copy_from_slice(&s.tokens);
        }
        let last = k + 1 == iterations;
        let mut g = Graph::inference();
        let e = attach(&mut g, &states, &enc);
        let out = model.decode_cmlm(&mut g, &e, &tgt_in, &pad, tl, last && capture != Capture::Off)?;
        let logits = g.value(out.logits);
        for (b, s) in dstates.iter_mut().enumerate() {
            for &p in &chosen[b] {
                let (tok, conf) = best_content(logits.row(b * tl + p));
                s.tokens[p] = tok;
                s.confidences[p] = conf;
            }
            s.iteration = k + 1;
        }
        if last && capture != Capture::Off {
            dumps = Some(model.collect_dumps(&out.traces, &e, tl, &lens, capture == Capture::PerHead));
        }
        history.push(IterationRecord {
            chosen,
            tokens: dstates.iter().map(|s| s.tokens.clone()).collect(),
        });
    }
    Ok(MaskPredictOutput {
        states: dstates,
        calls: iterations,
        history,
        dumps,
    })
}

/// Greedy left-to-right decoding until EOS or `max_len` tokens.
pub fn greedy_at<F: Real>(
    model: &Model<F>,
    src: &[Vec<TokenId>],
    max_len: usize,
    capture: Capture,
) -> Result<GreedyOutput> {
    let batch = TokenBatch::sources(src)?;
    let (states, enc) = encode_once(model, &batch)?;
    let max_len = max_len.min(model.config.max_len);
    let n = src.len();
    let mut hyps: Vec<Vec<TokenId>> = vec![Vec::new(); n];
    let mut done = vec![false; n];
    let mut calls = 0;
    while calls < max_len && done.iter().any(|d| !d) {
        let len = calls + 1;
        let mut prefix = vec![PAD; n * len];
        for (b, h) in hyps.iter().enumerate() {
            prefix[b * len] = BOS;
            prefix[b * len + 1..b * len + 1 + h.len()].copy_from_slice(h);
        }
        // finished rows keep their (shorter) prefix; only their real
        // positions count as keys
        let pad: Vec<bool> = (0..n * len).map(|i| i % len > hyps[i / len].len()).collect();
        let mut g = Graph::inference();
        let e = attach(&mut g, &states, &enc);
        let out = model.decode_at(&mut g, &e, &prefix, &pad, len, false)?;
        calls += 1;
        let logits = g.value(out.logits);
        for b in 0..n {
            if done[b] {
                continue;
            }
            let (tok, _) = best_among(logits.row(b * len + calls - 1), |id| {
                id == EOS as usize || id >= NUM_RESERVED
            });
            if tok == EOS {
                done[b] = true;
            } else {
                hyps[b].push(tok);
            }
        }
    }
    let dumps = match capture {
        Capture::Off => None,
        _ => Some(teacher_forced_dumps(model, &states, &enc, &hyps, capture == Capture::PerHead)?),
    };
    Ok(GreedyOutput {
        hypotheses: hyps,
        calls,
        dumps,
    })
}

/// Cross-attention of an autoregressive model scored over `BOS y`. One row
/// per hypothesis token (a single row for an empty hypothesis).
fn teacher_forced_dumps<F: Real>(
    model: &Model<F>,
    states: &Tensor<F>,
    enc: &Encoded,
    hyps: &[Vec<TokenId>],
    per_head: bool,
) -> Result<Vec<AttnDump>> {
    let len = hyps.iter().map(|h| h.len()).max().unwrap_or(0) + 1;
    let n = hyps.len();
    let mut prefix = vec![PAD; n * len];
    let mut pad = vec![true; n * len];
    for (b, h) in hyps.iter().enumerate() {
        prefix[b * len] = BOS;
        prefix[b * len + 1..b * len + 1 + h.len()].copy_from_slice(h);
        pad[b * len..b * len + 1 + h.len()].iter_mut().for_each(|p| *p = false);
    }
    let mut g = Graph::inference();
    let e = attach(&mut g, states, enc);
    let out = model.decode_at(&mut g, &e, &prefix, &pad, len, true)?;
    let rows: Vec<usize> = hyps.iter().map(|h| h.len().max(1)).collect();
    Ok(model.collect_dumps(&out.traces, &e, len, &rows, per_head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Objective};
    use proptest::prelude::*;

    fn cfg(objective: Objective) -> ModelConfig {
        ModelConfig {
            vocab_size: 14,
            d_model: 16,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 2,
            d_ff: 16,
            win: 3,
            ccan_layers: if objective == Objective::At { vec![] } else { vec![1, 2] },
            max_len: 12,
            length_offset_range: 2,
            objective,
            ..ModelConfig::default()
        }
    }

    fn srcs() -> Vec<Vec<TokenId>> {
        vec![vec![4, 5, 6, 7, 8], vec![9, 10], vec![11, 12, 13, 4, 5, 6, 7]]
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule(10, 10), vec![10, 9, 8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(schedule(7, 1), vec![7]);
        assert_eq!(schedule(3, 4), vec![3, 3, 2, 1]);
    }

    #[test]
    fn lowest_confidence_ties_by_position() {
        let s = DecodeState {
            tokens: vec![4; 5],
            confidences: vec![0.5, 0.1, 0.5, 0.1, 0.9],
            iteration: 1,
        };
        assert_eq!(s.lowest(2), vec![1, 3]);
        assert_eq!(s.lowest(3), vec![0, 1, 3]);
    }

    #[test]
    fn single_iteration_is_one_shot_prediction() {
        let m = Model::<f64>::new(cfg(Objective::Cmlm)).unwrap();
        let src = srcs();
        let out = mask_predict(&m, &src, 1, Some(&[5, 2, 7]), Capture::Off).unwrap();
        assert_eq!(out.calls, 1);
        // direct fully-masked pass
        let batch = TokenBatch::sources(&src).unwrap();
        let mut g = Graph::inference();
        let enc = m.encode(&mut g, &batch, None).unwrap();
        let tl = 7;
        let lens = [5, 2, 7];
        let mut tgt = vec![PAD; 3 * tl];
        let mut pad = vec![true; 3 * tl];
        for (b, &t) in lens.iter().enumerate() {
            for p in 0..t {
                tgt[b * tl + p] = MASK;
                pad[b * tl + p] = false;
            }
        }
        let logits = m.decode_cmlm(&mut g, &enc, &tgt, &pad, tl, false).unwrap();
        let logits = g.value(logits.logits);
        for (b, &t) in lens.iter().enumerate() {
            let expect: Vec<TokenId> = (0..t)
                .map(|p| {
                    let row = logits.row(b * tl + p);
                    (NUM_RESERVED..14).max_by(|&i, &j| row[i].total_cmp(&row[j]).then(j.cmp(&i))).unwrap() as TokenId
                })
                .collect();
            assert_eq!(out.states[b].tokens, expect);
        }
    }

    #[test]
    fn exactly_n_calls_and_no_mask_left() {
        let m = Model::<f32>::new(cfg(Objective::Cmlm)).unwrap();
        let out = mask_predict(&m, &srcs(), 10, None, Capture::HeadAverage).unwrap();
        assert_eq!(out.calls, 10);
        assert_eq!(out.history.len(), 10);
        for s in &out.states {
            assert!(s.tokens.iter().all(|&t| t as usize >= NUM_RESERVED));
            assert!(s.confidences.iter().all(|&c| (0.0..=1.0).contains(&c)));
            assert_eq!(s.iteration, 10);
        }
        let dumps = out.dumps.unwrap();
        assert_eq!(dumps.len(), 3);
        for (d, s) in dumps.iter().zip(&out.states) {
            assert_eq!(d.tgt_len, s.tokens.len());
        }
    }

    #[test]
    fn untrained_lengths_follow_source() {
        let m = Model::<f32>::new(cfg(Objective::Cmlm)).unwrap();
        let out = mask_predict(&m, &srcs(), 2, None, Capture::Off).unwrap();
        let lens: Vec<usize> = out.states.iter().map(|s| s.tokens.len()).collect();
        assert_eq!(lens, vec![5, 2, 7]);
        assert!(mask_predict(&m, &srcs(), 0, None, Capture::Off).is_err());
        assert!(mask_predict(&m, &srcs(), 2, Some(&[0, 1, 1]), Capture::Off).is_err());
    }

    #[test]
    fn confident_first_pass_is_never_revised() {
        let mut m = Model::<f64>::new(cfg(Objective::Cmlm)).unwrap();
        let b = m.params.find("out_proj.bias").unwrap();
        m.params.get_mut(b).value.data_mut()[9] = 200.0;
        let out = mask_predict(&m, &srcs(), 5, None, Capture::Off).unwrap();
        for s in &out.states {
            assert!(s.tokens.iter().all(|&t| t == 9));
            assert!(s.confidences.iter().all(|&c| c == 1.0));
        }
        let once = mask_predict(&m, &srcs(), 1, None, Capture::Off).unwrap();
        assert_eq!(once.hypotheses(), out.hypotheses());
    }

    #[test]
    fn greedy_always_eos_gives_empty_output() {
        let mut m = Model::<f64>::new(cfg(Objective::At)).unwrap();
        let b = m.params.find("out_proj.bias").unwrap();
        m.params.get_mut(b).value.data_mut()[EOS as usize] = 100.0;
        let out = greedy_at(&m, &srcs(), 10, Capture::HeadAverage).unwrap();
        assert!(out.hypotheses.iter().all(Vec::is_empty));
        assert_eq!(out.calls, 1);
        let dumps = out.dumps.unwrap();
        assert!(dumps.iter().all(|d| d.tgt_len == 1 && d.layers.iter().all(|l| !l.ccan)));
    }

    #[test]
    fn greedy_is_deterministic_and_bounded() {
        let m = Model::<f32>::new(cfg(Objective::At)).unwrap();
        let a = greedy_at(&m, &srcs(), 6, Capture::Off).unwrap();
        let b = greedy_at(&m, &srcs(), 6, Capture::Off).unwrap();
        assert_eq!(a.hypotheses, b.hypotheses);
        assert!(a.calls <= 6);
        assert!(a.hypotheses.iter().all(|h| h.len() <= 6 && h.iter().all(|&t| t as usize >= NUM_RESERVED)));
    }

    #[test]
    fn greedy_batch_matches_single_sentence() {
        let m = Model::<f64>::new(cfg(Objective::At)).unwrap();
        let all = greedy_at(&m, &srcs(), 8, Capture::Off).unwrap();
        for (i, s) in srcs().into_iter().enumerate() {
            let one = greedy_at(&m, &[s], 8, Capture::Off).unwrap();
            assert_eq!(one.hypotheses[0], all.hypotheses[i]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn schedule_is_decreasing_and_starts_full(t in 1usize..40, n in 1usize..15) {
            let s = schedule(t, n);
            prop_assert_eq!(s.len(), n);
            prop_assert_eq!(s[0], t);
            prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(s.iter().all(|&x| x >= 1 && x <= t));
        }

        #[test]
        fn unchosen_positions_stay_frozen(seed in 0u64..1000, n in 2usize..6) {
            let mut c = cfg(Objective::Cmlm);
            c.seed = seed;
            let m = Model::<f32>::new(c).unwrap();
            let out = mask_predict(&m, &srcs(), n, None, Capture::Off).unwrap();
            prop_assert_eq!(out.history.len(), n);
            for (b, s) in out.states.iter().enumerate() {
                let sched = schedule(s.tokens.len(), n);
                for k in 0..n {
                    prop_assert_eq!(out.history[k].chosen[b].len(), sched[k]);
                    if k > 0 {
                        let (before, after) = (&out.history[k - 1].tokens[b], &out.history[k].tokens[b]);
                        for p in 0..s.tokens.len() {
                            if !out.history[k].chosen[b].contains(&p) {
                                prop_assert_eq!(before[p], after[p]);
                            }
                        }
                    }
                }
                prop_assert_eq!(&out.history[n - 1].tokens[b], &s.tokens);
            }
        }
    }
}
