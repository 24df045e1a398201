//! Encoder-decoder translation model.
//!
//! The decoder runs in two styles over the same weights layout:
//! * conditional masked LM (`decode_cmlm`): bidirectional self-attention,
//!   every position predicted in parallel, target length from a separate
//!   offset classifier over mean-pooled encoder states;
//! * autoregressive (`decode_at`): causal self-attention, always vanilla
//!   cross-attention.
//!
//! Layers are pre-norm transformer blocks with fixed sinusoidal positions.

pub mod config;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionTrace, AttnDims, CrossAttnMode, MultiHeadAttention};
use crate::data::vocab::{BOS, EOS, MASK, PAD};
use crate::error::{Error, Result};
use crate::layers::{FeedForward, LayerNorm, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Real, RngState, Tensor, Var};

pub use config::{LayerSelection, ModelConfig, Objective};

pub type TokenId = u32;

const OUTPUT_INIT_SCALE: f64 = 0.1;

/// Padded source/target id matrices for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub src_len: usize,
    /// `[batch·src_len]`
    pub src: Vec<TokenId>,
    pub src_pad: Vec<bool>,
    pub tgt_len: usize,
    /// `[batch·tgt_len]`; empty when the batch has no targets.
    pub tgt: Vec<TokenId>,
    pub tgt_pad: Vec<bool>,
}

fn pad_rows(rows: &[Vec<TokenId>]) -> (usize, Vec<TokenId>, Vec<bool>) {
    let len = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(rows.len() * len);
    let mut pad = Vec::with_capacity(rows.len() * len);
    for r in rows {
        ids.extend_from_slice(r);
        pad.extend(std::iter::repeat_n(false, r.len()));
        ids.extend(std::iter::repeat_n(PAD, len - r.len()));
        pad.extend(std::iter::repeat_n(true, len - r.len()));
    }
    (len, ids, pad)
}

impl TokenBatch {
    pub fn new(src: &[Vec<TokenId>], tgt: &[Vec<TokenId>]) -> Result<Self> {
        if src.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if !tgt.is_empty() && tgt.len() != src.len() {
            return Err(Error::InvalidArgument(format!(
                "{} sources but {} targets",
                src.len(),
                tgt.len()
            )));
        }
        if src.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("empty source sentence".into()));
        }
        let (src_len, src_ids, src_pad) = pad_rows(src);
        let (tgt_len, tgt_ids, tgt_pad) = pad_rows(tgt);
        Ok(TokenBatch {
            batch: src.len(),
            src_len,
            src: src_ids,
            src_pad,
            tgt_len,
            tgt: tgt_ids,
            tgt_pad,
        })
    }

    pub fn sources(src: &[Vec<TokenId>]) -> Result<Self> {
        Self::new(src, &[])
    }

    pub fn src_lengths(&self) -> Vec<usize> {
        lengths(&self.src_pad, self.batch, self.src_len)
    }

    pub fn tgt_lengths(&self) -> Vec<usize> {
        lengths(&self.tgt_pad, self.batch, self.tgt_len)
    }
}

fn lengths(pad: &[bool], batch: usize, len: usize) -> Vec<usize> {
    (0..batch)
        .map(|b| pad[b * len..(b + 1) * len].iter().filter(|&&p| !p).count())
        .collect()
}

/// Encoder output for a batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[batch·src_len, d_model]`
    pub states: Var,
    pub batch: usize,
    pub src_len: usize,
    pub src_pad: Vec<bool>,
    pub src_lengths: Vec<usize>,
}

/// Captured cross-attention of one decoder layer for one sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDump {
    /// 1-based decoder layer.
    pub layer: usize,
    pub ccan: bool,
    /// Head-averaged distribution actually applied to the values,
    /// `[tgt_len][src_len]` over non-pad positions only.
    pub attn: Vec<Vec<f32>>,
    /// Gate value per target position for context-aware layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<Vec<f32>>,
    /// Per-head distributions `[heads][tgt_len][src_len]`, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<Vec<Vec<Vec<f32>>>>,
}

/// Cross-attention capture of every decoder layer for one sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnDump {
    pub src_len: usize,
    pub tgt_len: usize,
    pub layers: Vec<LayerDump>,
}

/// What to record during a decoder pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Capture {
    #[default]
    Off,
    HeadAverage,
    PerHead,
}

/// Logits plus optional attention capture.
pub struct DecoderOutput<F: Real> {
    /// `[batch·tgt_len, vocab]`
    pub logits: Var,
    pub traces: Vec<AttentionTrace<F>>,
}

/// Loss terms of one training batch.
pub struct LossParts {
    pub total: Var,
    pub token: Var,
    pub length: Option<Var>,
    pub predicted_tokens: usize,
}

/// Length distribution and the resulting target length for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthPrediction {
    /// Probabilities over offsets `-R..=R`.
    pub probs: Vec<f64>,
    pub delta: i64,
    pub length: usize,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ffn: FeedForward,
}

/// Encoder-decoder with its parameters.
#[derive(Clone, Debug)]
pub struct Model<F: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    out_proj: Linear,
    length_head: Linear,
    positions: Tensor<F>,
}

fn sinusoid<F: Real>(n: usize, d: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(&[n, d]);
    for p in 0..n {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let a = p as f64 * freq;
            t.row_mut(p)[2 * i] = F::of(a.sin());
            t.row_mut(p)[2 * i + 1] = F::of(a.cos());
        }
    }
    t
}

fn dropout<F: Real>(g: &mut Graph<F>, x: Var, rate: f64, rng: Option<&mut RngState>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = F::of(1.0 / (1.0 - rate));
    let mask = g.value(x).map(|_| if rng.bernoulli(rate) { F::zero() } else { keep });
    let m = g.constant(mask);
    g.mul(x, m)
}

impl<F: Real> Model<F> {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(config.seed);
        let mut store = ParamStore::new();
        let (d, h, v) = (config.d_model, config.n_heads, config.vocab_size);

        let a = (3.0 / d as f64).sqrt();
        let emb = (0..v * d).map(|_| F::of(rng.uniform(-a, a))).collect();
        let embed = store.add("embed", Tensor::new(&[v, d], emb)?);

        let mut encoder = Vec::with_capacity(config.enc_layers);
        for l in 0..config.enc_layers {
            let p = format!("enc.{l}");
            encoder.push(EncoderLayer {
                ln_self: LayerNorm::new(&mut store, &format!("{p}.ln_self"), d),
                self_attn: MultiHeadAttention::new(&mut store, &format!("{p}.self_attn"), d, h, false, &mut rng)?,
                ln_ff: LayerNorm::new(&mut store, &format!("{p}.ln_ff"), d),
                ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), d, config.d_ff, &mut rng),
            });
        }
        let enc_norm = LayerNorm::new(&mut store, "enc.ln_out", d);

        let mut decoder = Vec::with_capacity(config.dec_layers);
        for l in 0..config.dec_layers {
            let p = format!("dec.{l}");
            decoder.push(DecoderLayer {
                ln_self: LayerNorm::new(&mut store, &format!("{p}.ln_self"), d),
                self_attn: MultiHeadAttention::new(&mut store, &format!("{p}.self_attn"), d, h, false, &mut rng)?,
                ln_cross: LayerNorm::new(&mut store, &format!("{p}.ln_cross"), d),
                cross_attn: MultiHeadAttention::new(
                    &mut store,
                    &format!("{p}.cross_attn"),
                    d,
                    h,
                    config.uses_ccan(l),
                    &mut rng,
                )?,
                ln_ff: LayerNorm::new(&mut store, &format!("{p}.ln_ff"), d),
                ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), d, config.d_ff, &mut rng),
            });
        }
        let dec_norm = LayerNorm::new(&mut store, "dec.ln_out", d);
        let out_proj = Linear::new(&mut store, "out_proj", d, v, &mut rng);
        // near-uniform output distribution at init
        let w = &mut store.get_mut(out_proj.w).value;
        *w = w.map(|&x| x * F::of(OUTPUT_INIT_SCALE));
        let length_head = Linear::zeros(&mut store, "length_head", d, config.num_length_classes());
        let positions = sinusoid(config.max_len + 2, d);

        Ok(Model {
            config,
            params: store,
            embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            out_proj,
            length_head,
            positions,
        })
    }

    /// Rebuilds the architecture for `config` and installs `params`, which
    /// must carry exactly the expected names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.len() != model.params.len() {
            return Err(Error::Data(format!(
                "parameter count {} does not match architecture ({})",
                params.len(),
                model.params.len()
            )));
        }
        for (dst, src) in model.params.iter_mut().zip(params.iter()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Data(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(model)
    }

    /// Converts the parameters to another precision.
    pub fn cast<G: Real>(&self) -> Result<Model<G>> {
        Model::from_params(self.config.clone(), self.params.cast())
    }

    pub fn gate_param(&self, layer: usize) -> Option<ParamId> {
        self.decoder.get(layer).and_then(|l| l.cross_attn.gate)
    }

    pub fn length_head(&self) -> Linear {
        self.length_head
    }

    fn embed_tokens(&self, g: &mut Graph<F>, ids: &[TokenId], batch: usize, len: usize) -> Result<Var> {
        if len > self.positions.shape()[0] {
            return Err(Error::InvalidArgument(format!(
                "sequence of {len} positions exceeds max_len {}",
                self.config.max_len
            )));
        }
        let table = g.param(&self.params, self.embed);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = g.embedding(table, &idx)?;
        let x = g.scale(x, F::of((self.config.d_model as f64).sqrt()));
        let d = self.config.d_model;
        let mut pos = Tensor::zeros(&[batch * len, d]);
        for b in 0..batch {
            for t in 0..len {
                pos.row_mut(b * len + t).copy_from_slice(self.positions.row(t));
            }
        }
        let pos = g.constant(pos);
        g.add(x, pos)
    }

    /// Runs the encoder over `batch.src`.
    pub fn encode(&self, g: &mut Graph<F>, batch: &TokenBatch, mut rng: Option<&mut RngState>) -> Result<Encoded> {
        let (b, ts) = (batch.batch, batch.src_len);
        let src_lengths = batch.src_lengths();
        if let Some(&too_long) = src_lengths.iter().find(|&&l| l > self.config.max_len) {
            return Err(Error::InvalidArgument(format!(
                "source of length {too_long} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let p = self.config.dropout;
        let mut x = self.embed_tokens(g, &batch.src, b, ts)?;
        x = dropout(g, x, p, rng.as_deref_mut())?;
        let dims = AttnDims {
            batch: b,
            tq: ts,
            tk: ts,
            key_pad: &batch.src_pad,
            causal: false,
        };
        for layer in &self.encoder {
            let h = layer.ln_self.forward(g, &self.params, x)?;
            let (h, _) = layer.self_attn.forward(g, &self.params, h, h, dims, CrossAttnMode::Vanilla)?;
            let h = dropout(g, h, p, rng.as_deref_mut())?;
            x = g.add(x, h)?;
            let h = layer.ln_ff.forward(g, &self.params, x)?;
            let h = layer.ffn.forward(g, &self.params, h)?;
            let h = dropout(g, h, p, rng.as_deref_mut())?;
            x = g.add(x, h)?;
        }
        let states = self.enc_norm.forward(g, &self.params, x)?;
        Ok(Encoded {
            states,
            batch: b,
            src_len: ts,
            src_pad: batch.src_pad.clone(),
            src_lengths,
        })
    }

    /// Length-offset logits `[batch, 2R+1]` from mean-pooled non-pad states.
    pub fn length_logits(&self, g: &mut Graph<F>, enc: &Encoded) -> Result<Var> {
        let (b, ts) = (enc.batch, enc.src_len);
        let mut pool = Tensor::zeros(&[b, b * ts]);
        for i in 0..b {
            let w = F::of(1.0 / enc.src_lengths[i] as f64);
            for t in 0..ts {
                if !enc.src_pad[i * ts + t] {
                    pool.row_mut(i)[i * ts + t] = w;
                }
            }
        }
        let pool = g.constant(pool);
        let pooled = g.matmul(pool, enc.states)?;
        self.length_head.forward(g, &self.params, pooled)
    }

    /// Distribution over length offsets and the chosen target length.
    /// Ties in the argmax prefer the offset closest to zero, then the
    /// negative one.
    pub fn predict_length(&self, g: &mut Graph<F>, enc: &Encoded) -> Result<Vec<LengthPrediction>> {
        let logits = self.length_logits(g, enc)?;
        let probs = crate::numerics::softmax_rows(g.value(logits), None)?;
        let r = self.config.length_offset_range as i64;
        let mut order = vec![0i64];
        for k in 1..=r {
            order.extend([-k, k]);
        }
        Ok((0..enc.batch)
            .map(|b| {
                let row: Vec<f64> = probs.row(b).iter().map(|x| x.as_f64()).collect();
                let mut best = 0i64;
                for &delta in &order {
                    if row[(delta + r) as usize] > row[(best + r) as usize] {
                        best = delta;
                    }
                }
                let t = (enc.src_lengths[b] as i64 + best).clamp(1, self.config.max_len as i64);
                LengthPrediction {
                    probs: row,
                    delta: best,
                    length: t as usize,
                }
            })
            .collect())
    }

    /// Decoder pass. `causal` selects the autoregressive style, which never
    /// uses context-aware cross-attention.
    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        g: &mut Graph<F>,
        enc: &Encoded,
        tgt_in: &[TokenId],
        tgt_pad: &[bool],
        tgt_len: usize,
        causal: bool,
        capture: bool,
        mut rng: Option<&mut RngState>,
    ) -> Result<DecoderOutput<F>> {
        let b = enc.batch;
        if tgt_in.len() != b * tgt_len || tgt_pad.len() != tgt_in.len() {
            return Err(Error::shape("decode", &[b, tgt_len], &[tgt_in.len()]));
        }
        let p = self.config.dropout;
        let mut y = self.embed_tokens(g, tgt_in, b, tgt_len)?;
        y = dropout(g, y, p, rng.as_deref_mut())?;
        let self_dims = AttnDims {
            batch: b,
            tq: tgt_len,
            tk: tgt_len,
            key_pad: tgt_pad,
            causal,
        };
        let cross_dims = AttnDims {
            batch: b,
            tq: tgt_len,
            tk: enc.src_len,
            key_pad: &enc.src_pad,
            causal: false,
        };
        let mut traces = Vec::new();
        for (l, layer) in self.decoder.iter().enumerate() {
            let h = layer.ln_self.forward(g, &self.params, y)?;
            let (h, _) = layer.self_attn.forward(g, &self.params, h, h, self_dims, CrossAttnMode::Vanilla)?;
            let h = dropout(g, h, p, rng.as_deref_mut())?;
            y = g.add(y, h)?;

            let mode = if !causal && self.config.uses_ccan(l) {
                CrossAttnMode::Ccan(self.config.window())
            } else {
                CrossAttnMode::Vanilla
            };
            let h = layer.ln_cross.forward(g, &self.params, y)?;
            let (h, trace) = layer.cross_attn.forward(g, &self.params, h, enc.states, cross_dims, mode)?;
            if capture {
                traces.push(trace);
            }
            let h = dropout(g, h, p, rng.as_deref_mut())?;
            y = g.add(y, h)?;

            let h = layer.ln_ff.forward(g, &self.params, y)?;
            let h = layer.ffn.forward(g, &self.params, h)?;
            let h = dropout(g, h, p, rng.as_deref_mut())?;
            y = g.add(y, h)?;
        }
        let y = self.dec_norm.forward(g, &self.params, y)?;
        let logits = self.out_proj.forward(g, &self.params, y)?;
        Ok(DecoderOutput { logits, traces })
    }

    /// Masked-LM decoder pass over `tgt_in` (which carries MASK ids at the
    /// positions to predict). Logits are produced for every position.
    pub fn decode_cmlm(
        &self,
        g: &mut Graph<F>,
        enc: &Encoded,
        tgt_in: &[TokenId],
        tgt_pad: &[bool],
        tgt_len: usize,
        capture: bool,
    ) -> Result<DecoderOutput<F>> {
        self.decode(g, enc, tgt_in, tgt_pad, tgt_len, false, capture, None)
    }

    /// Causal decoder pass over a BOS-initial prefix.
    pub fn decode_at(
        &self,
        g: &mut Graph<F>,
        enc: &Encoded,
        prefix: &[TokenId],
        prefix_pad: &[bool],
        prefix_len: usize,
        capture: bool,
    ) -> Result<DecoderOutput<F>> {
        for b in 0..enc.batch {
            if prefix.get(b * prefix_len) != Some(&BOS) {
                return Err(Error::InvalidArgument("autoregressive prefix must start with BOS".into()));
            }
        }
        self.decode(g, enc, prefix, prefix_pad, prefix_len, true, capture, None)
    }

    /// Conditional masked-LM loss: per sentence draw `k ~ U{1..T}`, mask `k`
    /// random positions, score them, and add the weighted length loss.
    pub fn cmlm_loss(&self, g: &mut Graph<F>, batch: &TokenBatch, rng: &mut RngState) -> Result<LossParts> {
        let tl = batch.tgt_lengths();
        if batch.tgt_len == 0 || tl.contains(&0) {
            return Err(Error::InvalidArgument("cmlm loss needs non-empty targets".into()));
        }
        let mut tgt_in = batch.tgt.clone();
        let mut ignore = vec![true; batch.tgt.len()];
        for (b, &t) in tl.iter().enumerate() {
            let k = rng.int_inclusive(1, t);
            for pos in rng.sample_indices(t, k) {
                let i = b * batch.tgt_len + pos;
                tgt_in[i] = MASK;
                ignore[i] = false;
            }
        }
        self.cmlm_loss_with_mask(g, batch, &tgt_in, &ignore, Some(rng))
    }

    /// Masked-LM loss with an explicit masking pattern (`ignore[i] == false`
    /// marks a masked, scored position).
    pub fn cmlm_loss_with_mask(
        &self,
        g: &mut Graph<F>,
        batch: &TokenBatch,
        tgt_in: &[TokenId],
        ignore: &[bool],
        mut rng: Option<&mut RngState>,
    ) -> Result<LossParts> {
        let enc = self.encode(g, batch, rng.as_deref_mut())?;
        let out = self.decode(g, &enc, tgt_in, &batch.tgt_pad, batch.tgt_len, false, false, rng)?;
        let targets: Vec<usize> = batch.tgt.iter().map(|&t| t as usize).collect();
        let token = g.cross_entropy(out.logits, &targets, ignore)?;

        let r = self.config.length_offset_range as i64;
        let src_l = batch.src_lengths();
        let len_targets: Vec<usize> = batch
            .tgt_lengths()
            .iter()
            .zip(&src_l)
            .map(|(&t, &s)| (t as i64 - s as i64).clamp(-r, r) + r)
            .map(|x| x as usize)
            .collect();
        let len_logits = self.length_logits(g, &enc)?;
        let length = g.cross_entropy(len_logits, &len_targets, &vec![false; batch.batch])?;
        let weighted = g.scale(length, F::of(self.config.length_loss_weight));
        let total = g.add(token, weighted)?;
        Ok(LossParts {
            total,
            token,
            length: Some(length),
            predicted_tokens: ignore.iter().filter(|&&i| !i).count(),
        })
    }

    /// Teacher-forced autoregressive loss: input `BOS y`, target `y EOS`.
    pub fn at_loss(&self, g: &mut Graph<F>, batch: &TokenBatch, mut rng: Option<&mut RngState>) -> Result<LossParts> {
        let tl = batch.tgt_lengths();
        if batch.tgt_len == 0 || tl.contains(&0) {
            return Err(Error::InvalidArgument("at loss needs non-empty targets".into()));
        }
        let len = batch.tgt_len + 1;
        let mut tgt_in = vec![PAD; batch.batch * len];
        let mut pad = vec![true; batch.batch * len];
        let mut targets = vec![PAD as usize; batch.batch * len];
        for (b, &t) in tl.iter().enumerate() {
            let row = &batch.tgt[b * batch.tgt_len..b * batch.tgt_len + t];
            tgt_in[b * len] = BOS;
            for i in 0..t {
                tgt_in[b * len + i + 1] = row[i];
                targets[b * len + i] = row[i] as usize;
            }
            targets[b * len + t] = EOS as usize;
            pad[b * len..b * len + t + 1].iter_mut().for_each(|p| *p = false);
        }
        let enc = self.encode(g, batch, rng.as_deref_mut())?;
        let out = self.decode(g, &enc, &tgt_in, &pad, len, true, false, rng)?;
        let token = g.cross_entropy(out.logits, &targets, &pad)?;
        Ok(LossParts {
            total: token,
            token,
            length: None,
            predicted_tokens: pad.iter().filter(|&&p| !p).count(),
        })
    }

    /// Objective-appropriate training loss.
    pub fn loss(&self, g: &mut Graph<F>, batch: &TokenBatch, rng: &mut RngState) -> Result<LossParts> {
        match self.config.objective {
            Objective::Cmlm => self.cmlm_loss(g, batch, rng),
            Objective::At => self.at_loss(g, batch, Some(rng)),
        }
    }

    /// Splits batched traces into per-sentence dumps cropped to the real
    /// `tgt_lengths[b] × src_len_b` region. Rows are renormalized over the
    /// non-pad source positions.
    pub fn collect_dumps(
        &self,
        traces: &[AttentionTrace<F>],
        enc: &Encoded,
        tgt_len: usize,
        tgt_lengths: &[usize],
        per_head: bool,
    ) -> Vec<AttnDump> {
        (0..enc.batch)
            .map(|b| {
                let (m, n) = (tgt_lengths[b], enc.src_lengths[b]);
                let layers = traces
                    .iter()
                    .enumerate()
                    .map(|(l, tr)| {
                        let h = tr.heads;
                        let cell = |head: usize, t: usize, s: usize| {
                            tr.effective.data()[((b * h + head) * tgt_len + t) * enc.src_len + s].as_f64()
                        };
                        let attn = (0..m)
                            .map(|t| normalized((0..n).map(|s| (0..h).map(|hd| cell(hd, t, s)).sum::<f64>())))
                            .collect();
                        let gate = tr
                            .gate
                            .as_ref()
                            .map(|gv| (0..m).map(|t| gv.data()[b * tgt_len + t].as_f64() as f32).collect());
                        let heads = per_head.then(|| {
                            (0..h)
                                .map(|hd| (0..m).map(|t| normalized((0..n).map(|s| cell(hd, t, s)))).collect())
                                .collect()
                        });
                        LayerDump {
                            layer: l + 1,
                            ccan: tr.gate.is_some(),
                            attn,
                            gate,
                            heads,
                        }
                    })
                    .collect();
                AttnDump {
                    src_len: n,
                    tgt_len: m,
                    layers,
                }
            })
            .collect()
    }
}

/// Rescales a row to sum to one (in f64) before narrowing to f32.
fn normalized(row: impl Iterator<Item = f64>) -> Vec<f32> {
    let row: Vec<f64> = row.collect();
    let z: f64 = row.iter().sum();
    row.iter().map(|&x| (x / z) as f32).collect()
}
