//! Cross-attention with hard local windows.
//!
//! For every target row the source position with the highest score is taken
//! as the aligned element `j*`. The local branch keeps only scores inside a
//! window of `win` positions centred on `j*` (clipped at the sentence edges)
//! and sets everything else to the `-inf` sentinel. The context-aware output
//! mixes both branches per target position:
//!
//! ```text
//! out_i = g_i · softmax(ψ_i)·V + (1 − g_i) · softmax(L(ψ_i))·V,   g_i = σ(w·q_i)
//! ```
//!
//! where `q_i` is the projected query before it is split into heads, so one
//! gate value is shared by every head of the layer. The window location is
//! a constant for differentiation: gradients reach the scores inside both
//! branches and the gate, never the argmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{ops, Graph, Mask, ParamId, ParamStore, Real, RngState, Tensor, Var};

/// Total width of the local window; always odd.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct WindowSpec {
    win: usize,
}

impl WindowSpec {
    pub const DEFAULT_WIN: usize = 9;

    pub fn new(win: usize) -> Result<Self> {
        if win == 0 || win % 2 == 0 {
            return Err(Error::Config(format!("window size must be odd and positive, got {win}")));
        }
        Ok(WindowSpec { win })
    }

    pub fn win(self) -> usize {
        self.win
    }

    pub fn half(self) -> usize {
        (self.win - 1) / 2
    }

    /// Inclusive source span kept around `center` for a source of `n` tokens.
    pub fn span(self, center: usize, n: usize) -> (usize, usize) {
        let lo = center.saturating_sub(self.half());
        let hi = (center + self.half()).min(n - 1);
        (lo, hi)
    }

    /// True when the window keeps every position of an `n`-token source
    /// wherever `j*` lands.
    pub fn covers(self, n: usize) -> bool {
        self.win + 1 >= 2 * n
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { win: Self::DEFAULT_WIN }
    }
}

impl TryFrom<usize> for WindowSpec {
    type Error = Error;
    fn try_from(win: usize) -> Result<Self> {
        WindowSpec::new(win)
    }
}

impl From<WindowSpec> for usize {
    fn from(w: WindowSpec) -> usize {
        w.win
    }
}

/// Raw scores `[heads, T_tgt, T_src]`; padded sources hold `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnScores<F: Real>(pub Tensor<F>);

/// Row-stochastic weights `[heads, T_tgt, T_src]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights<F: Real>(pub Tensor<F>);

/// The single gate vector of a context-aware layer, `[d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams<F: Real> {
    pub w: Tensor<F>,
}

/// One gate value per target position, each in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateValues<F: Real>(pub Tensor<F>);

/// Scaled dot-product scores `QKᵀ/sqrt(d_k)` with padded source columns set
/// to `-inf`. `q` is `[h, T_tgt, d_k]`, `k` is `[h, T_src, d_k]`.
pub fn attn_scores<F: Real>(q: &Tensor<F>, k: &Tensor<F>, src_pad: &[bool]) -> Result<AttnScores<F>> {
    if q.rank() != 3 || k.rank() != 3 || q.shape()[0] != k.shape()[0] || q.shape()[2] != k.shape()[2] {
        return Err(Error::shape("attn_scores", q.shape(), k.shape()));
    }
    let (h, tq, dk) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let ts = k.shape()[1];
    if src_pad.len() != ts {
        return Err(Error::shape("attn_scores", k.shape(), &[src_pad.len()]));
    }
    if src_pad.iter().all(|&p| p) {
        return Err(Error::InvalidArgument("every source position is padding".into()));
    }
    let mut out = Tensor::zeros(&[h, tq, ts]);
    let scale = F::of(1.0 / (dk as f64).sqrt());
    for head in 0..h {
        ops::gemm(
            &q.data()[head * tq * dk..(head + 1) * tq * dk],
            &k.data()[head * ts * dk..(head + 1) * ts * dk],
            &mut out.data_mut()[head * tq * ts..(head + 1) * tq * ts],
            tq,
            dk,
            ts,
            false,
            true,
            scale,
            F::zero(),
        );
    }
    for r in 0..h * tq {
        for (x, &p) in out.row_mut(r).iter_mut().zip(src_pad) {
            if p {
                *x = F::neg_infinity();
            }
        }
    }
    Ok(AttnScores(out))
}

/// Index of the largest finite score; ties go to the lowest index.
pub fn aligned_index<F: Real>(row: &[F]) -> Result<usize> {
    let mut best: Option<(usize, F)> = None;
    for (j, &x) in row.iter().enumerate() {
        if !x.is_finite() {
            continue;
        }
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((j, x)),
        }
    }
    best.map(|(j, _)| j)
        .ok_or_else(|| Error::InvalidArgument("score row has no finite entry".into()))
}

/// Mask (`true` = dropped) selecting everything outside the window around
/// each row's aligned index.
pub fn window_mask<F: Real>(scores: &Tensor<F>, w: WindowSpec) -> Result<Mask> {
    let n = scores.last_dim();
    let mut mask = Tensor::full(scores.shape(), true);
    for r in 0..scores.rows() {
        let center = aligned_index(scores.row(r))?;
        let (lo, hi) = w.span(center, n);
        mask.row_mut(r)[lo..=hi].iter_mut().for_each(|m| *m = false);
    }
    Ok(mask)
}

/// Keeps scores within the window around each row's aligned element and
/// replaces all others with `-inf`. Padded columns stay `-inf`.
pub fn local_mask<F: Real>(scores: &AttnScores<F>, w: WindowSpec) -> Result<AttnScores<F>> {
    let mask = window_mask(&scores.0, w)?;
    let mut out = scores.0.clone();
    for (x, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        if m {
            *x = F::neg_infinity();
        }
    }
    Ok(AttnScores(out))
}

/// `g_i = σ(w · state_i)` for `state [T, d_model]`.
pub fn gate<F: Real>(state: &Tensor<F>, params: &GateParams<F>) -> Result<GateValues<F>> {
    let d = params.w.len();
    if state.rank() != 2 || state.shape()[1] != d {
        return Err(Error::shape("gate", state.shape(), params.w.shape()));
    }
    let g = (0..state.rows())
        .map(|r| {
            let z: F = state.row(r).iter().zip(params.w.data()).map(|(&a, &b)| a * b).sum();
            ops::sigmoid(z)
        })
        .collect();
    Ok(GateValues(Tensor::new(&[state.rows()], g)?))
}

/// What one attention call exposes for analysis. All tensors are
/// `[batch·heads, T_q, T_k]` except `gate`, which is `[batch·T_q]`.
#[derive(Clone, Debug)]
pub struct AttentionTrace<F: Real> {
    pub global: Tensor<F>,
    pub local: Option<Tensor<F>>,
    pub gate: Option<Tensor<F>>,
    /// The distribution actually applied to the values:
    /// `g·global + (1−g)·local`, or `global` for vanilla attention.
    pub effective: Tensor<F>,
    pub heads: usize,
}

/// Core attention over already split heads.
///
/// `q [B·h, T_q, d_k]`, `k`/`v [B·h, T_k, d_k]`, `mask [B·h, T_q, T_k]`.
/// With `local = Some((win, gate))` the context-aware combination is used,
/// `gate` holding one value per `(batch, target)` row (`B·T_q` entries).
/// Returns the merged context `[B·T_q, h·d_v]`.
#[allow(clippy::too_many_arguments)]
pub fn attend<F: Real>(
    g: &mut Graph<F>,
    q: Var,
    k: Var,
    v: Var,
    mask: Mask,
    batch: usize,
    heads: usize,
    local: Option<(WindowSpec, Var)>,
) -> Result<(Var, AttentionTrace<F>)> {
    let dk = g.shape(q)[2];
    let scores = g.matmul_ext(q, k, true, F::of(1.0 / (dk as f64).sqrt()))?;
    let scores = g.mask_fill(scores, mask)?;
    let p_global = g.softmax(scores)?;
    let ctx_global = g.matmul(p_global, v)?;
    let ctx_global = g.merge_heads(ctx_global, batch, heads)?;
    let global = g.value(p_global).clone();

    let Some((win, gate)) = local else {
        let trace = AttentionTrace {
            effective: global.clone(),
            global,
            local: None,
            gate: None,
            heads,
        };
        return Ok((ctx_global, trace));
    };

    let wmask = window_mask(g.value(scores), win)?;
    let local_scores = g.mask_fill(scores, wmask)?;
    let p_local = g.softmax(local_scores)?;
    let ctx_local = g.matmul(p_local, v)?;
    let ctx_local = g.merge_heads(ctx_local, batch, heads)?;
    // out = local + g ⊙ (global − local)
    let diff = g.sub(ctx_global, ctx_local)?;
    let gated = g.mul_rows(diff, gate)?;
    let out = g.add(ctx_local, gated)?;

    let local = g.value(p_local).clone();
    let gate_vals = g.value(gate).clone();
    let tq = global.shape()[1];
    let mut effective = global.clone();
    for gi in 0..batch * heads {
        let b = gi / heads;
        for t in 0..tq {
            let gv = gate_vals.data()[b * tq + t];
            let r = gi * tq + t;
            let lr = local.row(r);
            for (e, &l) in effective.row_mut(r).iter_mut().zip(lr) {
                *e = gv * *e + (F::one() - gv) * l;
            }
        }
    }
    let gate_flat = gate_vals.reshape(&[batch * tq])?;
    let trace = AttentionTrace {
        global,
        local: Some(local),
        gate: Some(gate_flat),
        effective,
        heads,
    };
    Ok((out, trace))
}

/// Output of the single-sentence [`ccan`] operation.
#[derive(Clone, Debug)]
pub struct CcanDump<F: Real> {
    pub global_weights: AttnWeights<F>,
    pub local_weights: AttnWeights<F>,
    pub g: GateValues<F>,
}

fn check_qkv<F: Real>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, src_pad: &[bool]) -> Result<()> {
    if q.rank() != 3 || k.rank() != 3 || v.rank() != 3 {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if q.shape()[0] != k.shape()[0] || q.shape()[2] != k.shape()[2] {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if k.shape()[..2] != v.shape()[..2] {
        return Err(Error::shape("attention", k.shape(), v.shape()));
    }
    if src_pad.len() != k.shape()[1] {
        return Err(Error::shape("attention", k.shape(), &[src_pad.len()]));
    }
    if src_pad.iter().all(|&p| p) {
        return Err(Error::InvalidArgument("every source position is padding".into()));
    }
    Ok(())
}

fn pad_mask(heads: usize, tq: usize, src_pad: &[bool]) -> Mask {
    let ts = src_pad.len();
    let mut data = Vec::with_capacity(heads * tq * ts);
    for _ in 0..heads * tq {
        data.extend_from_slice(src_pad);
    }
    Tensor::new(&[heads, tq, ts], data).expect("positive dims")
}

fn split_back<F: Real>(merged: &Tensor<F>, heads: usize) -> Result<Tensor<F>> {
    let mut g = Graph::inference();
    let m = g.constant(merged.clone());
    let tq = merged.shape()[0];
    let s = g.split_heads(m, 1, tq, heads)?;
    Ok(g.value(s).clone())
}

/// Vanilla multi-head attention for one sentence: `softmax(ψ)V` per head.
/// Returns the context `[h, T_tgt, d_v]` and the weights.
pub fn vanilla<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    src_pad: &[bool],
) -> Result<(Tensor<F>, AttnWeights<F>)> {
    check_qkv(q, k, v, src_pad)?;
    let (h, tq) = (q.shape()[0], q.shape()[1]);
    let mut g = Graph::inference();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let (ctx, trace) = attend(&mut g, qv, kv, vv, pad_mask(h, tq, src_pad), 1, h, None)?;
    Ok((split_back(g.value(ctx), h)?, AttnWeights(trace.global)))
}

/// Context-aware cross-attention for one sentence.
///
/// `q [h, T_tgt, d_k]`, `k [h, T_src, d_k]`, `v [h, T_src, d_v]`; the gate
/// reads the query with heads concatenated, so `w` has `h·d_k` entries.
/// Returns the gated context `[h, T_tgt, d_v]` plus both branch weights and
/// the gate values.
pub fn ccan<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    src_pad: &[bool],
    w: &GateParams<F>,
    win: WindowSpec,
) -> Result<(Tensor<F>, CcanDump<F>)> {
    check_qkv(q, k, v, src_pad)?;
    let (h, tq, dk) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    if w.w.len() != h * dk {
        return Err(Error::shape("ccan gate", &[h * dk], w.w.shape()));
    }
    let mut g = Graph::inference();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let q_merged = g.merge_heads(qv, 1, h)?;
    let wv = g.constant(w.w.clone().reshape(&[h * dk, 1])?);
    let z = g.matmul(q_merged, wv)?;
    let gate = g.sigmoid(z);
    let (ctx, trace) = attend(&mut g, qv, kv, vv, pad_mask(h, tq, src_pad), 1, h, Some((win, gate)))?;
    let dump = CcanDump {
        global_weights: AttnWeights(trace.global),
        local_weights: AttnWeights(trace.local.expect("local branch present")),
        g: GateValues(trace.gate.expect("gate present")),
    };
    Ok((split_back(g.value(ctx), h)?, dump))
}

/// How a decoder layer's cross-attention combines its branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrossAttnMode {
    Vanilla,
    Ccan(WindowSpec),
}

/// Builds the `[B·h, T_q, T_k]` mask from per-sentence key padding
/// (`key_pad [B·T_k]`) and an optional causal constraint.
pub fn attention_mask(batch: usize, heads: usize, tq: usize, tk: usize, key_pad: &[bool], causal: bool) -> Mask {
    let mut data = Vec::with_capacity(batch * heads * tq * tk);
    for b in 0..batch {
        let pad = &key_pad[b * tk..(b + 1) * tk];
        for _ in 0..heads {
            for i in 0..tq {
                data.extend(pad.iter().enumerate().map(|(j, &p)| p || (causal && j > i)));
            }
        }
    }
    Tensor::new(&[batch * heads, tq, tk], data).expect("positive dims")
}

/// Multi-head attention with Q/K/V/output projections and, for
/// context-aware layers, the gate vector.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub gate: Option<ParamId>,
    pub heads: usize,
    pub d_model: usize,
}

/// Shapes for one batched attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims<'a> {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    /// `[batch·tk]`, true at padded keys.
    pub key_pad: &'a [bool],
    pub causal: bool,
}

impl MultiHeadAttention {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_model: usize,
        heads: usize,
        with_gate: bool,
        rng: &mut RngState,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let q_proj = Linear::new(store, &format!("{name}.q"), d_model, d_model, rng);
        let k_proj = Linear::new(store, &format!("{name}.k"), d_model, d_model, rng);
        let v_proj = Linear::new(store, &format!("{name}.v"), d_model, d_model, rng);
        let out_proj = Linear::new(store, &format!("{name}.out"), d_model, d_model, rng);
        // zero gate => g = 0.5 at init; no RNG draw so the remaining
        // parameters match the vanilla model for the same seed
        let gate = with_gate.then(|| store.add(format!("{name}.gate"), Tensor::zeros(&[d_model])));
        Ok(MultiHeadAttention {
            q_proj,
            k_proj,
            v_proj,
            out_proj,
            gate,
            heads,
            d_model,
        })
    }

    /// `x_q [B·T_q, d_model]` attends over `x_kv [B·T_k, d_model]`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x_q: Var,
        x_kv: Var,
        dims: AttnDims<'_>,
        mode: CrossAttnMode,
    ) -> Result<(Var, AttentionTrace<F>)> {
        let AttnDims {
            batch,
            tq,
            tk,
            key_pad,
            causal,
        } = dims;
        if key_pad.len() != batch * tk {
            return Err(Error::shape("attention key padding", &[batch, tk], &[key_pad.len()]));
        }
        let q = self.q_proj.forward(g, store, x_q)?;
        let k = self.k_proj.forward(g, store, x_kv)?;
        let v = self.v_proj.forward(g, store, x_kv)?;
        let qs = g.split_heads(q, batch, tq, self.heads)?;
        let ks = g.split_heads(k, batch, tk, self.heads)?;
        let vs = g.split_heads(v, batch, tk, self.heads)?;
        let mask = attention_mask(batch, self.heads, tq, tk, key_pad, causal);
        let local = match mode {
            CrossAttnMode::Vanilla => None,
            CrossAttnMode::Ccan(win) => {
                let gate_id = self.gate.ok_or_else(|| {
                    Error::Config("context-aware mode requested on a layer without a gate".into())
                })?;
                let w = g.param(store, gate_id);
                let w = g.reshape(w, &[self.d_model, 1])?;
                let z = g.matmul(q, w)?;
                Some((win, g.sigmoid(z)))
            }
        };
        let (ctx, trace) = attend(g, qs, ks, vs, mask, batch, self.heads, local)?;
        let out = self.out_proj.forward(g, store, ctx)?;
        Ok((out, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const NEG: f64 = f64::NEG_INFINITY;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn window_spec_validation() {
        assert!(WindowSpec::new(0).is_err());
        assert!(WindowSpec::new(4).is_err());
        let w = WindowSpec::new(9).unwrap();
        assert_eq!(w.half(), 4);
        assert_eq!(WindowSpec::default(), w);
        assert_eq!(w.span(1, 12), (0, 5));
        assert_eq!(w.span(10, 12), (6, 11));
        assert!(w.covers(5));
        assert!(!w.covers(6));
    }

    #[test]
    fn scores_peak_at_matching_key() {
        let q = Tensor::<f64>::from_f64(&[1, 1, 4], &[0., 1., 0., 0.]).unwrap();
        let k = Tensor::from_f64(&[1, 3, 4], &[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0.]).unwrap();
        let s = attn_scores(&q, &k, &[false; 3]).unwrap();
        assert_eq!(aligned_index(s.0.row(0)).unwrap(), 1);
        assert_eq!(s.0.data(), &[0.0, 0.5, 0.0]);
    }

    #[test]
    fn scores_zero_keys_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random(&[2, 3, 4], &mut rng);
        let k = Tensor::zeros(&[2, 5, 4]);
        let s = attn_scores(&q, &k, &[false, false, false, true, true]).unwrap();
        for r in 0..6 {
            assert_eq!(s.0.row(r), &[0.0, 0.0, 0.0, NEG, NEG]);
        }
        assert!(attn_scores(&q, &k, &[true; 5]).is_err());
    }

    #[test]
    fn scores_match_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random(&[1, 2, 3], &mut rng);
        let k = random(&[1, 2, 3], &mut rng);
        let s = attn_scores(&q, &k, &[false, false]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut dot = 0.0;
                for e in 0..3 {
                    dot += q.data()[i * 3 + e] * k.data()[j * 3 + e];
                }
                assert!((s.0.data()[i * 2 + j] - dot / 3f64.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aligned_index_cases() {
        assert_eq!(aligned_index(&[0.1, 2.0, 0.3, 0.5]).unwrap(), 1);
        assert_eq!(aligned_index(&[5.0, 5.0, 1.0]).unwrap(), 0);
        assert_eq!(aligned_index(&[NEG, NEG, -3.0, NEG]).unwrap(), 2);
        assert!(aligned_index(&[NEG, NEG]).is_err());
    }

    #[test]
    fn local_mask_hand_example() {
        let s = AttnScores(Tensor::<f64>::from_f64(&[1, 1, 4], &[0.1, 2.0, 0.3, 0.5]).unwrap());
        let l = local_mask(&s, WindowSpec::new(3).unwrap()).unwrap();
        assert_eq!(l.0.data(), &[0.1, 2.0, 0.3, NEG]);
    }

    #[test]
    fn local_mask_wide_and_degenerate_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = random(&[2, 3, 5], &mut rng);
        for r in 0..6 {
            s.row_mut(r)[4] = NEG;
        }
        let s = AttnScores(s);
        let wide = local_mask(&s, WindowSpec::new(9).unwrap()).unwrap();
        assert_eq!(wide, s);
        let one = local_mask(&s, WindowSpec::new(1).unwrap()).unwrap();
        for r in 0..6 {
            let finite: Vec<usize> = (0..5).filter(|&j| one.0.row(r)[j].is_finite()).collect();
            assert_eq!(finite, vec![aligned_index(s.0.row(r)).unwrap()]);
        }
    }

    #[test]
    fn gate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = random(&[3, 4], &mut rng);
        let zero = GateParams { w: Tensor::zeros(&[4]) };
        assert!(gate(&state, &zero).unwrap().0.data().iter().all(|&g| g == 0.5));

        let w = random(&[4], &mut rng);
        let g = gate(&state, &GateParams { w: w.clone() }).unwrap();
        for r in 0..3 {
            let z: f64 = (0..4).map(|j| state.row(r)[j] * w.data()[j]).sum();
            assert!((g.0.data()[r] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
        }

        let mut prev = 0.0;
        let s = Tensor::full(&[1, 4], 1.0);
        for scale in [0.1, 0.5, 2.0, 5.0] {
            let big = GateParams { w: Tensor::full(&[4], scale) };
            let v = gate(&s, &big).unwrap().0.data()[0];
            assert!(v > prev);
            prev = v;
        }
        let limit = gate(&s, &GateParams { w: Tensor::full(&[4], 100.0) }).unwrap().0.data()[0];
        assert!(limit > 1.0 - 1e-12);
    }

    #[test]
    fn ccan_wide_window_equals_vanilla() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (random(&[2, 3, 4], &mut rng), random(&[2, 5, 4], &mut rng), random(&[2, 5, 4], &mut rng));
        let pad = [false, false, false, false, true];
        let w = GateParams { w: random(&[8], &mut rng) };
        let (c, _) = ccan(&q, &k, &v, &pad, &w, WindowSpec::new(9).unwrap()).unwrap();
        let (vctx, _) = vanilla(&q, &k, &v, &pad).unwrap();
        assert!(c.max_abs_diff(&vctx) < 1e-6);
    }

    #[test]
    fn ccan_zero_gate_is_branch_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, k, v) = (random(&[1, 3, 4], &mut rng), random(&[1, 6, 4], &mut rng), random(&[1, 6, 2], &mut rng));
        let pad = [false; 6];
        let w = GateParams { w: Tensor::zeros(&[4]) };
        let (c, dump) = ccan(&q, &k, &v, &pad, &w, WindowSpec::new(3).unwrap()).unwrap();
        let glob = crate::numerics::matmul(&dump.global_weights.0.clone().reshape(&[3, 6]).unwrap(), &v.clone().reshape(&[6, 2]).unwrap()).unwrap();
        let loc = crate::numerics::matmul(&dump.local_weights.0.clone().reshape(&[3, 6]).unwrap(), &v.clone().reshape(&[6, 2]).unwrap()).unwrap();
        for i in 0..6 {
            let mean = 0.5 * (glob.data()[i] + loc.data()[i]);
            assert!((c.data()[i] - mean).abs() < 1e-12);
        }
    }

    /// Independent oracle composed directly from the published formulas.
    fn ccan_oracle(q: &[f64], k: &[f64], v: &[f64], w: &[f64], tq: usize, ts: usize, d: usize, win: usize) -> Vec<f64> {
        let half = (win - 1) / 2;
        let mut out = vec![0.0; tq * d];
        for i in 0..tq {
            let qi = &q[i * d..(i + 1) * d];
            let psi: Vec<f64> = (0..ts)
                .map(|j| qi.iter().zip(&k[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mut jstar = 0;
            for j in 1..ts {
                if psi[j] > psi[jstar] {
                    jstar = j;
                }
            }
            let softmax = |keep: &dyn Fn(usize) -> bool| -> Vec<f64> {
                let z: f64 = (0..ts).filter(|&j| keep(j)).map(|j| psi[j].exp()).sum();
                (0..ts).map(|j| if keep(j) { psi[j].exp() / z } else { 0.0 }).collect()
            };
            let pg = softmax(&|_| true);
            let pl = softmax(&|j| (j as i64 - jstar as i64).unsigned_abs() as usize <= half);
            let g = 1.0 / (1.0 + (-qi.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()).exp());
            for e in 0..d {
                let ag: f64 = (0..ts).map(|j| pg[j] * v[j * d + e]).sum();
                let al: f64 = (0..ts).map(|j| pl[j] * v[j * d + e]).sum();
                out[i * d + e] = g * ag + (1.0 - g) * al;
            }
        }
        out
    }

    #[test]
    fn ccan_matches_composed_oracle() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let (q, k, v) = (random(&[1, 2, 3], &mut rng), random(&[1, 4, 3], &mut rng), random(&[1, 4, 3], &mut rng));
            let w = random(&[3], &mut rng);
            let (c, _) = ccan(&q, &k, &v, &[false; 4], &GateParams { w: w.clone() }, WindowSpec::new(3).unwrap()).unwrap();
            let want = ccan_oracle(q.data(), k.data(), v.data(), w.data(), 2, 4, 3, 3);
            for (a, b) in c.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "seed {seed}");
            }
        }
    }

    #[test]
    fn attention_mask_layout() {
        let m = attention_mask(2, 1, 2, 3, &[false, false, true, false, false, false], true);
        assert_eq!(m.shape(), &[2, 2, 3]);
        assert_eq!(m.row(0), &[false, true, true]);
        assert_eq!(m.row(1), &[false, false, true]);
        assert_eq!(m.row(2), &[false, true, true]);
        assert_eq!(m.row(3), &[false, false, true]);
    }

    fn layer_fixture(heads: usize, with_gate: bool) -> (ParamStore<f64>, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(42);
        let mha = MultiHeadAttention::new(&mut store, "x", 8, heads, with_gate, &mut rng).unwrap();
        (store, mha)
    }

    #[test]
    fn heads_must_divide_model_dim() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = RngState::new(0);
        assert!(matches!(
            MultiHeadAttention::new(&mut store, "x", 10, 4, false, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn layer_vanilla_equals_wide_ccan() {
        let (mut store, mha) = layer_fixture(2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        store.get_mut(mha.gate.unwrap()).value = random(&[8], &mut rng);
        let dec = random(&[3, 8], &mut rng);
        let enc = random(&[4, 8], &mut rng);
        let pad = [false; 4];
        let run = |mode| {
            let mut g = Graph::inference();
            let (x, e) = (g.constant(dec.clone()), g.constant(enc.clone()));
            let dims = AttnDims { batch: 1, tq: 3, tk: 4, key_pad: &pad, causal: false };
            let (o, _) = mha.forward(&mut g, &store, x, e, dims, mode).unwrap();
            g.value(o).clone()
        };
        let a = run(CrossAttnMode::Vanilla);
        let b = run(CrossAttnMode::Ccan(WindowSpec::new(7).unwrap()));
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn single_head_layer_reduces_to_ccan_op() {
        let (mut store, mha) = layer_fixture(1, true);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        store.get_mut(mha.gate.unwrap()).value = random(&[8], &mut rng);
        let dec = random(&[3, 8], &mut rng);
        let enc = random(&[5, 8], &mut rng);
        let pad = [false, false, false, false, true];
        let win = WindowSpec::new(3).unwrap();

        let mut g = Graph::inference();
        let (x, e) = (g.constant(dec.clone()), g.constant(enc.clone()));
        let dims = AttnDims { batch: 1, tq: 3, tk: 5, key_pad: &pad, causal: false };
        let (o, trace) = mha.forward(&mut g, &store, x, e, dims, CrossAttnMode::Ccan(win)).unwrap();

        let proj = |lin: &Linear, x: &Tensor<f64>| {
            let mut y = crate::numerics::matmul(x, store.value(lin.w)).unwrap();
            for r in 0..y.rows() {
                for (a, b) in y.row_mut(r).iter_mut().zip(store.value(lin.b).data()) {
                    *a += b;
                }
            }
            y
        };
        let q = proj(&mha.q_proj, &dec).reshape(&[1, 3, 8]).unwrap();
        let k = proj(&mha.k_proj, &enc).reshape(&[1, 5, 8]).unwrap();
        let v = proj(&mha.v_proj, &enc).reshape(&[1, 5, 8]).unwrap();
        let gp = GateParams { w: store.value(mha.gate.unwrap()).clone() };
        let (ctx, dump) = ccan(&q, &k, &v, &pad, &gp, win).unwrap();
        let want = proj(&mha.out_proj, &ctx.reshape(&[3, 8]).unwrap());
        assert!(g.value(o).max_abs_diff(&want) < 1e-12);
        assert!(trace.gate.unwrap().max_abs_diff(&dump.g.0) < 1e-15);
    }

    /// Builds a layer input whose every score row has a clear argmax so
    /// finite differences never move the window.
    #[test]
    fn layer_gradient_matches_finite_differences() {
        let (mut store, mha) = layer_fixture(2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        store.get_mut(mha.gate.unwrap()).value = random(&[8], &mut rng);
        let win = WindowSpec::new(3).unwrap();
        let pad = [false, false, false, false, false, true];
        let h = 1e-5;

        let mut checked = 0;
        for trial in 0..200u64 {
            let mut r = ChaCha8Rng::seed_from_u64(1000 + trial);
            let dec = random(&[3, 8], &mut r);
            let enc = random(&[6, 8], &mut r);
            let wo = random(&[3, 8], &mut r);

            // margin test on the actual score rows
            let mut g = Graph::inference();
            let (x, e) = (g.constant(dec.clone()), g.constant(enc.clone()));
            let dims = AttnDims { batch: 1, tq: 3, tk: 6, key_pad: &pad, causal: false };
            let (_, trace) = mha.forward(&mut g, &store, x, e, dims, CrossAttnMode::Ccan(win)).unwrap();
            // softmax is monotone in the score, so compare log-probabilities
            let margin_ok = (0..trace.global.rows()).all(|row| {
                let p = trace.global.row(row);
                let mut sorted: Vec<f64> = p.iter().copied().filter(|&x| x > 0.0).map(f64::ln).collect();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                sorted[0] - sorted[1] > 10.0 * h
            });
            if !margin_ok {
                continue;
            }
            let report = check_gradients(&[dec, enc], h, |g, v| {
                let dims = AttnDims { batch: 1, tq: 3, tk: 6, key_pad: &pad, causal: false };
                let (o, _) = mha.forward(g, &store, v[0], v[1], dims, CrossAttnMode::Ccan(win))?;
                let w = g.constant(wo.clone());
                let p = g.mul(o, w)?;
                Ok(g.sum(p))
            })
            .unwrap();
            assert!(report.max_rel_error() < 1e-4, "{:?}", report.rel_errors);
            checked += 1;
            if checked == 10 {
                break;
            }
        }
        assert_eq!(checked, 10);
    }

    #[test]
    fn layer_parameter_gradients_match_finite_differences() {
        let (mut store, mha) = layer_fixture(2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        store.get_mut(mha.gate.unwrap()).value = random(&[8], &mut rng);
        let win = WindowSpec::new(3).unwrap();
        let pad = [false; 5];
        let dec = random(&[2, 8], &mut rng);
        let enc = random(&[5, 8], &mut rng);
        let wo = random(&[2, 8], &mut rng);

        let loss = |store: &ParamStore<f64>, g: &mut Graph<f64>| -> Var {
            let (x, e) = (g.constant(dec.clone()), g.constant(enc.clone()));
            let dims = AttnDims { batch: 1, tq: 2, tk: 5, key_pad: &pad, causal: false };
            let (o, _) = mha.forward(g, store, x, e, dims, CrossAttnMode::Ccan(win)).unwrap();
            let w = g.constant(wo.clone());
            let p = g.mul(o, w).unwrap();
            g.sum(p)
        };
        let mut g = Graph::new();
        let l = loss(&store, &mut g);
        g.backward(l).unwrap().accumulate_into(&mut store).unwrap();

        let h = 1e-5;
        // the key bias has an identically zero gradient (row-constant score shift)
        for id in [mha.gate.unwrap(), mha.q_proj.w, mha.k_proj.w, mha.v_proj.w, mha.out_proj.b] {
            let analytic = store.get(id).grad.clone();
            let mut num = vec![0.0; analytic.len()];
            for j in 0..analytic.len() {
                let orig = store.value(id).data()[j];
                let eval = |x: f64| {
                    let mut s = store.clone();
                    s.get_mut(id).value.data_mut()[j] = x;
                    let mut g = Graph::inference();
                    let l = loss(&s, &mut g);
                    g.value(l).data()[0]
                };
                num[j] = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            }
            let diff: f64 = analytic.data().iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = num.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            assert!(diff / norm < 1e-4, "{} rel err {}", store.get(id).name, diff / norm);
        }
    }
}
