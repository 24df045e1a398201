//! Taped reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the forward value. [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar node with respect to every recorded node
//! that needs one (parameters and explicit variables).

use crate::error::{Error, Result};
use crate::numerics::ops::{self, gemm};
use crate::numerics::param::{ParamId, ParamStore};
use crate::numerics::tensor::{Mask, Real, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F: Real> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        tb: bool,
        alpha: F,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    MulRows(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    MaskFill(Var, Mask),
    Softmax(Var),
    SplitHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Vec<bool>,
        probs: Tensor<F>,
        kept: usize,
    },
    Sum(Var),
    Reshape(Var),
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Tape of recorded operations.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    track_params: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// [B*T, h*dh] -> [B*h, T, dh]
fn split_heads_data<F: Real>(src: &[F], batch: usize, len: usize, heads: usize) -> Vec<F> {
    let d = src.len() / (batch * len);
    let dh = d / heads;
    let mut out = vec![F::zero(); src.len()];
    for b in 0..batch {
        for t in 0..len {
            let row = &src[(b * len + t) * d..(b * len + t + 1) * d];
            for h in 0..heads {
                let dst = ((b * heads + h) * len + t) * dh;
                out[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
            }
        }
    }
    out
}

/// [B*h, T, dh] -> [B*T, h*dh]
fn merge_heads_data<F: Real>(src: &[F], batch: usize, len: usize, heads: usize) -> Vec<F> {
    let d = src.len() / (batch * len);
    let dh = d / heads;
    let mut out = vec![F::zero(); src.len()];
    for b in 0..batch {
        for t in 0..len {
            let row = &mut out[(b * len + t) * d..(b * len + t + 1) * d];
            for h in 0..heads {
                let s = ((b * heads + h) * len + t) * dh;
                row[h * dh..(h + 1) * dh].copy_from_slice(&src[s..s + dh]);
            }
        }
    }
    out
}

impl<F: Real> Graph<F> {
    /// Graph that records gradients for parameters.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            track_params: true,
        }
    }

    /// Graph for evaluation only: parameters are treated as constants.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            track_params: false,
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows to it.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let track = self.track_params;
        self.push(store.value(id).clone(), Op::Param(id), track)
    }

    /// `alpha * a·b` for `[m,k]·[k,n]`, or batched `[G,m,k]·[G,k,n]`.
    /// With `tb`, `b` is stored transposed (`[n,k]` / `[G,n,k]`).
    pub fn matmul_ext(&mut self, a: Var, b: Var, tb: bool, alpha: F) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok_rank = (sa.len() == 2 && sb.len() == 2) || (sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0]);
        if !ok_rank {
            return Err(Error::shape("matmul", sa, sb));
        }
        let r = sa.len();
        let batch = if r == 3 { sa[0] } else { 1 };
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let shape: Vec<usize> = if r == 3 { vec![batch, m, n] } else { vec![m, n] };
        let mut out = Tensor::zeros(&shape);
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let od = out.data_mut();
            for g in 0..batch {
                gemm(
                    &ad[g * m * k..(g + 1) * m * k],
                    &bd[g * k * n..(g + 1) * k * n],
                    &mut od[g * m * n..(g + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                    tb,
                    alpha,
                    F::zero(),
                );
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                tb,
                alpha,
            },
            ng,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, F::one())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds `bias [d]` to every row of `x [.., d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let bd = self.value(bias).data();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bd) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).map(|&v| v * s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Scales row `r` of `x [R, C]` by `s[r]`; `s` holds `R` values.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        if self.value(s).len() != rows {
            return Err(Error::shape("mul_rows", self.shape(x), self.shape(s)));
        }
        let mut out = self.value(x).clone();
        let sd = self.value(s).data();
        for r in 0..rows {
            let sr = sd[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= sr);
        }
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::MulRows(x, s), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|&v| if v > F::zero() { v } else { F::zero() });
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|&v| ops::sigmoid(v));
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let ln = ops::layer_norm_forward(self.value(x), self.value(gain), self.value(bias), eps)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            ln.y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: ln.xhat,
                rstd: ln.rstd,
            },
            ng,
        ))
    }

    /// Replaces entries flagged in `mask` with the `-inf` sentinel.
    pub fn mask_fill(&mut self, x: Var, mask: Mask) -> Result<Var> {
        if mask.shape() != self.shape(x) {
            return Err(Error::shape("mask_fill", self.shape(x), mask.shape()));
        }
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(mask.data()) {
            if m {
                *o = F::neg_infinity();
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::MaskFill(x, mask), ng))
    }

    /// Softmax over the last dimension; `-inf` entries get probability 0.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(x), None)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// `[B*T, h*dh] -> [B*h, T, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != batch * len || s[1] % heads != 0 {
            return Err(Error::shape("split_heads", s, &[batch, len, heads]));
        }
        let dh = s[1] / heads;
        let data = split_heads_data(self.value(x).data(), batch, len, heads);
        let out = Tensor::new(&[batch * heads, len, dh], data)?;
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::SplitHeads {
                x,
                batch,
                len,
                heads,
            },
            ng,
        ))
    }

    /// `[B*h, T, dh] -> [B*T, h*dh]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] != batch * heads {
            return Err(Error::shape("merge_heads", s, &[batch, heads]));
        }
        let (len, dh) = (s[1], s[2]);
        let data = merge_heads_data(self.value(x).data(), batch, len, heads);
        let out = Tensor::new(&[batch * len, heads * dh], data)?;
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::MergeHeads {
                x,
                batch,
                len,
                heads,
            },
            ng,
        ))
    }

    /// Gathers rows of `table [V, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding", t.shape(), &[ids.len()]));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary of {v}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Mean NLL over rows of `logits [N, V]` whose `ignore` flag is false.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: &[bool]) -> Result<Var> {
        let z = self.value(logits);
        let kept = ops::check_targets(z, targets, ignore)?;
        let probs = ops::softmax_rows(z, None)?;
        let mut total = F::zero();
        for (r, (&t, &ig)) in targets.iter().zip(ignore).enumerate() {
            if !ig {
                let row = z.row(r);
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
                total += lse - row[t];
            }
        }
        let loss = Tensor::scalar(total / F::of(kept as f64));
        let ng = self.needs(logits);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore: ignore.to_vec(),
                probs,
                kept,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<F>>], v: Var) -> &'g mut Tensor<F> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, f: impl Fn(usize) -> F) {
        if !self.needs(v) {
            return;
        }
        let slot = self.slot(grads, v);
        for (i, s) in slot.data_mut().iter_mut().enumerate() {
            *s += f(i);
        }
    }

    fn propagate(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                tb,
                alpha,
            } => {
                if self.needs(a) {
                    let bd = self.value(b).data();
                    let da = self.slot(grads, a);
                    for gi in 0..batch {
                        let dc = &gd[gi * m * n..(gi + 1) * m * n];
                        let bb = &bd[gi * k * n..(gi + 1) * k * n];
                        let out = &mut da.data_mut()[gi * m * k..(gi + 1) * m * k];
                        // dA = dC · op(B)ᵀ
                        gemm(dc, bb, out, m, n, k, false, !tb, alpha, F::one());
                    }
                }
                if self.needs(b) {
                    let ad = self.value(a).data();
                    let db = self.slot(grads, b);
                    for gi in 0..batch {
                        let dc = &gd[gi * m * n..(gi + 1) * m * n];
                        let aa = &ad[gi * m * k..(gi + 1) * m * k];
                        let out = &mut db.data_mut()[gi * k * n..(gi + 1) * k * n];
                        if tb {
                            // dBᵀ (n×k) = dCᵀ · A
                            gemm(dc, aa, out, n, m, k, true, false, alpha, F::one());
                        } else {
                            // dB (k×n) = Aᵀ · dC
                            gemm(aa, dc, out, k, m, n, true, false, alpha, F::one());
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |i| gd[i]);
                self.accumulate(grads, b, |i| gd[i]);
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |i| gd[i]);
                self.accumulate(grads, b, |i| -gd[i]);
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |i| gd[i] * vb[i]);
                self.accumulate(grads, b, |i| gd[i] * va[i]);
            }
            &Op::AddBias(x, bias) => {
                self.accumulate(grads, x, |i| gd[i]);
                if self.needs(bias) {
                    let d = g.last_dim();
                    let db = self.slot(grads, bias);
                    for r in 0..g.rows() {
                        for (o, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    debug_assert_eq!(db.len(), d);
                }
            }
            &Op::Scale(x, s) => self.accumulate(grads, x, |i| gd[i] * s),
            &Op::MulRows(x, s) => {
                let xv = self.value(x);
                let sd = self.value(s).data();
                let c = xv.last_dim();
                self.accumulate(grads, x, |i| gd[i] * sd[i / c]);
                if self.needs(s) {
                    let xd = xv.data();
                    let ds = self.slot(grads, s);
                    for (r, o) in ds.data_mut().iter_mut().enumerate() {
                        *o += (0..c).map(|j| gd[r * c + j] * xd[r * c + j]).sum::<F>();
                    }
                }
            }
            &Op::Relu(x) => {
                let y = node.value.data();
                self.accumulate(grads, x, |i| if y[i] > F::zero() { gd[i] } else { F::zero() });
            }
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                self.accumulate(grads, x, |i| gd[i] * y[i] * (F::one() - y[i]));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = g.last_dim();
                let gamma = self.value(*gain).data();
                if self.needs(*gain) {
                    let dg = self.slot(grads, *gain);
                    for (i, &v) in gd.iter().enumerate() {
                        dg.data_mut()[i % d] += v * xhat[i];
                    }
                }
                if self.needs(*bias) {
                    let db = self.slot(grads, *bias);
                    for (i, &v) in gd.iter().enumerate() {
                        db.data_mut()[i % d] += v;
                    }
                }
                if self.needs(*x) {
                    let inv_d = F::of(1.0 / d as f64);
                    let dx = self.slot(grads, *x);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = F::zero();
                        let mut mean_dh_h = F::zero();
                        for j in 0..d {
                            let dh = gr[j] * gamma[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        let out = &mut dx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rs * (gr[j] * gamma[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::MaskFill(x, mask) => {
                let md = mask.data();
                self.accumulate(grads, *x, |i| if md[i] { F::zero() } else { gd[i] });
            }
            &Op::Softmax(x) => {
                if self.needs(x) {
                    let y = &node.value;
                    let n = y.last_dim();
                    let dx = self.slot(grads, x);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &gd[r * n..(r + 1) * n];
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let out = dx.row_mut(r);
                        for j in 0..n {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::SplitHeads {
                x,
                batch,
                len,
                heads,
            } => {
                let back = merge_heads_data(gd, batch, len, heads);
                self.accumulate(grads, x, |i| back[i]);
            }
            &Op::MergeHeads {
                x,
                batch,
                len,
                heads,
            } => {
                let back = split_heads_data(gd, batch, len, heads);
                self.accumulate(grads, x, |i| back[i]);
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let dt = self.slot(grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                kept,
            } => {
                if self.needs(*logits) {
                    let scale = gd[0] / F::of(*kept as f64);
                    let dz = self.slot(grads, *logits);
                    for (r, (&t, &ig)) in targets.iter().zip(ignore).enumerate() {
                        if ig {
                            continue;
                        }
                        let pr = probs.row(r);
                        let out = dz.row_mut(r);
                        for j in 0..pr.len() {
                            out[j] += pr[j] * scale;
                        }
                        out[t] -= scale;
                    }
                }
            }
            &Op::Sum(x) => self.accumulate(grads, x, |_| gd[0]),
            &Op::Reshape(x) => self.accumulate(grads, x, |i| gd[i]),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Real> Gradients<F> {
    /// Gradient with respect to a recorded node, if any flowed to it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds parameter gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) -> Result<()> {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }
}
