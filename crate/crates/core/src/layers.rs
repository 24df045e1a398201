//! Small parameterized building blocks recorded on a [`Graph`].

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Real, RngState, Tensor, Var};

/// Uniform Glorot initialization for a `[fan_in, fan_out]` matrix.
pub(crate) fn xavier<F: Real>(rng: &mut RngState, fan_in: usize, fan_out: usize) -> Tensor<F> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| F::of(rng.uniform(-a, a))).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("positive dims")
}

/// `y = x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d_in: usize, d_out: usize, rng: &mut RngState) -> Self {
        let w = store.add(format!("{name}.weight"), xavier(rng, d_in, d_out));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Linear { w, b }
    }

    /// Zero-initialized layer; draws nothing from the RNG.
    pub fn zeros<F: Real>(store: &mut ParamStore<F>, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(&[d_in, d_out]));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Linear { w, b }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[d], F::one()));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d]));
        LayerNorm { gain, bias }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, F::of(LN_EPS))
    }
}

/// Position-wise `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d_model: usize, d_ff: usize, rng: &mut RngState) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.fc1"), d_model, d_ff, rng),
            outer: Linear::new(store, &format!("{name}.fc2"), d_ff, d_model, rng),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.relu(h);
        self.outer.forward(g, store, h)
    }
}
