//! Dense layers and multi-head attention with explicit backward passes.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// Replaces every nonlinearity by the identity; used by gradient tests.
    Identity,
}

impl Activation {
    pub fn apply(self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => x.mapv(|v| v.max(0.0)),
            Activation::Identity => x.clone(),
        }
    }

    /// Multiplies `grad` by the derivative evaluated at pre-activation `x`.
    pub fn backward(self, x: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => {
                let mut g = grad.clone();
                g.zip_mut_with(x, |g, &v| {
                    if v <= 0.0 {
                        *g = 0.0
                    }
                });
                g
            }
            Activation::Identity => grad.clone(),
        }
    }
}

/// Uniform bound `sqrt(3 / fan_in)`, which gives unit-gain variance `1 / fan_in`.
pub(crate) fn fan_in_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

pub(crate) fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// `y = x W + b` with `W` stored input-major (`in x out`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform weights with variance `1 / fan_in`, zero bias.
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = fan_in_bound(fan_in);
        Self {
            weight: uniform_matrix(rng, fan_in, fan_out, bound),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.weight.nrows(), self.weight.ncols())
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(&self, x: &ArrayView2<f64>, dy: &Array2<f64>, grads: &mut Linear) -> Array2<f64> {
        grads.weight += &x.t().dot(dy);
        grads.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Multi-head scaled dot-product attention with per-head projections
/// `W_Q, W_K, W_V: d x d_h` and output projection `W_O: (h d_h) x d`. No biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub query: Vec<Array2<f64>>,
    pub key: Vec<Array2<f64>>,
    pub value: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub probs: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub heads: Vec<HeadCache>,
    pub concat: Array2<f64>,
}

impl Attention {
    pub fn init(rng: &mut impl Rng, d: usize, heads: usize, head_dim: usize) -> Self {
        let b_in = fan_in_bound(d);
        let b_out = fan_in_bound(heads * head_dim);
        let proj = |rng: &mut _| -> Vec<Array2<f64>> {
            (0..heads).map(|_| uniform_matrix(rng, d, head_dim, b_in)).collect()
        };
        let query = proj(rng);
        let key = proj(rng);
        let value = proj(rng);
        Self {
            query,
            key,
            value,
            output: uniform_matrix(rng, heads * head_dim, d, b_out),
        }
    }

    pub fn zeros(d: usize, heads: usize, head_dim: usize) -> Self {
        let z = || vec![Array2::zeros((d, head_dim)); heads];
        Self {
            query: z(),
            key: z(),
            value: z(),
            output: Array2::zeros((heads * head_dim, d)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.model_dim(), self.heads(), self.head_dim())
    }

    /// Identity-like projections (`d_h = d`, one head, `W_O = I`).
    pub fn identity(d: usize) -> Self {
        let eye = Array2::eye(d);
        Self {
            query: vec![eye.clone()],
            key: vec![eye.clone()],
            value: vec![eye.clone()],
            output: eye,
        }
    }

    pub fn heads(&self) -> usize {
        self.query.len()
    }

    pub fn head_dim(&self) -> usize {
        self.query[0].ncols()
    }

    pub fn model_dim(&self) -> usize {
        self.query[0].nrows()
    }

    pub fn forward(&self, xq: &ArrayView2<f64>, xkv: &ArrayView2<f64>) -> (Array2<f64>, AttentionCache) {
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads());
        let mut outs = Vec::with_capacity(self.heads());
        for i in 0..self.heads() {
            let q = xq.dot(&self.query[i]);
            let k = xkv.dot(&self.key[i]);
            let v = xkv.dot(&self.value[i]);
            let probs = softmax_rows(&(q.dot(&k.t()) * scale));
            outs.push(probs.dot(&v));
            heads.push(HeadCache { q, k, v, probs });
        }
        let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
        let concat = concatenate(Axis(1), &views).expect("heads share row count");
        let out = concat.dot(&self.output);
        (out, AttentionCache { heads, concat })
    }

    /// Returns gradients with respect to the query-side and key/value-side inputs.
    pub fn backward(
        &self,
        xq: &ArrayView2<f64>,
        xkv: &ArrayView2<f64>,
        cache: &AttentionCache,
        dout: &Array2<f64>,
        grads: &mut Attention,
    ) -> (Array2<f64>, Array2<f64>) {
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        let dh = self.head_dim();
        grads.output += &cache.concat.t().dot(dout);
        let dconcat = dout.dot(&self.output.t());
        let mut dxq = Array2::zeros(xq.raw_dim());
        let mut dxkv = Array2::zeros(xkv.raw_dim());
        for (i, head) in cache.heads.iter().enumerate() {
            let dhead = dconcat.slice(s![.., i * dh..(i + 1) * dh]);
            let dv = head.probs.t().dot(&dhead);
            let dprobs = dhead.dot(&head.v.t());
            // Softmax Jacobian applied row-wise: dS = P ⊙ (dP - rowsum(dP ⊙ P)).
            let mut dscores = &head.probs * &dprobs;
            let row_sums = dscores.sum_axis(Axis(1));
            for (mut row, (p_row, &rs)) in dscores
                .rows_mut()
                .into_iter()
                .zip(head.probs.rows().into_iter().zip(row_sums.iter()))
            {
                row.zip_mut_with(&p_row, |d, &p| *d -= p * rs);
            }
            dscores *= scale;
            let dq = dscores.dot(&head.k);
            let dk = dscores.t().dot(&head.q);
            grads.query[i] += &xq.t().dot(&dq);
            grads.key[i] += &xkv.t().dot(&dk);
            grads.value[i] += &xkv.t().dot(&dv);
            dxq += &dq.dot(&self.query[i].t());
            dxkv += &dk.dot(&self.key[i].t());
            dxkv += &dv.dot(&self.value[i].t());
        }
        (dxq, dxkv)
    }
}
