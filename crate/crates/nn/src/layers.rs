//! Standard building blocks. Each layer holds only [`ParamId`]s and sizes,
//! so one layer value can drive stores of either scalar type.

use rand::Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Xavier-uniform weight, zero bias.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let weight = store.add_xavier(format!("{name}.weight"), vec![d_in, d_out], d_in, d_out, rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![1, d_out]))?;
        Ok(Linear { weight, bias, d_in, d_out })
    }

    /// Weight and bias both start at zero.
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(vec![d_in, d_out]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![1, d_out]))?;
        Ok(Linear { weight, bias, d_in, d_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    pub fn num_scalars(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(vec![1, dim]))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![1, dim]))?;
        Ok(LayerNorm { gamma, beta, eps, dim })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        layer_norm(g, x, self.gamma, self.beta, self.eps)
    }
}

/// `normalize(x) * gamma + beta` over the last axis.
pub fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, gamma: ParamId, beta: ParamId, eps: f64) -> Result<Var> {
    let cols = g.value(x).cols();
    let gv = g.param(gamma);
    if g.value(gv).cols() != cols {
        return Err(NnError::ShapeMismatch {
            op: "layer_norm",
            detail: format!("gamma width {} vs input width {cols}", g.value(gv).cols()),
        });
    }
    let bv = g.param(beta);
    let n = g.normalize(x, T::lit(eps));
    let s = g.mul(n, gv)?;
    g.add(s, bv)
}

/// Learned lookup table.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        rows: usize,
        dim: usize,
    ) -> Result<Self> {
        let table = store.add_xavier(format!("{name}.table"), vec![rows, dim], rows, dim, rng)?;
        Ok(Embedding { table, rows, dim })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, indices: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.gather(t, indices)
    }
}

/// 1-D convolution over time with "same" zero padding and a bias.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub width: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Conv1d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        width: usize,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        if width.is_multiple_of(2) {
            return Err(NnError::ShapeMismatch {
                op: "conv1d",
                detail: format!("kernel width {width} must be odd"),
            });
        }
        let kernel = store.add_xavier(
            format!("{name}.kernel"),
            vec![width, d_in, d_out],
            width * d_in,
            d_out,
            rng,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![1, d_out]))?;
        Ok(Conv1d { kernel, bias, width, d_in, d_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let k = g.param(self.kernel);
        let b = g.param(self.bias);
        let y = g.conv1d(x, k)?;
        g.add(y, b)
    }
}

/// Multi-head scaled dot-product attention with input and output
/// projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Attention result plus the per-head weight matrices.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(NnError::ShapeMismatch {
                op: "attention",
                detail: format!("dim {dim} not divisible by {heads} heads"),
            });
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim)?,
            key: Linear::new(store, rng, &format!("{name}.k"), dim, dim)?,
            value: Linear::new(store, rng, &format!("{name}.v"), dim, dim)?,
            output: Linear::new(store, rng, &format!("{name}.o"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        context: Var,
        causal: bool,
        dropout: f64,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, query, context, causal, dropout)?.output)
    }

    pub fn forward_with_weights<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        context: Var,
        causal: bool,
        dropout: f64,
    ) -> Result<AttentionOutput> {
        let (nq, nk) = (g.value(query).rows(), g.value(context).rows());
        let q = self.query.forward(g, query)?;
        let k = self.key.forward(g, context)?;
        let v = self.value.forward(g, context)?;
        let dh = self.dim / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mask = if causal {
            let mut m = Tensor::zeros(vec![nq, nk]);
            for i in 0..nq {
                for j in (i + 1)..nk {
                    m.data_mut()[i * nk + j] = T::lit(-1e9);
                }
            }
            Some(g.constant(m))
        } else {
            None
        };
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let w = g.softmax(scores);
            weights.push(w);
            let w = g.dropout(w, dropout)?;
            heads.push(g.matmul(w, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let output = self.output.forward(g, cat)?;
        Ok(AttentionOutput { output, weights })
    }
}

/// Position-wise `Linear -> GELU -> Linear` with dropout on the output.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden)?,
            outer: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.gelu(h);
        let y = self.outer.forward(g, h)?;
        g.dropout(y, dropout)
    }
}

/// Fixed sinusoidal position table, `len x dim`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            data.push(T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::matrix(len, dim, data).expect("non-empty table")
}
