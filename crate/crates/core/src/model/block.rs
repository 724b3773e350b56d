//! Pre-norm Transformer blocks whose normalization sites are either plain
//! layer norm or style-conditioned layer norm.

use dance_nn::layers::{layer_norm, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use dance_nn::{Graph, ParamStore, Scalar, Var};
use rand::Rng;

use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// Layer norm whose scale and shift receive corrections predicted from a
/// conditioning vector: `normalize(x) * (gamma + dg) + (beta + db)` with
/// `dg = MLP_g(s)`, `db = MLP_b(s)`.
#[derive(Clone, Debug)]
pub struct ConditionalLayerNorm {
    pub base: LayerNorm,
    pub gamma_mlp: [Linear; 2],
    pub beta_mlp: [Linear; 2],
}

impl ConditionalLayerNorm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        cond_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(ConditionalLayerNorm {
            base: LayerNorm::new(store, name, dim, LN_EPS)?,
            gamma_mlp: [
                Linear::new(store, rng, &format!("{name}.dgamma.0"), cond_dim, hidden)?,
                Linear::new(store, rng, &format!("{name}.dgamma.1"), hidden, dim)?,
            ],
            beta_mlp: [
                Linear::new(store, rng, &format!("{name}.dbeta.0"), cond_dim, hidden)?,
                Linear::new(store, rng, &format!("{name}.dbeta.1"), hidden, dim)?,
            ],
        })
    }

    fn mlp<T: Scalar>(g: &mut Graph<'_, T>, mlp: &[Linear; 2], s: Var) -> Result<Var> {
        let h = mlp[0].forward(g, s)?;
        let h = g.gelu(h);
        Ok(mlp[1].forward(g, h)?)
    }

    /// `cond` is the `1 x d_s` pooled style vector.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, cond: Var) -> Result<Var> {
        let dg = Self::mlp(g, &self.gamma_mlp, cond)?;
        let db = Self::mlp(g, &self.beta_mlp, cond)?;
        let gamma = g.param(self.base.gamma);
        let beta = g.param(self.base.beta);
        let scale = g.add(gamma, dg)?;
        let shift = g.add(beta, db)?;
        let n = g.normalize(x, T::lit(self.base.eps));
        let y = g.mul(n, scale)?;
        Ok(g.add(y, shift)?)
    }
}

#[derive(Clone, Debug)]
pub enum Norm {
    Plain(LayerNorm),
    Conditional(ConditionalLayerNorm),
}

impl Norm {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, cond: Option<Var>) -> Result<Var> {
        match (self, cond) {
            (Norm::Conditional(c), Some(s)) => c.forward(g, x, s),
            (Norm::Conditional(c), None) => Ok(layer_norm(g, x, c.base.gamma, c.base.beta, c.base.eps)?),
            (Norm::Plain(ln), _) => Ok(ln.forward(g, x)?),
        }
    }
}

/// Builds either kind of norm; `cond` carries `(cond_dim, hidden)` for the
/// conditional variant.
pub fn make_norm<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    dim: usize,
    cond: Option<(usize, usize)>,
) -> Result<Norm> {
    Ok(match cond {
        Some((cd, hidden)) => Norm::Conditional(ConditionalLayerNorm::new(store, rng, name, dim, cd, hidden)?),
        None => Norm::Plain(LayerNorm::new(store, name, dim, LN_EPS)?),
    })
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: Norm,
    pub attn: MultiHeadAttention,
    pub norm2: Norm,
    pub ffn: FeedForward,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
        cond: Option<(usize, usize)>,
    ) -> Result<Self> {
        Ok(Block {
            norm1: make_norm(store, rng, &format!("{name}.norm1"), dim, cond)?,
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            norm2: make_norm(store, rng, &format!("{name}.norm2"), dim, cond)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn)?,
        })
    }

    /// Bidirectional self-attention then feed-forward, each behind a norm
    /// and a residual connection.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, cond: Option<Var>, dropout: f64) -> Result<Var> {
        let h = self.norm1.forward(g, x, cond)?;
        let a = self.attn.forward(g, h, h, false, dropout)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x, cond)?;
        let f = self.ffn.forward(g, h, dropout)?;
        Ok(g.add(x, f)?)
    }
}
