//! Music and motion style encoders and the triplet loss on pooled music
//! embeddings.

use dance_nn::layers::{sinusoidal_positions, LayerNorm, Linear};
use dance_nn::{Graph, ParamStore, Scalar, Var};
use rand::Rng;

use super::block::{Block, LN_EPS};
use crate::config::ModelConfig;
use crate::error::{DanceError, Result};

/// Input projection, sinusoidal positions, unmasked Transformer blocks and a
/// final layer norm. Maps `w_style x d_in` to `w_style x d_model`.
#[derive(Clone, Debug)]
pub struct StyleEncoder {
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub w_style: usize,
    pub dropout: f64,
}

impl StyleEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let input = Linear::new(store, rng, &format!("{name}.input"), d_in, cfg.d_model)?;
        let blocks = (0..cfg.style_layers)
            .map(|l| Block::new(store, rng, &format!("{name}.block{l}"), cfg.d_model, cfg.heads, cfg.ffn, None))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), cfg.d_model, LN_EPS)?;
        Ok(StyleEncoder {
            input,
            blocks,
            norm,
            w_style: cfg.w_style,
            dropout: cfg.dropout,
        })
    }

    pub fn d_in(&self) -> usize {
        self.input.d_in
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let v = g.value(x);
        if v.rows() != self.w_style || v.cols() != self.d_in() {
            return Err(DanceError::BadLength {
                expected: self.w_style,
                got: v.rows(),
            });
        }
        let h = self.input.forward(g, x)?;
        let pos = g.constant(sinusoidal_positions(self.w_style, self.input.d_out));
        let mut h = g.add(h, pos)?;
        for b in &self.blocks {
            h = b.forward(g, h, None, self.dropout)?;
        }
        Ok(self.norm.forward(g, h)?)
    }
}

/// `H_style = H_music + H_motion`.
pub fn style_embedding<T: Scalar>(g: &mut Graph<'_, T>, h_music: Var, h_motion: Var) -> Result<Var> {
    Ok(g.add(h_music, h_motion)?)
}

/// Mean over time, `1 x d`.
pub fn mean_pool<T: Scalar>(g: &mut Graph<'_, T>, h: Var) -> Var {
    g.mean_rows(h)
}

/// `max(|a - p| - |a - n| + margin, 0)` on pooled `1 x d` embeddings.
pub fn triplet_loss<T: Scalar>(g: &mut Graph<'_, T>, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    let dp = g.sub(anchor, positive)?;
    let dp = g.row_norm(dp);
    let dn = g.sub(anchor, negative)?;
    let dn = g.row_norm(dn);
    let diff = g.sub(dp, dn)?;
    let m = g.constant(dance_nn::Tensor::scalar(T::lit(margin)));
    let z = g.add(diff, m)?;
    Ok(g.relu(z))
}

/// The hinge on precomputed distances.
pub fn triplet_hinge(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (d_pos - d_neg + margin).max(0.0)
}
