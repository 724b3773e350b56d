//! Autoregressive pose generator: padded context, positional / padding /
//! time-to-arrival embeddings, style-conditioned blocks and gated fusion of
//! the long-history embedding.

use dance_nn::layers::{sinusoidal_positions, Embedding, Linear};
use dance_nn::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use super::block::{make_norm, Block, Norm};
use super::history::HistoryEncoder;
use crate::beats::{tta_encode, BeatTrack};
use crate::config::{Fusion, ModelConfig};
use crate::error::{DanceError, Result};

/// Repeats the last row `n` times. The mask is 1 on padded rows.
pub fn pad_motion<T: Scalar>(x: &Tensor<T>, n: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (w, d) = (x.rows(), x.cols());
    if w == 0 {
        return Err(DanceError::TooShort("empty context".into()));
    }
    let mut data = x.data().to_vec();
    for _ in 0..n {
        data.extend_from_slice(x.row(w - 1));
    }
    let mut mask = vec![0; w];
    mask.extend(std::iter::repeat_n(1, n));
    Ok((Tensor::matrix(w + n, d, data)?, mask))
}

/// Multimodal adaptation gate with scalar biases:
/// `g = relu(W_g [z; e] + b_g)`, `h = g * (W_h e) + b_h`,
/// `z' = z + min(beta |z| / |h|, 1) h`.
#[derive(Clone, Debug)]
pub struct Mag {
    pub gate: ParamId,
    pub gate_bias: ParamId,
    pub hidden: ParamId,
    pub hidden_bias: ParamId,
    pub beta: f64,
}

impl Mag {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize, beta: f64) -> Result<Self> {
        Ok(Mag {
            gate: store.add_xavier(format!("{name}.gate"), vec![2 * dim, dim], 2 * dim, dim, rng)?,
            gate_bias: store.add(format!("{name}.gate_bias"), Tensor::zeros(vec![1, 1]))?,
            hidden: store.add_xavier(format!("{name}.hidden"), vec![dim, dim], dim, dim, rng)?,
            hidden_bias: store.add(format!("{name}.hidden_bias"), Tensor::zeros(vec![1, 1]))?,
            beta,
        })
    }

    /// Fuses row `i` of `e` into row `i` of `z`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, z: Var, e: Var) -> Result<Var> {
        let (h, _) = self.forward_with_alpha(g, z, e)?;
        Ok(h)
    }

    pub fn forward_with_alpha<T: Scalar>(&self, g: &mut Graph<'_, T>, z: Var, e: Var) -> Result<(Var, Var)> {
        let ze = g.concat_cols(&[z, e])?;
        let wg = g.param(self.gate);
        let bg = g.param(self.gate_bias);
        let pre = g.matmul(ze, wg)?;
        let pre = g.add(pre, bg)?;
        let gate = g.relu(pre);
        let wh = g.param(self.hidden);
        let bh = g.param(self.hidden_bias);
        let he = g.matmul(e, wh)?;
        let h = g.mul(gate, he)?;
        let h = g.add(h, bh)?;
        let alpha = g.mag_alpha(z, h, T::lit(self.beta))?;
        let scaled = g.mul(h, alpha)?;
        Ok((g.add(z, scaled)?, alpha))
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub input: Linear,
    pub pad_embed: Embedding,
    pub beat_embed: Embedding,
    /// Projection of style rows into extra tokens (`mt` fusion only).
    pub style_tokens: Option<Linear>,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    pub mag: Option<Mag>,
    pub history: Option<HistoryEncoder>,
    pub pose_head: Linear,
    pub contact_head: Linear,
    pub cfg: ModelConfig,
}

/// One prediction step's inputs. `context` is `w_ctx x D`, `beats` covers
/// `w_ctx + n` frames, `style` is `H_style` and `e_hist` is `n x d`.
pub struct StepInput<'a> {
    pub context: Var,
    pub beats: &'a BeatTrack,
    pub style: Var,
    pub e_hist: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// `n x D`
    pub poses: Var,
    /// `n x 2`
    pub contact_logits: Var,
}

impl Generator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let dim = cfg.motion_dim();
        let cond = match cfg.fusion {
            Fusion::Cln => Some((d, cfg.ffn)),
            Fusion::Mt => None,
        };
        let input = Linear::new(store, rng, "gen.input", dim, d)?;
        let pad_embed = Embedding::new(store, rng, "gen.pad", 2, d)?;
        let beat_embed = Embedding::new(store, rng, "gen.beat", cfg.tta_cap + 1, d)?;
        let style_tokens = match cfg.fusion {
            Fusion::Mt => Some(Linear::new(store, rng, "gen.style_tokens", d, d)?),
            Fusion::Cln => None,
        };
        let blocks = (0..cfg.layers)
            .map(|l| Block::new(store, rng, &format!("gen.block{l}"), d, cfg.heads, cfg.ffn, cond))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = make_norm(store, rng, "gen.norm", d, cond)?;
        let (mag, history) = if cfg.long_history.is_on() {
            (
                Some(Mag::new(store, rng, "gen.mag", d, cfg.mag_beta)?),
                Some(HistoryEncoder::new(store, rng, "hist", cfg.m, cfg.n, cfg.history_kernel, dim, d)?),
            )
        } else {
            (None, None)
        };
        let pose_head = Linear::zeroed(store, "gen.pose_head", d, dim)?;
        let contact_head = Linear::new(store, rng, "gen.contact_head", d, 2)?;
        Ok(Generator {
            input,
            pad_embed,
            beat_embed,
            style_tokens,
            blocks,
            final_norm,
            mag,
            history,
            pose_head,
            contact_head,
            cfg: cfg.clone(),
        })
    }

    /// Input embeddings for the padded window: projection plus sinusoidal
    /// position, padding flag and time-to-arrival lookups.
    fn embed<T: Scalar>(&self, g: &mut Graph<'_, T>, context: Var, beats: &BeatTrack) -> Result<Var> {
        let (w, n) = (self.cfg.w_ctx, self.cfg.n);
        let cv = g.value(context);
        if cv.rows() != w || cv.cols() != self.cfg.motion_dim() {
            return Err(DanceError::DimensionMismatch(format!(
                "context {}x{}, expected {w}x{}",
                cv.rows(),
                cv.cols(),
                self.cfg.motion_dim()
            )));
        }
        if beats.len() != w + n {
            return Err(DanceError::DimensionMismatch(format!(
                "beat track of {} frames, expected {}",
                beats.len(),
                w + n
            )));
        }
        let mut rows: Vec<usize> = (0..w).collect();
        rows.extend(std::iter::repeat_n(w - 1, n));
        let padded = g.gather(context, &rows)?;
        let mask: Vec<usize> = (0..w + n).map(|i| usize::from(i >= w)).collect();
        let tta = tta_encode(beats, self.cfg.tta_cap).values;
        let x = self.input.forward(g, padded)?;
        let pos = g.constant(sinusoidal_positions(w + n, self.cfg.d_model));
        let x = g.add(x, pos)?;
        let pad = self.pad_embed.forward(g, &mask)?;
        let x = g.add(x, pad)?;
        let beat = self.beat_embed.forward(g, &tta)?;
        Ok(g.add(x, beat)?)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, input: &StepInput<'_>) -> Result<StepOutput> {
        let (w, n) = (self.cfg.w_ctx, self.cfg.n);
        let mut x = self.embed(g, input.context, input.beats)?;
        let cond = match self.cfg.fusion {
            Fusion::Cln => Some(g.mean_rows(input.style)),
            Fusion::Mt => {
                let proj = self.style_tokens.as_ref().expect("mt fusion has a style projection");
                let s = proj.forward(g, input.style)?;
                x = g.concat_rows(&[s, x])?;
                None
            }
        };
        let total = g.value(x).rows();
        let dropout = self.cfg.dropout;
        for (l, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, x, cond, dropout)?;
            if l == self.cfg.mag_layer {
                if let (Some(mag), Some(e)) = (&self.mag, input.e_hist) {
                    let head = g.slice_rows(x, 0, total - n)?;
                    let tail = g.slice_rows(x, total - n, n)?;
                    let fused = mag.forward(g, tail, e)?;
                    x = g.concat_rows(&[head, fused])?;
                }
            }
        }
        let x = self.final_norm.forward(g, x, cond)?;
        let last = g.slice_rows(x, total - n, n)?;
        let mut poses = self.pose_head.forward(g, last)?;
        if self.cfg.residual_head {
            let rows = vec![w - 1; n];
            let base = g.gather(input.context, &rows)?;
            poses = g.add(poses, base)?;
        }
        let contact_logits = self.contact_head.forward(g, last)?;
        for (v, what) in [(poses, "poses"), (contact_logits, "contact logits")] {
            if !g.value(v).is_finite() {
                return Err(DanceError::NonFiniteActivation(what.into()));
            }
        }
        Ok(StepOutput { poses, contact_logits })
    }
}
