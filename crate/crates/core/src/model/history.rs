//! Attention over long motion history.
//!
//! Every `m`-frame window of the history is a key (pooled CNN features),
//! the `n` frames that follow it are its value (CNN features), and the last
//! `m` frames are the query. Windows and their values lie strictly before
//! the query window, so a history of `T` frames offers `T - 2m - n + 1` of
//! them.
//!
//! Each CNN is one "same"-padded convolution applied to its window alone.
//! With per-tap projections `y_j = X K_j`, a window's convolution is a sum
//! of shifted rows of the `y_j`, which lets all windows share one set of
//! projections.

use dance_nn::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{DanceError, Result};

/// Logits are clipped to this magnitude before the softmax.
pub const LOGIT_CLIP: f64 = 50.0;

#[derive(Clone, Debug)]
pub struct HistoryConv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct HistoryEncoder {
    pub query: HistoryConv,
    pub key: HistoryConv,
    pub value: HistoryConv,
    pub m: usize,
    pub n: usize,
    pub width: usize,
    pub d_in: usize,
    pub d_out: usize,
}

/// Output of the graph encoder: `e_hist` is `n x d`, `weights` is `1 x N`.
#[derive(Clone, Copy, Debug)]
pub struct HistoryOutput {
    pub e_hist: Var,
    pub weights: Var,
}

fn conv<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    width: usize,
    d_in: usize,
    d_out: usize,
) -> Result<HistoryConv> {
    let kernel = store.add_xavier(format!("{name}.kernel"), vec![width, d_in, d_out], width * d_in, d_out, rng)?;
    let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![1, d_out]))?;
    Ok(HistoryConv { kernel, bias })
}

impl HistoryEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        m: usize,
        n: usize,
        width: usize,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        if width.is_multiple_of(2) {
            return Err(DanceError::Config(format!("history kernel width {width} must be odd")));
        }
        Ok(HistoryEncoder {
            query: conv(store, rng, &format!("{name}.q"), width, d_in, d_out)?,
            key: conv(store, rng, &format!("{name}.k"), width, d_in, d_out)?,
            value: conv(store, rng, &format!("{name}.v"), width, d_in, d_out)?,
            m,
            n,
            width,
            d_in,
            d_out,
        })
    }

    pub fn min_history(&self) -> usize {
        2 * self.m + self.n
    }

    /// Number of key windows in a history of `t` frames.
    pub fn windows(&self, t: usize) -> usize {
        (t + 1).saturating_sub(self.min_history())
    }

    /// Rows `lo..=hi` of `y_j` that land inside a window of length `len`
    /// for tap `j`, relative to the window start.
    fn tap_range(&self, j: usize, len: usize) -> Option<(usize, usize)> {
        let p = self.width / 2;
        let lo = j.saturating_sub(p);
        let hi = (len - 1 + j).checked_sub(p)?.min(len - 1);
        (lo <= hi).then_some((lo, hi))
    }

    /// Per-tap projections of rows `start..start + len` of `x`.
    fn taps<T: Scalar>(&self, g: &mut Graph<'_, T>, c: &HistoryConv, x: Var, start: usize, len: usize) -> Result<Vec<Var>> {
        let xs = g.slice_rows(x, start, len)?;
        let k = g.param(c.kernel);
        (0..self.width)
            .map(|j| {
                let kj = self.tap_matrix(g, k, j)?;
                Ok(g.matmul(xs, kj)?)
            })
            .collect()
    }

    fn tap_matrix<T: Scalar>(&self, g: &mut Graph<'_, T>, kernel: Var, j: usize) -> Result<Var> {
        // The kernel is stored `width x d_in x d_out`; graph values flatten
        // leading axes into rows, so tap `j` is a block of `d_in` rows.
        Ok(g.slice_rows(kernel, j * self.d_in, self.d_in)?)
    }

    /// Pooled CNN features of every `len`-frame window whose start lies in
    /// `0..count`, as a `count x d` matrix; `y` holds the tap projections
    /// of the frames those windows span.
    fn pooled<T: Scalar>(&self, g: &mut Graph<'_, T>, y: &[Var], len: usize, count: usize, bias: ParamId) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (j, &yj) in y.iter().enumerate() {
            if let Some((lo, hi)) = self.tap_range(j, len) {
                let s = g.window_sum(yj, lo, hi, count)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, s)?,
                    None => s,
                });
            }
        }
        let acc = acc.expect("centre tap always contributes");
        let mean = g.scale(acc, T::lit(1.0 / len as f64));
        let b = g.param(bias);
        Ok(g.add(mean, b)?)
    }

    /// Attention over the history held in `x` (`T x d_in`).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<HistoryOutput> {
        let t = g.value(x).rows();
        if g.value(x).cols() != self.d_in {
            return Err(DanceError::DimensionMismatch(format!(
                "history width {} vs {}",
                g.value(x).cols(),
                self.d_in
            )));
        }
        if t < self.min_history() {
            return Err(DanceError::InsufficientHistory {
                need: self.min_history(),
                have: t,
            });
        }
        let (m, n) = (self.m, self.n);
        let count = self.windows(t);

        let yq = self.taps(g, &self.query, x, t - m, m)?;
        let q = self.pooled(g, &yq, m, 1, self.query.bias)?;

        // Key windows start at 0..count and span count + m - 1 frames.
        let yk = self.taps(g, &self.key, x, 0, count + m - 1)?;
        let keys = self.pooled(g, &yk, m, count, self.key.bias)?;

        let qt = g.transpose(q);
        let logits = g.matmul(keys, qt)?;
        let logits = g.transpose(logits);
        let logits = g.clamp(logits, T::lit(-LOGIT_CLIP), T::lit(LOGIT_CLIP));
        let weights = g.softmax(logits);

        // Value windows start at m..m + count and span count + n - 1 frames.
        let yv = self.taps(g, &self.value, x, m, count + n - 1)?;
        let p = self.width / 2;
        let mut rows = Vec::with_capacity(n);
        for r in 0..n {
            let mut acc: Option<Var> = None;
            for (j, &yj) in yv.iter().enumerate() {
                let u = r + j;
                if u < p || u - p >= n {
                    continue;
                }
                let s = g.slice_rows(yj, u - p, count)?;
                let term = g.matmul(weights, s)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, term)?,
                    None => term,
                });
            }
            rows.push(acc.expect("centre tap always contributes"));
        }
        let e = g.concat_rows(&rows)?;
        let b = g.param(self.value.bias);
        let e_hist = g.add(e, b)?;
        Ok(HistoryOutput { e_hist, weights })
    }

    pub fn zero_embedding<T: Scalar>(&self) -> Tensor<T> {
        Tensor::zeros(vec![self.n, self.d_out])
    }
}

/// Incremental evaluation for rollout. Keys and values of a window depend
/// only on the frames inside it, so each is computed once when its last
/// frame arrives; the query is recomputed every step.
#[derive(Clone, Debug)]
pub struct HistoryCache {
    frames: Vec<Vec<f32>>,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    kernels: [Vec<f32>; 3],
    biases: [Vec<f32>; 3],
    m: usize,
    n: usize,
    width: usize,
    d_in: usize,
    d_out: usize,
}

impl HistoryCache {
    pub fn new<T: Scalar>(enc: &HistoryEncoder, store: &ParamStore<T>) -> Self {
        let grab = |id: ParamId| store.value(id).data().iter().map(|v| v.as_f64() as f32).collect::<Vec<f32>>();
        HistoryCache {
            frames: Vec::new(),
            keys: Vec::new(),
            values: Vec::new(),
            kernels: [grab(enc.query.kernel), grab(enc.key.kernel), grab(enc.value.kernel)],
            biases: [grab(enc.query.bias), grab(enc.key.bias), grab(enc.value.bias)],
            m: enc.m,
            n: enc.n,
            width: enc.width,
            d_in: enc.d_in,
            d_out: enc.d_out,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Convolution of frames `start..start + len` as a window, `len x d`.
    fn window_conv(&self, which: usize, start: usize, len: usize) -> Vec<f32> {
        let (d_in, d_out) = (self.d_in, self.d_out);
        let p = self.width / 2;
        let kernel = &self.kernels[which];
        let mut out = vec![0f32; len * d_out];
        for r in 0..len {
            let o = &mut out[r * d_out..(r + 1) * d_out];
            o.copy_from_slice(&self.biases[which]);
            for j in 0..self.width {
                let u = r + j;
                if u < p || u - p >= len {
                    continue;
                }
                let x = &self.frames[start + u - p];
                let kj = &kernel[j * d_in * d_out..(j + 1) * d_in * d_out];
                for (i, &xi) in x.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let row = &kj[i * d_out..(i + 1) * d_out];
                    for (ov, &kv) in o.iter_mut().zip(row) {
                        *ov += xi * kv;
                    }
                }
            }
        }
        out
    }

    fn pooled(&self, which: usize, start: usize) -> Vec<f32> {
        let c = self.window_conv(which, start, self.m);
        let mut out = vec![0f32; self.d_out];
        for r in 0..self.m {
            for (o, &v) in out.iter_mut().zip(&c[r * self.d_out..(r + 1) * self.d_out]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= self.m as f32);
        out
    }

    pub fn push(&mut self, frame: &[f32]) -> Result<()> {
        if frame.len() != self.d_in {
            return Err(DanceError::DimensionMismatch(format!(
                "frame width {} vs {}",
                frame.len(),
                self.d_in
            )));
        }
        self.frames.push(frame.to_vec());
        let t = self.frames.len();
        // Window i (key over i..i+m, value over i+m..i+m+n) is complete
        // once frame i + m + n - 1 exists.
        if t >= self.m + self.n {
            let i = t - self.m - self.n;
            debug_assert_eq!(i, self.keys.len());
            self.keys.push(self.pooled(1, i));
            self.values.push(self.window_conv(2, i + self.m, self.n));
        }
        Ok(())
    }

    /// `E_hist` over the most recent `max_frames` frames (`n x d`
    /// row-major), with the attention weights; `None` when that span is
    /// shorter than `2m + n`.
    pub fn embedding(&self, max_frames: usize) -> Option<(Vec<f32>, Vec<f32>)> {
        let t = self.frames.len();
        let span = t.min(max_frames);
        let base = t - span;
        let min = 2 * self.m + self.n;
        if span < min {
            return None;
        }
        let count = span + 1 - min;
        let q = self.pooled(0, t - self.m);
        let logits: Vec<f64> = (base..base + count)
            .map(|i| {
                let dot: f64 = self.keys[i].iter().zip(&q).map(|(&a, &b)| a as f64 * b as f64).sum();
                dot.clamp(-LOGIT_CLIP, LOGIT_CLIP)
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let mut e = vec![0f64; self.n * self.d_out];
        for (k, &a) in weights.iter().enumerate() {
            for (o, &v) in e.iter_mut().zip(&self.values[base + k]) {
                *o += a * v as f64;
            }
        }
        Some((e.into_iter().map(|v| v as f32).collect(), weights.into_iter().map(|v| v as f32).collect()))
    }
}
