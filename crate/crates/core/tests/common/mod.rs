#![allow(dead_code)]

use dance_core::model::HistoryEncoder;
use dance_nn::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Overwrites every parameter with uniform noise so no gradient path is
/// blocked by a zero initialisation.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// Direct windowed convolution: output row `r` sums
/// `x[start + r + j - p] . K_j` over taps that stay inside the window.
pub fn conv_window(
    x: &[Vec<f64>],
    start: usize,
    len: usize,
    kernel: &[f64],
    bias: &[f64],
    width: usize,
    d_out: usize,
) -> Vec<Vec<f64>> {
    let d_in = x[0].len();
    let p = (width / 2) as isize;
    let mut out = vec![bias.to_vec(); len];
    for (r, row) in out.iter_mut().enumerate() {
        for j in 0..width {
            let u = r as isize + j as isize - p;
            if u < 0 || u >= len as isize {
                continue;
            }
            let frame = &x[start + u as usize];
            for i in 0..d_in {
                for o in 0..d_out {
                    row[o] += frame[i] * kernel[(j * d_in + i) * d_out + o];
                }
            }
        }
    }
    out
}

fn pooled(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v / rows.len() as f64;
        }
    }
    out
}

pub struct HistoryKernels<'a> {
    pub q: (&'a [f64], &'a [f64]),
    pub k: (&'a [f64], &'a [f64]),
    pub v: (&'a [f64], &'a [f64]),
    pub width: usize,
    pub d_out: usize,
}

/// Loop-by-loop long-history attention: returns `(E_hist, weights)`.
pub fn history_oracle(x: &[Vec<f64>], m: usize, n: usize, kern: &HistoryKernels) -> (Vec<Vec<f64>>, Vec<f64>) {
    let t = x.len();
    let count = t + 1 - (2 * m + n);
    let (w, d) = (kern.width, kern.d_out);
    let q = pooled(&conv_window(x, t - m, m, kern.q.0, kern.q.1, w, d));
    let mut logits = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let k = pooled(&conv_window(x, i, m, kern.k.0, kern.k.1, w, d));
        let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
        logits.push(dot.clamp(-50.0, 50.0));
        values.push(conv_window(x, i + m, n, kern.v.0, kern.v.1, w, d));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let a: Vec<f64> = logits.iter().map(|l| (l - max).exp() / z).collect();
    let mut e = vec![vec![0.0; d]; n];
    for (ai, v) in a.iter().zip(&values) {
        for r in 0..n {
            for c in 0..d {
                e[r][c] += ai * v[r][c];
            }
        }
    }
    (e, a)
}

/// Query and key CNNs share a kernel whose centre tap is the identity; the
/// query frames are scaled one-hot vectors in the first `m` dims and every
/// other frame is noise in the remaining dims.
pub fn planted_trial(seed: u64) -> (usize, usize) {
    let (m, n, d) = (6, 3, 16);
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let enc = HistoryEncoder::new(&mut store, &mut r, "hist", m, n, 3, d, d).unwrap();
    let mut k = vec![0.0; 3 * d * d];
    for i in 0..d {
        k[(d + i) * d + i] = 1.0;
    }
    for id in [enc.query.kernel, enc.key.kernel] {
        store.value_mut(id).data_mut().copy_from_slice(&k);
    }
    let t = r.random_range(2 * m + n + 5..=100);
    let windows = t + 1 - (2 * m + n);
    let plant = r.random_range(0..windows);
    let mut x = vec![vec![0.0; d]; t];
    for row in x.iter_mut() {
        for v in row[m..].iter_mut() {
            *v = r.random_range(-1.0..1.0);
        }
    }
    for j in 0..m {
        let c = r.random_range(1.0..2.0);
        let mut frame = vec![0.0; d];
        frame[j] = c;
        x[t - m + j] = frame.clone();
        x[plant + j] = frame;
    }
    let flat: Vec<f64> = x.concat();
    let mut g = Graph::new(&store);
    let xv = g.constant(Tensor::matrix(t, d, flat).unwrap());
    let out = enc.forward(&mut g, xv).unwrap();
    let w = g.value(out.weights).data();
    let argmax = (0..w.len()).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
    (argmax, plant)
}
