//! Multinomial logistic regression over standardized motion features.

use crate::error::{DanceError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierOptions {
    pub iters: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        ClassifierOptions {
            iters: 500,
            lr: 0.5,
            l2: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleClassifier {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `classes x (dim + 1)`, bias last.
    pub weights: Vec<Vec<f64>>,
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

impl StyleClassifier {
    /// Full-batch gradient descent from zero weights, so training is
    /// deterministic.
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize, opts: &ClassifierOptions) -> Result<StyleClassifier> {
        if features.len() != labels.len() {
            return Err(DanceError::DimensionMismatch(format!("{} samples vs {} labels", features.len(), labels.len())));
        }
        if classes < 2 || features.is_empty() {
            return Err(DanceError::TooFewClips(format!("{} samples over {classes} classes", features.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(DanceError::BadStyle { style: l, count: classes });
        }
        let d = features[0].len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            if f.len() != d {
                return Err(DanceError::DimensionMismatch(format!("feature length {} vs {d}", f.len())));
            }
            mean.iter_mut().zip(f).for_each(|(m, x)| *m += x / n);
        }
        let mut std = vec![0.0; d];
        for f in features {
            std.iter_mut().zip(f.iter().zip(&mean)).for_each(|(s, (x, m))| *s += (x - m) * (x - m) / n);
        }
        let std: Vec<f64> = std.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        let mut clf = StyleClassifier {
            mean,
            std,
            weights: vec![vec![0.0; d + 1]; classes],
        };
        let xs: Vec<Vec<f64>> = features.iter().map(|f| clf.standardize(f)).collect();
        for _ in 0..opts.iters {
            let mut grad = vec![vec![0.0; d + 1]; classes];
            for (x, &y) in xs.iter().zip(labels) {
                let mut p = clf.logits_std(x);
                softmax_in_place(&mut p);
                for (c, gc) in grad.iter_mut().enumerate() {
                    let e = p[c] - f64::from(u8::from(c == y));
                    for k in 0..d {
                        gc[k] += e * x[k] / n;
                    }
                    gc[d] += e / n;
                }
            }
            for (w, g) in clf.weights.iter_mut().zip(&grad) {
                for k in 0..=d {
                    let reg = if k < d { opts.l2 * w[k] } else { 0.0 };
                    w[k] -= opts.lr * (g[k] + reg);
                }
            }
        }
        Ok(clf)
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter().zip(self.mean.iter().zip(&self.std)).map(|(x, (m, s))| (x - m) / s).collect()
    }

    fn logits_std(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        self.weights
            .iter()
            .map(|w| w[d] + w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        let z = self.logits_std(&self.standardize(features));
        let mut best = 0;
        for (c, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = c;
            }
        }
        best
    }

    /// Fraction of `features` predicted as their label.
    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        if features.is_empty() {
            return 0.0;
        }
        let hits = features.iter().zip(labels).filter(|(f, &l)| self.predict(f) == l).count();
        hits as f64 / features.len() as f64
    }
}
