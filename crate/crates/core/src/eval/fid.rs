//! Fréchet distance and diversity over feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{DanceError, Result};

pub const FID_RIDGE: f64 = 1e-6;

fn moments<V: AsRef<[f64]>>(set: &[V]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if set.len() < 2 {
        return Err(DanceError::TooFew(format!("need 2 feature vectors, got {}", set.len())));
    }
    let d = set[0].as_ref().len();
    let n = set.len();
    let mut mu = DVector::zeros(d);
    for v in set {
        let v = v.as_ref();
        if v.len() != d {
            return Err(DanceError::DimensionMismatch(format!("feature length {} vs {d}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DanceError::NonFinite("feature vector".into()));
        }
        mu += DVector::from_column_slice(v);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = DVector::from_column_slice(v.as_ref()) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|v| !v.is_finite() || *v < -1e-9 * scale) {
        return Err(DanceError::DegenerateCovariance(format!(
            "eigenvalue {:?}",
            eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
        )));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))` with a `1e-6` ridge on
/// both covariances. The trace of the product root is taken through the
/// symmetric matrix `S_a^(1/2) S_b S_a^(1/2)`.
pub fn frechet_distance<V: AsRef<[f64]>>(a: &[V], b: &[V]) -> Result<f64> {
    let (mu_a, mut s_a) = moments(a)?;
    let (mu_b, mut s_b) = moments(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(DanceError::DimensionMismatch(format!("{} vs {}", mu_a.len(), mu_b.len())));
    }
    let d = mu_a.len();
    s_a += DMatrix::identity(d, d) * FID_RIDGE;
    s_b += DMatrix::identity(d, d) * FID_RIDGE;
    let ra = sym_sqrt(&s_a)?;
    let cross = sym_sqrt(&(&ra * &s_b * &ra))?;
    let diff = mu_a - mu_b;
    let v = diff.dot(&diff) + s_a.trace() + s_b.trace() - 2.0 * cross.trace();
    Ok(v.max(0.0))
}

/// Mean Euclidean distance over unordered pairs.
pub fn diversity<V: AsRef<[f64]>>(set: &[V]) -> Result<f64> {
    if set.len() < 2 {
        return Err(DanceError::TooFew(format!("diversity needs 2 vectors, got {}", set.len())));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            let (a, b) = (set[i].as_ref(), set[j].as_ref());
            if a.len() != b.len() {
                return Err(DanceError::DimensionMismatch(format!("{} vs {}", a.len(), b.len())));
            }
            sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}
