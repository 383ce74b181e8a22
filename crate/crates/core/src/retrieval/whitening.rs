use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::RetrievalError;
use crate::model::{l2_normalize, Descriptor};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Centering vector and `K×K` whitening matrix (row-major).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhitenTransform {
    pub mu: Vec<f64>,
    pub w: Vec<f64>,
    pub epsilon: f64,
}

impl WhitenTransform {
    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Self {
            mu: vec![0.0; dim],
            w,
            epsilon: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.w)
    }
}

/// Second moment of the positive-pair differences `d_i − d_j`.
pub fn positive_difference_covariance(
    descriptors: &[&[f64]],
    positive_pairs: &[(usize, usize)],
) -> Result<DMatrix<f64>, RetrievalError> {
    let dim = check_dims(descriptors)?;
    let mut c = DMatrix::<f64>::zeros(dim, dim);
    for &(i, j) in positive_pairs {
        let (a, b) = match (descriptors.get(i), descriptors.get(j)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(RetrievalError::InvalidArgument(format!(
                    "positive pair ({i}, {j}) is out of range"
                )))
            }
        };
        let d = DVector::from_iterator(dim, a.iter().zip(b.iter()).map(|(x, y)| x - y));
        c.ger(1.0, &d, &d, 1.0);
    }
    Ok(c / positive_pairs.len() as f64)
}

fn check_dims(descriptors: &[&[f64]]) -> Result<usize, RetrievalError> {
    let dim = descriptors.first().map_or(0, |d| d.len());
    if dim == 0 {
        return Err(RetrievalError::InvalidArgument("no descriptors".into()));
    }
    if let Some(d) = descriptors.iter().find(|d| d.len() != dim) {
        return Err(RetrievalError::DimensionMismatch {
            expected: dim,
            got: d.len(),
        });
    }
    Ok(dim)
}

/// `mu` is the mean of all descriptors; `W = (C + εI)^(-1/2)` with `C` the
/// positive-pair difference covariance.
pub fn learn_whitening(
    descriptors: &[&[f64]],
    positive_pairs: &[(usize, usize)],
    epsilon: f64,
) -> Result<WhitenTransform, RetrievalError> {
    if positive_pairs.len() < 2 {
        return Err(RetrievalError::TooFewPairs(positive_pairs.len()));
    }
    if !(epsilon >= 0.0) {
        return Err(RetrievalError::InvalidArgument(format!(
            "epsilon must be non-negative, got {epsilon}"
        )));
    }
    let dim = check_dims(descriptors)?;
    let mut mu = vec![0.0; dim];
    for d in descriptors {
        for (m, v) in mu.iter_mut().zip(d.iter()) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= descriptors.len() as f64;
    }

    let c = positive_difference_covariance(descriptors, positive_pairs)? + DMatrix::identity(dim, dim) * epsilon;
    let eig = SymmetricEigen::new(c);
    if let Some(l) = eig.eigenvalues.iter().find(|l| !(**l > 0.0)) {
        return Err(RetrievalError::Degenerate(format!(
            "difference covariance has eigenvalue {l:e}; raise epsilon"
        )));
    }
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let w = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
    if w.iter().any(|v| !v.is_finite()) {
        return Err(RetrievalError::Degenerate("whitening matrix is not finite".into()));
    }
    Ok(WhitenTransform {
        mu,
        w: w.transpose().as_slice().to_vec(),
        epsilon,
    })
}

/// `normalize(W (d − mu))`.
pub fn apply_whitening(transform: &WhitenTransform, d: &[f64]) -> Result<Descriptor, RetrievalError> {
    let dim = transform.dim();
    if d.len() != dim {
        return Err(RetrievalError::DimensionMismatch {
            expected: dim,
            got: d.len(),
        });
    }
    let centered: Vec<f64> = d.iter().zip(&transform.mu).map(|(a, m)| a - m).collect();
    let out: Vec<f64> = transform
        .w
        .chunks_exact(dim)
        .map(|row| row.iter().zip(&centered).map(|(a, b)| a * b).sum())
        .collect();
    Ok(l2_normalize(&out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_case() {
        // differences (2√2, 0) and (0, √2): covariance diag(4, 1)
        let r2 = 2f64.sqrt();
        let d: Vec<Vec<f64>> = vec![vec![2.0 * r2, 0.0], vec![0.0, 0.0], vec![0.0, r2]];
        let refs: Vec<&[f64]> = d.iter().map(Vec::as_slice).collect();
        let pairs = [(0, 1), (2, 1)];
        let c = positive_difference_covariance(&refs, &pairs).unwrap();
        assert!((c[(0, 0)] - 4.0).abs() < 1e-12 && (c[(1, 1)] - 1.0).abs() < 1e-12);
        let t = learn_whitening(&refs, &pairs, 0.0).unwrap();
        let expected = [0.5, 0.0, 0.0, 1.0];
        for (w, e) in t.w.iter().zip(expected) {
            assert!((w - e).abs() < 1e-12, "{:?}", t.w);
        }
    }

    #[test]
    fn apply_examples() {
        let t = WhitenTransform {
            mu: vec![1.0, 0.0],
            w: vec![0.5, 0.0, 0.0, 1.0],
            epsilon: 0.0,
        };
        let d = apply_whitening(&t, &[3.0, 4.0]).unwrap();
        let n = 17f64.sqrt();
        assert!((d.as_slice()[0] - 1.0 / n).abs() < 1e-15);
        assert!((d.as_slice()[1] - 4.0 / n).abs() < 1e-15);

        let id = WhitenTransform::identity(2);
        assert_eq!(apply_whitening(&id, &[0.6, 0.8]).unwrap().as_slice(), &[0.6, 0.8]);
        let centered_on_d = WhitenTransform {
            mu: vec![0.6, 0.8],
            ..WhitenTransform::identity(2)
        };
        assert!(apply_whitening(&centered_on_d, &[0.6, 0.8]).is_err());
        assert!(apply_whitening(&id, &[1.0]).is_err());
    }

    #[test]
    fn too_few_pairs() {
        let d = [vec![1.0, 0.0], vec![0.0, 1.0]];
        let refs: Vec<&[f64]> = d.iter().map(Vec::as_slice).collect();
        assert!(matches!(
            learn_whitening(&refs, &[(0, 1)], 0.0),
            Err(RetrievalError::TooFewPairs(1))
        ));
    }
}
