//! Identity distance, retrieval re-identification, Fréchet distance and attribute distances.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::backbones::AttributeKind;
use crate::conditioning::IdentityEmbedding;
use crate::error::{Error, Result};

/// Eigenvalues of the covariance product above this (negative) bound are clamped to 0.
pub const EIGEN_CLAMP: f64 = -1e-8;

fn dot_norms(a: &[f32], b: &[f32]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

/// Cosine distance `1 − ⟨a, b⟩ / (‖a‖‖b‖)`, in `[0, 2]`.
pub fn identity_distance(a: &IdentityEmbedding, b: &IdentityEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("embedding dimension {}", a.dim()),
            found: format!("embedding dimension {}", b.dim()),
        });
    }
    if a.is_null() || b.is_null() {
        return Err(Error::invalid("identity distance is undefined for the null embedding"));
    }
    let (dot, na, nb) = dot_norms(a.vector(), b.vector());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("identity distance is undefined for zero-norm embeddings"));
    }
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReIdResult {
    /// Percentage of anonymized embeddings whose nearest original is their source.
    pub rate_percent: f64,
    /// Index of the retrieved original for each anonymized embedding.
    pub matches: Vec<usize>,
}

impl ReIdResult {
    pub fn hit(&self, i: usize) -> bool {
        self.matches[i] == i
    }
}

/// Top-1 retrieval of each `anonymized[i]` against the `originals` gallery by cosine
/// distance; `anonymized[i]` is a hit when it retrieves `originals[i]`. Ties go to the
/// lower gallery index.
pub fn re_id_rate(originals: &[IdentityEmbedding], anonymized: &[IdentityEmbedding]) -> Result<ReIdResult> {
    if originals.len() != anonymized.len() {
        return Err(Error::invalid(format!(
            "{} originals but {} anonymized embeddings",
            originals.len(),
            anonymized.len()
        )));
    }
    if originals.len() < 2 {
        return Err(Error::invalid("re-identification needs at least 2 gallery identities"));
    }
    let mut matches = Vec::with_capacity(anonymized.len());
    for probe in anonymized {
        let mut best = (f64::INFINITY, 0usize);
        for (j, g) in originals.iter().enumerate() {
            let d = identity_distance(probe, g)?;
            if d < best.0 {
                best = (d, j);
            }
        }
        matches.push(best.1);
    }
    let hits = matches.iter().enumerate().filter(|(i, m)| *i == **m).count();
    Ok(ReIdResult {
        rate_percent: 100.0 * hits as f64 / matches.len() as f64,
        matches,
    })
}

fn moments(set: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len() as f64;
    let mut mean = DVector::zeros(dim);
    for v in set {
        mean += DVector::from_column_slice(v);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in set {
        let d = DVector::from_column_slice(v) - &mean;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    (mean, cov)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues with small negative round-off clamped to zero; errors below the bound.
fn clamped_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(symmetrize(m));
    for v in eig.eigenvalues.iter_mut() {
        if *v < EIGEN_CLAMP {
            return Err(Error::Corrupt(format!(
                "{what} has eigenvalue {v:e}, below the clamping tolerance {EIGEN_CLAMP:e}"
            )));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = clamped_eigen(m, what)?;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * root * eig.eigenvectors.transpose())
}

/// `‖μA − μB‖² + Tr(ΣA + ΣB − 2(ΣA ΣB)^{1/2})` with unbiased covariances. The trace of
/// the product root is taken as `Tr((ΣA^{1/2} ΣB ΣA^{1/2})^{1/2})`, which is symmetric.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("Fréchet distance needs at least 2 samples per set"));
    }
    let dim = a[0].len();
    if dim == 0 {
        return Err(Error::invalid("feature vectors are empty"));
    }
    if let Some(v) = a.iter().chain(b).find(|v| v.len() != dim) {
        return Err(Error::ShapeMismatch {
            expected: format!("feature dimension {dim}"),
            found: format!("feature dimension {}", v.len()),
        });
    }
    if a.iter().chain(b).flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features contain non-finite values"));
    }
    let (mu_a, cov_a) = moments(a, dim);
    let (mu_b, cov_b) = moments(b, dim);
    let root_a = sqrt_psd(&cov_a, "covariance A")?;
    let inner = &root_a * &cov_b * &root_a;
    let cross = clamped_eigen(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum::<f64>();
    let diff = mu_a - mu_b;
    Ok((diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

/// Distance between two scorer outputs of the given kind: mean absolute difference for
/// angles, L2 for expression coefficients, absolute difference for quality.
pub fn attribute_distance(kind: AttributeKind, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} scores", a.len()),
            found: format!("{} scores", b.len()),
        });
    }
    Ok(match kind {
        AttributeKind::Pose | AttributeKind::Gaze => {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
        }
        AttributeKind::Expression => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
        AttributeKind::Quality => (a[0] - b[0]).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f32]) -> IdentityEmbedding {
        IdentityEmbedding::from_raw(v).unwrap()
    }

    #[test]
    fn identity_distance_cases() {
        assert_eq!(identity_distance(&e(&[0.0, 3.0]), &e(&[0.0, 3.0])).unwrap(), 0.0);
        assert!(identity_distance(&e(&[0.6, 0.8]), &e(&[0.6, 0.8])).unwrap() < 1e-12);
        assert_eq!(identity_distance(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(identity_distance(&e(&[1.0, 0.0]), &e(&[-1.0, 0.0])).unwrap(), 2.0);
        assert!(identity_distance(&e(&[1.0]), &IdentityEmbedding::null(1)).is_err());
    }

    #[test]
    fn frechet_identical_sets_are_zero() {
        let a = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]];
        assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-8);
    }

    #[test]
    fn frechet_rejects_small_or_ragged_sets() {
        assert!(frechet_distance(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
        assert!(frechet_distance(&[vec![1.0], vec![2.0]], &[vec![1.0, 0.0], vec![2.0, 0.0]]).is_err());
    }

    #[test]
    fn attribute_distances() {
        assert_eq!(attribute_distance(AttributeKind::Pose, &[10.0, -5.0], &[4.0, -1.0]).unwrap(), 5.0);
        assert_eq!(attribute_distance(AttributeKind::Expression, &[3.0, 0.0], &[0.0, 4.0]).unwrap(), 5.0);
        assert_eq!(attribute_distance(AttributeKind::Quality, &[7.0], &[9.5]).unwrap(), 2.5);
    }
}
