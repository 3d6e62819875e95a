use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::autodiff::Tensor;
use crate::controls::{ToyEmbedder, EMBED_DIM};
use crate::error::{Error, Result};
use crate::{BINS, FRAMES};

/// Minimum number of samples per embedding dimension for a Gaussian fit.
pub const SAMPLES_PER_DIM: usize = 10;

/// Mean and covariance of a set of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianFit {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(Error::shape("gaussian fit", format!("mean of {d}, covariance of {}", cov.len())));
        }
        let cov = DMatrix::from_row_slice(d, d, &cov);
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-10 * scale {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        let min_eig = SymmetricEigen::new(cov.clone()).eigenvalues.min();
        if min_eig < -1e-8 * scale {
            return Err(Error::invalid(format!("covariance has eigenvalue {min_eig:e}")));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
        })
    }

    /// Fits rows of an `[N, d]` tensor with the unbiased covariance.
    pub fn from_rows(rows: &Tensor) -> Result<Self> {
        if rows.ndim() != 2 || rows.shape()[0] < 2 {
            return Err(Error::shape("gaussian fit", format!("need [N >= 2, d], got {:?}", rows.shape())));
        }
        let (n, d) = (rows.shape()[0], rows.shape()[1]);
        let m = DMatrix::from_row_slice(n, d, rows.data());
        let mean = m.row_mean().transpose();
        let mut centered = m;
        for mut r in centered.row_iter_mut() {
            r -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of the cross term is the sum of square roots of the eigenvalues
/// of the symmetric matrix `S_a^(1/2) S_b S_a^(1/2)`, clamped at zero.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet_distance", format!("dimensions {} and {}", a.dim(), b.dim())));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let sa = psd_sqrt(&a.cov);
    let inner = &sa * &b.cov * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    Ok((mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// Embeds a batch of spectrograms and fits a Gaussian to the embeddings.
pub fn embed_fit(samples: &Tensor) -> Result<GaussianFit> {
    let d = BINS * FRAMES;
    if samples.is_empty() || samples.len() % d != 0 {
        return Err(Error::shape("embed_fit", format!("{:?}", samples.shape())));
    }
    let n = samples.len() / d;
    let min = SAMPLES_PER_DIM * EMBED_DIM;
    if n < min {
        return Err(Error::invalid(format!("{n} samples; at least {min} are needed")));
    }
    let e = ToyEmbedder::standard().embed_tensor(samples)?;
    GaussianFit::from_rows(&e)
}

/// Fréchet distance between embedded `samples` and a reference fit.
pub fn eval_quality(samples: &Tensor, reference: &GaussianFit) -> Result<f64> {
    frechet_distance(&embed_fit(samples)?, reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eye(d: usize) -> Vec<f64> {
        DMatrix::<f64>::identity(d, d).as_slice().to_vec()
    }

    #[test]
    fn closed_form_cases() {
        let a = GaussianFit::new(vec![0.0, 0.0], eye(2)).unwrap();
        let b = GaussianFit::new(vec![1.0, 0.0], eye(2)).unwrap();
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-8);
        let n1 = GaussianFit::new(vec![0.0], vec![1.0]).unwrap();
        let n4 = GaussianFit::new(vec![0.0], vec![4.0]).unwrap();
        assert!((frechet_distance(&n1, &n4).unwrap() - 1.0).abs() < 1e-8);
        assert!(frechet_distance(&a, &n1).is_err());
    }

    #[test]
    fn rejects_bad_covariances() {
        assert!(GaussianFit::new(vec![0.0, 0.0], vec![1.0, 0.5, 0.0, 1.0]).is_err());
        assert!(GaussianFit::new(vec![0.0], vec![-1.0]).is_err());
    }

    #[test]
    fn symmetric_and_matches_commuting_formula() {
        // Diagonal covariances commute: the cross term is sum sqrt(a_i b_i).
        let a = GaussianFit::new(vec![0.5, -1.0, 2.0], vec![1.0, 0.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 0.25]).unwrap();
        let b = GaussianFit::new(vec![0.0, 0.0, 1.0], vec![4.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let want = (0.25 + 1.0 + 1.0) + (1.0f64 - 2.0).powi(2) + (3.0f64 - 1.0).powi(2) + (0.5f64 - 1.0).powi(2);
        let ab = frechet_distance(&a, &b).unwrap();
        assert!((ab - want).abs() < 1e-10, "{ab} vs {want}");
        assert!((ab - frechet_distance(&b, &a).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn sample_fit_recovers_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Tensor::randn(&[20_000, 2], &mut rng).map(|v| 2.0 * v + 1.0);
        let f = GaussianFit::from_rows(&z).unwrap();
        assert!(f.mean().iter().all(|m| (m - 1.0).abs() < 0.05));
        assert!((f.cov()[(0, 0)] - 4.0).abs() < 0.15);
        assert!(f.cov()[(0, 1)].abs() < 0.15);
    }

    #[test]
    fn too_few_samples() {
        let x = Tensor::zeros(&[10, BINS, FRAMES]);
        assert!(embed_fit(&x).is_err());
    }
}
