use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::PoseSequence;
use crate::error::{ensure, Result};
use crate::nn::MotionEncoder;
use crate::par;
use crate::tensor::Tensor;

/// Default number of generated samples compared by [`diversity`].
pub const DIVERSITY_SAMPLES: usize = 500;
const SQRT_JITTER: f64 = 1e-6;

/// Mean and covariance of a feature cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        ensure!(
            cov.nrows() == mean.len() && cov.ncols() == mean.len(),
            Shape,
            "covariance {}x{} does not match mean of length {}",
            cov.nrows(),
            cov.ncols(),
            mean.len()
        );
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of the rows of `features`.
pub fn fit_gaussian(features: &Tensor) -> Result<GaussianStats> {
    let (n, d) = features.shape();
    ensure!(n >= 2, Argument, "fitting a Gaussian needs at least 2 rows, got {n}");
    let x = DMatrix::from_row_slice(n, d, features.data());
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianStats::new(mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 0)?;
    if !eig.eigenvalues.iter().all(|v| v.is_finite()) {
        return None;
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<f64> {
    let ra = psd_sqrt(a)?;
    let inner = &ra * b * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(inner, f64::EPSILON, 0)?;
    let t: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    t.is_finite().then_some(t)
}

/// Fréchet distance between two Gaussians,
/// `|mu_a - mu_b|^2 + tr(Sa) + tr(Sb) - 2 tr((Sa^1/2 Sb Sa^1/2)^1/2)`, clamped at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    ensure!(
        a.dim() == b.dim(),
        Shape,
        "Fréchet distance between dimensions {} and {}",
        a.dim(),
        b.dim()
    );
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let cross = trace_sqrt_product(&a.cov, &b.cov).or_else(|| {
        let jitter = DMatrix::identity(a.dim(), a.dim()) * SQRT_JITTER;
        trace_sqrt_product(&(&a.cov + &jitter), &(&b.cov + &jitter))
    });
    let cross = cross.ok_or_else(|| {
        crate::Error::UndefinedMetric("covariance square root did not converge".into())
    })?;
    Ok((mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// Latent features `[n, d]` of motion clips from a frozen motion encoder.
pub fn motion_features(clips: &[PoseSequence], encoder: &MotionEncoder) -> Result<Tensor> {
    let rows = par::try_map(clips, |m| encoder.encode(m))?;
    let d = encoder.out_dim();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in &rows {
        data.extend_from_slice(r.data());
    }
    Ok(Tensor::from_vec(rows.len(), d, data))
}

/// Fréchet distance between Gaussians fitted to the latent features of
/// ground-truth and generated motion.
pub fn fgd(gt: &[PoseSequence], generated: &[PoseSequence], encoder: &MotionEncoder) -> Result<f64> {
    ensure!(
        gt.len() >= 2 && generated.len() >= 2,
        UndefinedMetric,
        "FGD needs at least 2 clips per set, got {} and {}",
        gt.len(),
        generated.len()
    );
    let a = fit_gaussian(&motion_features(gt, encoder)?)?;
    let b = fit_gaussian(&motion_features(generated, encoder)?)?;
    frechet_distance(&a, &b)
}

/// Mean absolute difference between feature rows and the rows at `perm`.
pub fn permuted_feature_gap(features: &Tensor, perm: &[usize]) -> f64 {
    assert_eq!(perm.len(), features.rows(), "permutation length mismatch");
    let mut total = 0.0;
    for (i, &j) in perm.iter().enumerate() {
        total += features
            .row(i)
            .iter()
            .zip(features.row(j))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    }
    total / features.len() as f64
}

/// Diversity of a feature set: draw `n_samples` rows (without replacement
/// when enough rows exist, otherwise with replacement), then compare them
/// against one seeded uniform permutation of themselves.
pub fn feature_diversity(features: &Tensor, n_samples: usize, seed: u64) -> Result<f64> {
    let n = features.rows();
    ensure!(n >= 2, UndefinedMetric, "diversity needs at least 2 clips, got {n}");
    ensure!(n_samples >= 2, Argument, "diversity needs at least 2 samples, got {n_samples}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if n_samples <= n {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        all.truncate(n_samples);
        all
    } else {
        (0..n_samples).map(|_| rng.gen_range(0..n)).collect()
    };
    let d = features.cols();
    let mut data = Vec::with_capacity(picks.len() * d);
    for &p in &picks {
        data.extend_from_slice(features.row(p));
    }
    let sample = Tensor::from_vec(picks.len(), d, data);
    let mut perm: Vec<usize> = (0..picks.len()).collect();
    perm.shuffle(&mut rng);
    Ok(permuted_feature_gap(&sample, &perm))
}

/// [`feature_diversity`] over the latent features of generated motion.
pub fn diversity(generated: &[PoseSequence], encoder: &MotionEncoder, n_samples: usize, seed: u64) -> Result<f64> {
    ensure!(
        generated.len() >= 2,
        UndefinedMetric,
        "diversity needs at least 2 clips, got {}",
        generated.len()
    );
    feature_diversity(&motion_features(generated, encoder)?, n_samples, seed)
}

/// Mean squared coordinate difference over every element.
pub fn mse(gt: &PoseSequence, generated: &PoseSequence) -> Result<f64> {
    ensure!(
        gt.n_frames() == generated.n_frames(),
        Shape,
        "MSE between {} and {} frames",
        gt.n_frames(),
        generated.n_frames()
    );
    let a = gt.as_slice();
    let b = generated.as_slice();
    let total: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(total / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::POSE_DIM;

    fn gauss1(mean: f64, var: f64) -> GaussianStats {
        GaussianStats::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var)).unwrap()
    }

    #[test]
    fn two_point_fit() {
        let g = fit_gaussian(&Tensor::from_vec(2, 2, vec![0.0, 0.0, 2.0, 0.0])).unwrap();
        assert_eq!(g.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(g.cov, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        assert!(fit_gaussian(&Tensor::zeros(1, 3)).is_err());
    }

    #[test]
    fn identical_rows_have_zero_covariance() {
        let g = fit_gaussian(&Tensor::from_fn(5, 3, |_, c| c as f64)).unwrap();
        assert!(g.cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_dimensional_closed_forms() {
        assert!((frechet_distance(&gauss1(0.0, 1.0), &gauss1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-9);
        assert!((frechet_distance(&gauss1(0.0, 1.0), &gauss1(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-9);
        let g = gauss1(0.3, 2.0);
        assert!(frechet_distance(&g, &g).unwrap() < 1e-9);
        assert!(frechet_distance(&g, &fit_gaussian(&Tensor::zeros(3, 2)).unwrap()).is_err());
    }

    #[test]
    fn swap_permutation_gap() {
        let f = Tensor::from_vec(2, 2, vec![1.0, 5.0, 4.0, 1.0]);
        assert!((permuted_feature_gap(&f, &[1, 0]) - 3.5).abs() < 1e-12);
        let same = Tensor::from_fn(6, 3, |_, c| c as f64);
        assert_eq!(feature_diversity(&same, 500, 3).unwrap(), 0.0);
    }

    #[test]
    fn mse_examples() {
        let a = PoseSequence::new(3, vec![0.2; 3 * POSE_DIM]).unwrap();
        let b = PoseSequence::new(3, vec![0.3; 3 * POSE_DIM]).unwrap();
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-8);
        assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let c = PoseSequence::new(4, vec![0.0; 4 * POSE_DIM]).unwrap();
        assert!(mse(&a, &c).is_err());
    }
}
