//! Synthetic data for tests, benchmarks and demos.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::mvn::{cholesky, ParameterSet};

/// `rows × cols` matrix of independent standard normal draws.
pub fn standard_normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Random well-conditioned covariance: `A Aᵀ / p + ½ I` with standard normal `A`.
pub fn random_pd<R: Rng + ?Sized>(rng: &mut R, p: usize) -> DMatrix<f64> {
    let a = standard_normal_matrix(rng, p, p);
    let mut s = &a * a.transpose() / p as f64 + DMatrix::identity(p, p) * 0.5;
    s = (&s + s.transpose()) * 0.5;
    s
}

/// Random parameter set with standard normal means and a [`random_pd`] covariance.
pub fn random_params<R: Rng + ?Sized>(rng: &mut R, p: usize) -> ParameterSet {
    let mean = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    ParameterSet::unnamed(mean, random_pd(rng, p)).expect("random_pd is positive definite")
}

/// `n` rows drawn from `N(mean, cov)`.
pub fn sample_mvn<R: Rng + ?Sized>(rng: &mut R, params: &ParameterSet, n: usize) -> Result<DMatrix<f64>> {
    let chol = cholesky(&params.cov)?;
    let z = standard_normal_matrix(rng, n, params.dim());
    let mut x = z * chol.l().transpose();
    for mut row in x.row_iter_mut() {
        row += params.mean.transpose();
    }
    Ok(x)
}
