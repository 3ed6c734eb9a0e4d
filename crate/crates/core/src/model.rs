//! Maps an unconstrained parameter vector θ to a model-implied
//! [`ParameterSet`].
//!
//! Covariances go through a log-Cholesky factor so that every finite θ an
//! optimizer proposes is positive definite.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mvn::{cholesky, default_names, ParameterSet};

/// Model selection as it appears in run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    /// Free mean vector and free covariance.
    Saturated { p: usize },
    /// Linear latent growth curve over `waves` equally spaced occasions.
    Lgm { waves: usize },
    /// Free mean vector with the covariance held fixed.
    FixedCovariance { cov: Vec<Vec<f64>> },
}

impl Model {
    pub fn saturated(p: usize) -> Self {
        Model::Saturated { p }
    }

    pub fn lgm(waves: usize) -> Self {
        Model::Lgm { waves }
    }

    pub fn fixed_covariance(cov: &DMatrix<f64>) -> Self {
        Model::FixedCovariance {
            cov: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    /// Number of observed variables.
    pub fn p(&self) -> usize {
        match self {
            Model::Saturated { p } => *p,
            Model::Lgm { waves } => *waves,
            Model::FixedCovariance { cov } => cov.len(),
        }
    }

    pub fn theta_len(&self) -> usize {
        match self {
            Model::Saturated { p } => p + p * (p + 1) / 2,
            Model::Lgm { .. } => 6,
            Model::FixedCovariance { cov } => cov.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Model::Saturated { p } if *p == 0 => Err(Error::Config("saturated model needs p >= 1".into())),
            Model::Lgm { waves } if *waves < 3 => {
                Err(Error::Config(format!("latent growth model needs at least 3 waves, got {waves}")))
            }
            Model::FixedCovariance { cov } => {
                let m = fixed_cov_matrix(cov)?;
                cholesky(&m).map(|_| ())
            }
            _ => Ok(()),
        }
    }

    pub fn realize(&self, theta: &[f64]) -> Result<ParameterSet> {
        if theta.len() != self.theta_len() {
            return Err(Error::Shape(format!(
                "θ has length {}, model expects {}",
                theta.len(),
                self.theta_len()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Domain("θ contains a non-finite entry".into()));
        }
        let p = self.p();
        let (mean, cov) = match self {
            Model::Saturated { p } => {
                let mean = DVector::from_column_slice(&theta[..*p]);
                let l = log_cholesky_factor(&theta[*p..], *p);
                (mean, &l * l.transpose())
            }
            Model::Lgm { waves } => {
                let lambda = lgm_loadings(*waves);
                let phi_l = log_cholesky_factor(&theta[0..3], 2);
                let phi = &phi_l * phi_l.transpose();
                let resid = theta[3].exp();
                let factor_mean = DVector::from_column_slice(&theta[4..6]);
                let cov = &lambda * phi * lambda.transpose() + DMatrix::identity(*waves, *waves) * resid;
                (&lambda * factor_mean, cov)
            }
            Model::FixedCovariance { cov } => (DVector::from_column_slice(theta), fixed_cov_matrix(cov)?),
        };
        ParameterSet::new(mean, cov, default_names(p))
    }

    /// θ that realizes `params`.
    pub fn encode(&self, params: &ParameterSet) -> Result<Vec<f64>> {
        if params.dim() != self.p() {
            return Err(Error::Shape(format!(
                "parameters have dimension {}, model expects {}",
                params.dim(),
                self.p()
            )));
        }
        match self {
            Model::Saturated { p } => {
                let l = cholesky(&params.cov)?.unpack();
                let mut theta: Vec<f64> = params.mean.iter().copied().collect();
                for i in 0..*p {
                    for j in 0..=i {
                        theta.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
                    }
                }
                Ok(theta)
            }
            Model::Lgm { .. } => self.encode_lgm(params),
            Model::FixedCovariance { cov } => {
                let fixed = fixed_cov_matrix(cov)?;
                if (&fixed - &params.cov).amax() > 1e-12 * fixed.amax() {
                    return Err(Error::NotRepresentable("covariance differs from the fixed one".into()));
                }
                Ok(params.mean.iter().copied().collect())
            }
        }
    }

    fn encode_lgm(&self, params: &ParameterSet) -> Result<Vec<f64>> {
        let s = &params.cov;
        let m = &params.mean;
        // Off-diagonal moments: Σ_jk = φ11 + (j+k)φ12 + jk φ22 for j != k.
        let phi12 = s[(0, 2)] - s[(0, 1)];
        let phi11 = s[(0, 1)] - phi12;
        let phi22 = (s[(1, 2)] - phi11 - 3.0 * phi12) / 2.0;
        let resid = s[(0, 0)] - phi11;
        if resid <= 0.0 {
            return Err(Error::NotRepresentable("implied residual variance is not positive".into()));
        }
        let phi = DMatrix::from_row_slice(2, 2, &[phi11, phi12, phi12, phi22]);
        let l = cholesky(&phi)
            .map_err(|_| Error::NotRepresentable("implied factor covariance is not positive definite".into()))?
            .unpack();
        let theta = vec![l[(0, 0)].ln(), l[(1, 0)], l[(1, 1)].ln(), resid.ln(), m[0], m[1] - m[0]];
        let back = self.realize(&theta)?;
        let tol = 1e-9 * (1.0 + s.amax() + m.amax());
        if (&back.cov - s).amax() > tol || (&back.mean - m).amax() > tol {
            return Err(Error::NotRepresentable("parameters do not follow the growth-curve structure".into()));
        }
        Ok(theta)
    }

    /// Parameters on their natural scale (what gets reported).
    pub fn natural(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let params = self.realize(theta)?;
        Ok(match self {
            Model::Saturated { p } => {
                let mut out: Vec<f64> = params.mean.iter().copied().collect();
                for i in 0..*p {
                    for j in 0..=i {
                        out.push(params.cov[(i, j)]);
                    }
                }
                out
            }
            Model::Lgm { .. } => {
                let l = log_cholesky_factor(&theta[0..3], 2);
                let phi = &l * l.transpose();
                vec![phi[(0, 0)], phi[(1, 0)], phi[(1, 1)], theta[3].exp(), theta[4], theta[5]]
            }
            Model::FixedCovariance { .. } => theta.to_vec(),
        })
    }

    pub fn natural_names(&self) -> Vec<String> {
        match self {
            Model::Saturated { p } => {
                let mut names: Vec<String> = (1..=*p).map(|i| format!("mean[{i}]")).collect();
                for i in 1..=*p {
                    for j in 1..=i {
                        names.push(format!("cov[{i},{j}]"));
                    }
                }
                names
            }
            Model::Lgm { .. } => [
                "var_intercept",
                "cov_intercept_slope",
                "var_slope",
                "var_residual",
                "mean_intercept",
                "mean_slope",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            Model::FixedCovariance { cov } => (1..=cov.len()).map(|i| format!("mean[{i}]")).collect(),
        }
    }

    /// θ entries that hold logarithms of a variance-like quantity.
    pub fn log_scale_indices(&self) -> Vec<usize> {
        match self {
            Model::Saturated { p } => (0..*p).map(|i| p + i * (i + 1) / 2 + i).collect(),
            Model::Lgm { .. } => vec![0, 2, 3],
            Model::FixedCovariance { .. } => Vec::new(),
        }
    }

    pub fn default_start(&self) -> Vec<f64> {
        match self {
            Model::Lgm { .. } => vec![0.0, 0.0, -1.0, 0.0, 0.0, 0.0],
            _ => vec![0.0; self.theta_len()],
        }
    }
}

/// Loadings `Λ` with columns (1, λ_j), `λ_j = 0, 1, …, J−1`.
pub fn lgm_loadings(waves: usize) -> DMatrix<f64> {
    DMatrix::from_fn(waves, 2, |j, c| if c == 0 { 1.0 } else { j as f64 })
}

/// Lower-triangular factor from row-major packed entries with log diagonal.
fn log_cholesky_factor(packed: &[f64], p: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(p, p);
    let mut idx = 0;
    for i in 0..p {
        for j in 0..=i {
            l[(i, j)] = if i == j { packed[idx].exp() } else { packed[idx] };
            idx += 1;
        }
    }
    l
}

fn fixed_cov_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let p = rows.len();
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::Shape("fixed covariance must be square".into()));
    }
    Ok(DMatrix::from_fn(p, p, |i, j| rows[i][j]))
}
