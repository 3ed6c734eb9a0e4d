//! Maximum-likelihood fitting over a model's unconstrained parameters.
//!
//! Every objective evaluation is one complete likelihood evaluation, either
//! through a [`Federation`] or (for reference fits) on pooled data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::mvn::{cholesky, log_likelihood, DataPartition, ParameterSet};
use crate::partition::Federation;

/// Source of joint log-likelihood values.
pub trait Objective {
    fn log_likelihood(&mut self, params: &ParameterSet) -> Result<f64>;
}

impl Objective for Federation {
    fn log_likelihood(&mut self, params: &ParameterSet) -> Result<f64> {
        self.evaluate(params)
    }
}

/// Reference objective on pooled data.
pub struct PooledObjective(pub DataPartition);

impl Objective for PooledObjective {
    fn log_likelihood(&mut self, params: &ParameterSet) -> Result<f64> {
        log_likelihood(params, &self.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    NelderMead,
    BfgsNumeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub method: Method,
    pub max_evals: usize,
    /// Simplex diameter (or BFGS step) below which the search stops.
    pub x_tol: f64,
    /// Objective spread below which the search stops, scaled by `max(1, |f|)`.
    pub f_tol: f64,
    /// Relative finite-difference step for gradients.
    pub fd_step: f64,
    /// Relative finite-difference step for the Hessian behind standard errors.
    pub hessian_step: f64,
    /// Initial simplex edge length.
    pub initial_step: f64,
    /// Maximum number of restarts from the best point.
    pub restarts: usize,
    /// Starting θ; the model default when absent.
    pub start: Option<Vec<f64>>,
    /// Compute standard errors after convergence.
    pub standard_errors: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::NelderMead,
            max_evals: 20_000,
            x_tol: 1e-8,
            f_tol: 1e-10,
            fd_step: 1e-5,
            hessian_step: 1e-3,
            initial_step: 0.5,
            restarts: 4,
            start: None,
            standard_errors: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.x_tol, self.f_tol, self.fd_step, self.hessian_step, self.initial_step];
        if self.max_evals == 0 || positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("optimizer tolerances and steps must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: Vec<f64>,
    pub params: ParameterSet,
    /// Natural-scale parameters, named by [`Model::natural_names`].
    pub natural: Vec<f64>,
    pub natural_names: Vec<String>,
    pub ll: f64,
    pub start_ll: f64,
    /// Objective evaluations used by the search (excluding standard errors).
    pub evals: usize,
    pub converged: bool,
    /// Standard errors of `natural`; absent at a boundary or without convergence.
    pub standard_errors: Option<Vec<f64>>,
    /// The estimate sits on (or numerically at) the boundary of the space.
    pub boundary: bool,
}

/// Counts evaluations, tracks the best point and turns failures into errors.
struct Counted<'a> {
    model: &'a Model,
    objective: &'a mut dyn Objective,
    evals: usize,
    best: Option<(f64, Vec<f64>)>,
}

impl Counted<'_> {
    /// Negative log-likelihood at θ.
    fn f(&mut self, theta: &[f64]) -> Result<f64> {
        // points whose covariance is numerically unusable count as infeasible
        let infeasible = |e: &Error| matches!(e, Error::CovarianceNotPD(_) | Error::Domain(_));
        let params = match self.model.realize(theta) {
            Ok(p) => p,
            Err(e) if infeasible(&e) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        };
        self.evals += 1;
        let ll = match self.objective.log_likelihood(&params) {
            Ok(v) => v,
            Err(e) if infeasible(&e) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        };
        let v = -ll;
        if v.is_finite() && self.best.as_ref().is_none_or(|(b, _)| v < *b) {
            self.best = Some((v, theta.to_vec()));
        }
        Ok(if v.is_finite() { v } else { f64::INFINITY })
    }
}

struct SearchEnd {
    converged: bool,
}

fn nm_converged(fs: &[f64], simplex: &[Vec<f64>], cfg: &OptimizerConfig) -> bool {
    let (lo, hi) = fs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &f| (l.min(f), h.max(f)));
    let spread_ok = hi - lo <= cfg.f_tol * lo.abs().max(1.0);
    let diameter = simplex[1..]
        .iter()
        .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    spread_ok || diameter <= cfg.x_tol
}

fn nelder_mead(c: &mut Counted<'_>, start: &[f64], cfg: &OptimizerConfig) -> Result<SearchEnd> {
    let d = start.len();
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..d {
        let mut v = start.to_vec();
        v[i] += cfg.initial_step;
        simplex.push(v);
    }
    let mut fs = simplex.iter().map(|v| c.f(v)).collect::<Result<Vec<_>>>()?;
    loop {
        let mut idx: Vec<usize> = (0..=d).collect();
        idx.sort_by(|&a, &b| fs[a].total_cmp(&fs[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        fs = idx.iter().map(|&i| fs[i]).collect();
        if nm_converged(&fs, &simplex, cfg) {
            return Ok(SearchEnd { converged: true });
        }
        if c.evals >= cfg.max_evals {
            return Ok(SearchEnd { converged: false });
        }
        let centroid: Vec<f64> = (0..d).map(|j| simplex[..d].iter().map(|v| v[j]).sum::<f64>() / d as f64).collect();
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&simplex[d]).map(|(m, w)| m + t * (m - w)).collect() };
        let xr = along(1.0);
        let fr = c.f(&xr)?;
        if fr < fs[0] {
            let xe = along(2.0);
            let fe = c.f(&xe)?;
            if fe < fr {
                simplex[d] = xe;
                fs[d] = fe;
            } else {
                simplex[d] = xr;
                fs[d] = fr;
            }
            continue;
        }
        if fr < fs[d - 1] {
            simplex[d] = xr;
            fs[d] = fr;
            continue;
        }
        let (xc, fc) = if fr < fs[d] {
            let xc = along(0.5);
            let fc = c.f(&xc)?;
            (xc, fc)
        } else {
            let xc = along(-0.5);
            let fc = c.f(&xc)?;
            (xc, fc)
        };
        if fc < fs[d].min(fr) {
            simplex[d] = xc;
            fs[d] = fc;
            continue;
        }
        // shrink towards the best vertex
        for i in 1..=d {
            simplex[i] = simplex[0].iter().zip(&simplex[i]).map(|(b, v)| b + 0.5 * (v - b)).collect();
            fs[i] = c.f(&simplex[i])?;
        }
    }
}

fn fd_gradient(c: &mut Counted<'_>, x: &[f64], step: f64) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        g[i] = (c.f(&xp)? - c.f(&xm)?) / (2.0 * h);
    }
    Ok(g)
}

fn bfgs(c: &mut Counted<'_>, start: &[f64], cfg: &OptimizerConfig) -> Result<SearchEnd> {
    let d = start.len();
    let mut x = DVector::from_column_slice(start);
    let mut fx = c.f(x.as_slice())?;
    let mut g = fd_gradient(c, x.as_slice(), cfg.fd_step)?;
    let mut h_inv = DMatrix::<f64>::identity(d, d);
    loop {
        if c.evals >= cfg.max_evals {
            return Ok(SearchEnd { converged: false });
        }
        let mut dir = -(&h_inv * &g);
        if dir.dot(&g) >= 0.0 {
            h_inv = DMatrix::identity(d, d);
            dir = -g.clone();
        }
        let mut t = 1.0;
        let slope = dir.dot(&g);
        let (x_new, f_new) = loop {
            let cand = &x + &dir * t;
            let fc = c.f(cand.as_slice())?;
            if fc <= fx + 1e-4 * t * slope {
                break (cand, fc);
            }
            t *= 0.5;
            if t * dir.amax() < cfg.x_tol || c.evals >= cfg.max_evals {
                return Ok(SearchEnd { converged: t * dir.amax() < cfg.x_tol });
            }
        };
        let s = &x_new - &x;
        let improvement = fx - f_new;
        let g_new = fd_gradient(c, x_new.as_slice(), cfg.fd_step)?;
        let y = &g_new - &g;
        x = x_new;
        fx = f_new;
        g = g_new;
        if improvement <= cfg.f_tol * fx.abs().max(1.0) || s.amax() <= cfg.x_tol {
            return Ok(SearchEnd { converged: true });
        }
        let sy = s.dot(&y);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(d, d);
            let left = &i - &s * y.transpose() * rho;
            let right = &i - &y * s.transpose() * rho;
            h_inv = &left * &h_inv * &right + &s * s.transpose() * rho;
        }
    }
}

/// Central-difference Hessian of `f` at `x` with relative step `step`.
pub fn numeric_hessian<F>(mut f: F, x: &[f64], step: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let d = x.len();
    let h: Vec<f64> = x.iter().map(|v| step * v.abs().max(1.0)).collect();
    let f0 = f(x)?;
    let mut at = |di: &[(usize, f64)]| -> Result<f64> {
        let mut y = x.to_vec();
        for &(i, s) in di {
            y[i] += s;
        }
        f(&y)
    };
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..d {
        let fp = at(&[(i, h[i])])?;
        let fm = at(&[(i, -h[i])])?;
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let pp = at(&[(i, h[i]), (j, h[j])])?;
            let pm = at(&[(i, h[i]), (j, -h[j])])?;
            let mp = at(&[(i, -h[i]), (j, h[j])])?;
            let mm = at(&[(i, -h[i]), (j, -h[j])])?;
            let v = (pp - pm - mp + mm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

/// Jacobian of the natural parameters with respect to θ (central differences).
pub fn natural_jacobian(model: &Model, theta: &[f64]) -> Result<DMatrix<f64>> {
    let base = model.natural(theta)?;
    let mut jac = DMatrix::zeros(base.len(), theta.len());
    for j in 0..theta.len() {
        let h = 1e-6 * theta[j].abs().max(1.0);
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[j] += h;
        tm[j] -= h;
        let (np, nm) = (model.natural(&tp)?, model.natural(&tm)?);
        for i in 0..base.len() {
            jac[(i, j)] = (np[i] - nm[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Delta-method standard errors on the natural scale from the Hessian of
/// `−LL` in θ. `None` when the Hessian is not positive definite.
pub fn standard_errors(model: &Model, theta: &[f64], hessian: &DMatrix<f64>) -> Result<Option<Vec<f64>>> {
    let sym = (hessian + hessian.transpose()) * 0.5;
    let Ok(chol) = cholesky(&sym) else {
        return Ok(None);
    };
    let cov_theta = chol.inverse();
    let jac = natural_jacobian(model, theta)?;
    let cov = &jac * cov_theta * jac.transpose();
    Ok(Some(cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()))
}

/// Maximize the log-likelihood of `model` under `objective`.
pub fn fit(model: &Model, objective: &mut dyn Objective, config: &OptimizerConfig) -> Result<FitResult> {
    model.validate()?;
    config.validate()?;
    let start = config.start.clone().unwrap_or_else(|| model.default_start());
    if start.len() != model.theta_len() {
        return Err(Error::Config(format!("start has {} entries, model needs {}", start.len(), model.theta_len())));
    }
    let mut c = Counted { model, objective, evals: 0, best: None };
    let start_f = c.f(&start)?;
    if !start_f.is_finite() {
        return Err(Error::Domain("log-likelihood is not finite at the starting point".into()));
    }
    let mut converged = false;
    let mut point = start.clone();
    let mut prev = start_f;
    for _ in 0..=config.restarts {
        let end = match config.method {
            Method::NelderMead => nelder_mead(&mut c, &point, config)?,
            Method::BfgsNumeric => bfgs(&mut c, &point, config)?,
        };
        let (best_f, best_x) = c.best.clone().expect("at least one evaluation");
        converged = end.converged;
        point = best_x;
        let gain = prev - best_f;
        prev = best_f;
        if !converged || gain <= config.f_tol * best_f.abs().max(1.0) {
            break;
        }
        log::debug!("restart after {} evaluations, f = {best_f}", c.evals);
    }
    let (best_f, theta) = c.best.clone().expect("at least one evaluation");
    let evals = c.evals;
    let params = model.realize(&theta)?;
    let natural = model.natural(&theta)?;
    let at_bound = model.log_scale_indices().iter().any(|&i| theta[i] < -10.0);
    let mut boundary = at_bound;
    let mut ses = None;
    if converged && config.standard_errors && !at_bound {
        let hess = numeric_hessian(|t| c.f(t), &theta, config.hessian_step)?;
        ses = standard_errors(model, &theta, &hess)?;
        boundary = ses.is_none();
    }
    log::info!("fit finished after {evals} evaluations, LL = {}", -best_f);
    Ok(FitResult {
        theta,
        params,
        natural,
        natural_names: model.natural_names(),
        ll: -best_f,
        start_ll: -start_f,
        evals,
        converged,
        standard_errors: ses,
        boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Quadratic objective in the mean of a 1-variable fixed-covariance model.
    struct Quadratic;

    impl Objective for Quadratic {
        fn log_likelihood(&mut self, params: &ParameterSet) -> Result<f64> {
            Ok(-(params.mean[0] - 3.0).powi(2))
        }
    }

    #[test]
    fn nelder_mead_finds_quadratic_maximum() {
        let model = Model::fixed_covariance(&DMatrix::identity(1, 1));
        let fit = fit(&model, &mut Quadratic, &OptimizerConfig { standard_errors: false, ..Default::default() }).unwrap();
        assert!(fit.converged);
        assert!((fit.theta[0] - 3.0).abs() < 1e-4);
        assert!(fit.ll >= fit.start_ll);
    }

    #[test]
    fn bfgs_finds_quadratic_maximum() {
        let model = Model::fixed_covariance(&DMatrix::identity(1, 1));
        let cfg = OptimizerConfig { method: Method::BfgsNumeric, standard_errors: false, ..Default::default() };
        let fit = fit(&model, &mut Quadratic, &cfg).unwrap();
        assert!((fit.theta[0] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn hessian_of_quadratic() {
        let h = numeric_hessian(|x| Ok(x[0] * x[0] + 3.0 * x[0] * x[1] + 2.0 * x[1] * x[1]), &[0.3, -0.2], 1e-3).unwrap();
        assert!((h[(0, 0)] - 2.0).abs() < 1e-6);
        assert!((h[(0, 1)] - 3.0).abs() < 1e-6);
        assert!((h[(1, 1)] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn non_pd_hessian_gives_no_errors() {
        let model = Model::fixed_covariance(&DMatrix::identity(2, 2));
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(standard_errors(&model, &[0.0, 0.0], &h).unwrap().is_none());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = OptimizerConfig { max_evals: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
