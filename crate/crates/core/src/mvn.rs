//! Dense multivariate-normal math: log-likelihood evaluation, block
//! partitioning of the mean and covariance, and Schur-complement
//! conditioning.
//!
//! Observations are rows. Conditional means are carried as `n × q`
//! matrices so that every row can have its own mean, which is what the
//! sequential conditioning over vertical partitions produces.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Compensated (Neumaier) summation.
///
/// The masked protocol adds and removes terms many orders of magnitude larger
/// than the likelihood itself, so plain left-to-right summation is not enough.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Cholesky factorization that reports failure as `CovarianceNotPD`.
pub fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if !m.is_square() {
        return Err(Error::Shape(format!(
            "covariance must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::CovarianceNotPD("non-finite entry".into()));
    }
    Cholesky::new(m.clone()).ok_or_else(|| {
        Error::CovarianceNotPD(format!("Cholesky failed on {}x{} matrix", m.nrows(), m.ncols()))
    })
}

/// `ln|Σ|` from a Cholesky factor: `2 Σ ln L_ii`.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * neumaier_sum(chol.l_dirty().diagonal().iter().map(|d| d.ln()))
}

/// Checks symmetry to `1e-12` relative, then symmetrizes by averaging.
pub fn symmetrize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::CovarianceNotPD(format!(
                    "asymmetric entries ({i},{j}): {} vs {}",
                    m[(i, j)],
                    m[(j, i)]
                )));
            }
        }
    }
    Ok((m + m.transpose()) * 0.5)
}

/// Mean vector and positive-definite covariance for `p` variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub var_names: Vec<String>,
}

impl ParameterSet {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, var_names: Vec<String>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Shape(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        if var_names.len() != mean.len() {
            return Err(Error::Shape(format!(
                "{} variable names for {} variables",
                var_names.len(),
                mean.len()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite mean".into()));
        }
        let cov = symmetrize(&cov)?;
        cholesky(&cov)?;
        Ok(Self { mean, cov, var_names })
    }

    /// Parameter set with generated names `x1..xp`.
    pub fn unnamed(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let names = default_names(mean.len());
        Self::new(mean, cov, names)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Restriction (and reordering) to the listed variables.
    pub fn select(&self, vars: &[usize]) -> Result<Self> {
        if let Some(&bad) = vars.iter().find(|&&v| v >= self.dim()) {
            return Err(Error::Shape(format!("variable {bad} out of range for p={}", self.dim())));
        }
        let mean = DVector::from_iterator(vars.len(), vars.iter().map(|&v| self.mean[v]));
        let cov = DMatrix::from_fn(vars.len(), vars.len(), |i, j| self.cov[(vars[i], vars[j])]);
        let names = vars.iter().map(|&v| self.var_names[v].clone()).collect();
        Self::new(mean, cov, names)
    }
}

pub fn default_names(p: usize) -> Vec<String> {
    (1..=p).map(|i| format!("x{i}")).collect()
}

/// A node's slice of the data: rows are individuals.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPartition {
    pub rows: DMatrix<f64>,
    pub col_ids: Vec<usize>,
    pub row_ids: Vec<usize>,
}

impl DataPartition {
    pub fn new(rows: DMatrix<f64>, col_ids: Vec<usize>, row_ids: Vec<usize>) -> Result<Self> {
        if col_ids.len() != rows.ncols() || row_ids.len() != rows.nrows() {
            return Err(Error::Shape(format!(
                "{}x{} data with {} column ids and {} row ids",
                rows.nrows(),
                rows.ncols(),
                col_ids.len(),
                row_ids.len()
            )));
        }
        if col_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Layout("column ids must be strictly increasing".into()));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::MissingData("partition contains missing or non-finite values".into()));
        }
        Ok(Self { rows, col_ids, row_ids })
    }

    /// Partition covering columns `0..p` and rows `0..n`.
    pub fn dense(rows: DMatrix<f64>) -> Result<Self> {
        let (n, p) = rows.shape();
        Self::new(rows, (0..p).collect(), (0..n).collect())
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn p(&self) -> usize {
        self.rows.ncols()
    }
}

/// Broadcast a mean vector to an `n × p` matrix of per-row means.
pub fn mean_rows(mean: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, mean.len(), |_, j| mean[j])
}

pub fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub fn select_block(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Per-row Gaussian log-likelihood `Σᵢ −½[p ln 2π + ln|Σ| + rᵢ Σ⁻¹ rᵢᵀ]`
/// where `rᵢ` is row `i` of `x − mean`.
pub fn log_likelihood_rows(x: &DMatrix<f64>, mean: &DMatrix<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if x.shape() != mean.shape() {
        return Err(Error::Shape(format!(
            "data is {}x{} but means are {}x{}",
            x.nrows(),
            x.ncols(),
            mean.nrows(),
            mean.ncols()
        )));
    }
    if cov.nrows() != x.ncols() {
        return Err(Error::Shape(format!(
            "data has {} columns but covariance is {}x{}",
            x.ncols(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = cholesky(cov)?;
    Ok(log_likelihood_chol(x, mean, &chol))
}

pub(crate) fn log_likelihood_chol(x: &DMatrix<f64>, mean: &DMatrix<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let (n, p) = x.shape();
    let resid_t = (x - mean).transpose();
    let whitened = chol
        .l_dirty()
        .solve_lower_triangular(&resid_t)
        .expect("Cholesky factor has a positive diagonal");
    let constant = p as f64 * LN_2PI + log_det(chol);
    let ll = neumaier_sum(whitened.column_iter().map(|c| c.norm_squared()));
    -0.5 * (n as f64 * constant + ll)
}

/// Joint log-likelihood of a data partition under `params`.
pub fn log_likelihood(params: &ParameterSet, data: &DataPartition) -> Result<f64> {
    if data.p() != params.dim() {
        return Err(Error::Shape(format!(
            "data has {} columns but parameters have dimension {}",
            data.p(),
            params.dim()
        )));
    }
    log_likelihood_rows(&data.rows, &mean_rows(&params.mean, data.n()), &params.cov)
}

/// A (conditional) covariance split at a node boundary: the node's own block,
/// its cross block with everything after it, and the block of everything after it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalBlocks {
    /// `Σ_{kk|k⁻}`, `p_k × p_k`.
    pub marginal: DMatrix<f64>,
    /// `Σ_{k,k⁺|k⁻}`, `p_k × p_plus`.
    pub cross: DMatrix<f64>,
    /// `Σ_{k⁺k⁺|k⁻}`, `p_plus × p_plus`.
    pub remainder: DMatrix<f64>,
}

impl ConditionalBlocks {
    /// Split a `(p_k + p_plus)`-square covariance after its first `p_k` variables.
    pub fn from_cov(cov: &DMatrix<f64>, p_k: usize) -> Result<Self> {
        if !cov.is_square() || p_k == 0 || p_k > cov.nrows() {
            return Err(Error::Shape(format!(
                "cannot split a {}x{} covariance after {} variables",
                cov.nrows(),
                cov.ncols(),
                p_k
            )));
        }
        let p = cov.nrows();
        let rest = p - p_k;
        Ok(Self {
            marginal: cov.view((0, 0), (p_k, p_k)).into_owned(),
            cross: cov.view((0, p_k), (p_k, rest)).into_owned(),
            remainder: cov.view((p_k, p_k), (rest, rest)).into_owned(),
        })
    }

    pub fn own_dim(&self) -> usize {
        self.marginal.nrows()
    }

    pub fn tail_dim(&self) -> usize {
        self.remainder.nrows()
    }

    /// Regression coefficients `Σ_{kk}⁻¹ Σ_{k,k⁺}` (`p_k × p_plus`).
    pub fn coefficients(&self) -> Result<DMatrix<f64>> {
        let chol = cholesky(&self.marginal)?;
        Ok(chol.solve(&self.cross))
    }

    /// Schur complement `Σ_{k⁺k⁺} − Σ_{k,k⁺}ᵀ Σ_{kk}⁻¹ Σ_{k,k⁺}`, symmetrized.
    pub fn schur_complement(&self) -> Result<DMatrix<f64>> {
        let chol = cholesky(&self.marginal)?;
        let half = chol
            .l_dirty()
            .solve_lower_triangular(&self.cross)
            .expect("Cholesky factor has a positive diagonal");
        let s = &self.remainder - half.transpose() * half;
        Ok((&s + s.transpose()) * 0.5)
    }
}

/// Result of conditioning the tail variables on one more observed block.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioned {
    /// Conditional covariance of the tail, `p_plus × p_plus`.
    pub cov: DMatrix<f64>,
    /// Conditional per-row means of the tail, `n × p_plus`.
    pub mean: DMatrix<f64>,
}

/// Condition the tail on an observed block:
/// `μ̂₊ = μ₊ + (X_k − μ̂_k) Σ_{kk}⁻¹ Σ_{k,k⁺}` and the Schur complement for the covariance.
pub fn condition(
    blocks: &ConditionalBlocks,
    observed: &DMatrix<f64>,
    own_mean: &DMatrix<f64>,
    tail_mean: &DMatrix<f64>,
) -> Result<Conditioned> {
    let n = observed.nrows();
    if observed.ncols() != blocks.own_dim() || own_mean.shape() != observed.shape() {
        return Err(Error::Shape(format!(
            "observed block {}x{} and own means {}x{} for a {}-variable node",
            observed.nrows(),
            observed.ncols(),
            own_mean.nrows(),
            own_mean.ncols(),
            blocks.own_dim()
        )));
    }
    if tail_mean.shape() != (n, blocks.tail_dim()) {
        return Err(Error::Shape(format!(
            "tail means are {}x{}, expected {}x{}",
            tail_mean.nrows(),
            tail_mean.ncols(),
            n,
            blocks.tail_dim()
        )));
    }
    let coef = blocks.coefficients()?;
    let mean = tail_mean + (observed - own_mean) * coef;
    let cov = blocks.schur_complement()?;
    Ok(Conditioned { cov, mean })
}

/// All `Σ_{x_k x_l}` blocks for the given disjoint column sets, indexed `[k][l]`.
pub fn split_blocks(cov: &DMatrix<f64>, col_sets: &[Vec<usize>]) -> Result<Vec<Vec<DMatrix<f64>>>> {
    check_column_cover(cov.nrows(), col_sets)?;
    Ok(col_sets
        .iter()
        .map(|rows| col_sets.iter().map(|cols| select_block(cov, rows, cols)).collect())
        .collect())
}

/// Inverse of [`split_blocks`].
pub fn reassemble_blocks(blocks: &[Vec<DMatrix<f64>>], col_sets: &[Vec<usize>], p: usize) -> Result<DMatrix<f64>> {
    check_column_cover(p, col_sets)?;
    let mut out = DMatrix::zeros(p, p);
    for (k, rows) in col_sets.iter().enumerate() {
        for (l, cols) in col_sets.iter().enumerate() {
            let b = &blocks[k][l];
            if b.shape() != (rows.len(), cols.len()) {
                return Err(Error::Shape(format!("block ({k},{l}) has the wrong shape")));
            }
            for (i, &r) in rows.iter().enumerate() {
                for (j, &c) in cols.iter().enumerate() {
                    out[(r, c)] = b[(i, j)];
                }
            }
        }
    }
    Ok(out)
}

/// Checks that `col_sets` partition `0..p` with no overlap and no gap.
pub fn check_column_cover(p: usize, col_sets: &[Vec<usize>]) -> Result<()> {
    let mut seen = vec![false; p];
    for set in col_sets {
        for &c in set {
            if c >= p {
                return Err(Error::Layout(format!("column {c} out of range for p={p}")));
            }
            if seen[c] {
                return Err(Error::Layout(format!("column {c} is owned by more than one node")));
            }
            seen[c] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Layout(format!("column {missing} is not owned by any node")));
    }
    Ok(())
}
