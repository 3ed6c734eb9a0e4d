//! Ground-truth evaluators that work on pooled data. They exist to check the
//! secure pipeline and are never used inside node runtimes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mvn::{
    cholesky, condition, log_likelihood, log_likelihood_rows, mean_rows, neumaier_sum, select_block, select_columns, ConditionalBlocks,
    DataPartition, ParameterSet,
};
use crate::partition::PartitionLayout;

/// Joint log-likelihood of `params` on the pooled dataset.
pub fn pooled_ll(params: &ParameterSet, pooled: &DataPartition) -> Result<f64> {
    log_likelihood(params, pooled)
}

/// Reassemble the full `n × p` matrix from per-node partitions.
pub fn assemble_pooled(layout: &PartitionLayout, data: &[DataPartition]) -> Result<DataPartition> {
    if data.len() != layout.k() {
        return Err(Error::Layout(format!("{} partitions for {} nodes", data.len(), layout.k())));
    }
    let mut full = DMatrix::from_element(layout.n, layout.p, f64::NAN);
    for d in data {
        for (i, &r) in d.row_ids.iter().enumerate() {
            for (j, &c) in d.col_ids.iter().enumerate() {
                if r >= layout.n || c >= layout.p {
                    return Err(Error::Layout(format!("cell ({r}, {c}) outside the {}x{} grid", layout.n, layout.p)));
                }
                full[(r, c)] = d.rows[(i, j)];
            }
        }
    }
    DataPartition::dense(full)
}

/// Split a pooled matrix into the partitions a layout assigns to each node.
pub fn split_pooled(layout: &PartitionLayout, pooled: &DMatrix<f64>) -> Result<Vec<DataPartition>> {
    if pooled.shape() != (layout.n, layout.p) {
        return Err(Error::Shape(format!("{}x{} data for a {}x{} layout", pooled.nrows(), pooled.ncols(), layout.n, layout.p)));
    }
    layout
        .nodes
        .iter()
        .map(|c| DataPartition::new(select_block(pooled, &c.rows, &c.cols), c.cols.clone(), c.rows.clone()))
        .collect()
}

/// Closed-form saturated maximum-likelihood estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormMle {
    pub mean: DVector<f64>,
    /// `n`-denominator sample covariance.
    pub cov: DMatrix<f64>,
    /// The covariance is not positive definite (e.g. `n ≤ p`).
    pub singular: bool,
}

impl ClosedFormMle {
    pub fn params(&self) -> Result<ParameterSet> {
        ParameterSet::unnamed(self.mean.clone(), self.cov.clone())
    }
}

pub fn closed_form_mle(pooled: &DataPartition) -> Result<ClosedFormMle> {
    let n = pooled.n();
    if n < 2 {
        return Err(Error::Rank(format!("closed-form estimate needs at least 2 rows, got {n}")));
    }
    let x = &pooled.rows;
    let mean = DVector::from_fn(pooled.p(), |j, _| neumaier_sum(x.column(j).iter().copied()) / n as f64);
    let centered = x - mean_rows(&mean, n);
    let cov = centered.transpose() * &centered / n as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    let singular = n <= pooled.p() || cholesky(&cov).is_err();
    Ok(ClosedFormMle { mean, cov, singular })
}

/// Trace of the non-secure chain: every node sees true conditional parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NonsecureTrace {
    /// True partial log-likelihood of each node given the earlier nodes.
    pub partials: Vec<f64>,
    /// Running totals after each node.
    pub running: Vec<f64>,
    /// Conditional mean of each node's block given earlier blocks (`n × p_k`).
    pub cond_means: Vec<DMatrix<f64>>,
    /// Conditional mean of everything after node `k` given blocks `1..=k` (`n × p_plus`).
    pub tail_means: Vec<DMatrix<f64>>,
    /// Conditional covariance of each node's block given earlier blocks.
    pub cond_covs: Vec<DMatrix<f64>>,
    pub total: f64,
}

/// Sequential conditioning without masks. `blocks[k]` is node `k+1`'s data
/// for the columns `chain_cols[k]` (global variable indices).
pub fn nonsecure_pass(params: &ParameterSet, chain_cols: &[Vec<usize>], blocks: &[DMatrix<f64>]) -> Result<NonsecureTrace> {
    if chain_cols.len() != blocks.len() || blocks.is_empty() {
        return Err(Error::Layout(format!("{} column sets for {} data blocks", chain_cols.len(), blocks.len())));
    }
    crate::mvn::check_column_cover(params.dim(), chain_cols)?;
    let n = blocks[0].nrows();
    let order: Vec<usize> = chain_cols.iter().flatten().copied().collect();
    let chained = params.select(&order)?;
    let mut cov = chained.cov.clone();
    let mut mean = mean_rows(&chained.mean, n);
    let mut trace = NonsecureTrace {
        partials: Vec::new(),
        running: Vec::new(),
        cond_means: Vec::new(),
        tail_means: Vec::new(),
        cond_covs: Vec::new(),
        total: 0.0,
    };
    for (cols, x) in chain_cols.iter().zip(blocks) {
        let pk = cols.len();
        if x.shape() != (n, pk) {
            return Err(Error::Shape(format!("data block {}x{} for {} columns over {n} rows", x.nrows(), x.ncols(), pk)));
        }
        let split = ConditionalBlocks::from_cov(&cov, pk)?;
        let own_mean = mean.columns(0, pk).into_owned();
        let ll = log_likelihood_rows(x, &own_mean, &split.marginal)?;
        trace.partials.push(ll);
        trace.running.push(neumaier_sum(trace.partials.iter().copied()));
        trace.cond_means.push(own_mean.clone());
        trace.cond_covs.push(split.marginal.clone());
        let tail = mean.columns(pk, mean.ncols() - pk).into_owned();
        if split.tail_dim() > 0 {
            let next = condition(&split, x, &own_mean, &tail)?;
            cov = next.cov;
            mean = next.mean;
        } else {
            mean = tail;
        }
        trace.tail_means.push(mean.clone());
    }
    trace.total = neumaier_sum(trace.partials.iter().copied());
    Ok(trace)
}

/// Pooled data blocks in chain order, for [`nonsecure_pass`].
pub fn chain_blocks(pooled: &DMatrix<f64>, chain_cols: &[Vec<usize>]) -> Vec<DMatrix<f64>> {
    chain_cols.iter().map(|c| select_columns(pooled, c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{random_params, sample_mvn};
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_points_give_singular_estimate() {
        let d = DataPartition::dense(dmatrix![0.0, 0.0; 2.0, 2.0]).unwrap();
        let mle = closed_form_mle(&d).unwrap();
        assert_eq!(mle.mean, DVector::from_vec(vec![1.0, 1.0]));
        assert_eq!(mle.cov, dmatrix![1.0, 1.0; 1.0, 1.0]);
        assert!(mle.singular);
        let one = DataPartition::dense(dmatrix![1.0, 2.0]).unwrap();
        assert!(matches!(closed_form_mle(&one), Err(Error::Rank(_))));
    }

    #[test]
    fn chain_identity_on_random_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = random_params(&mut rng, 5);
        let x = sample_mvn(&mut rng, &params, 30).unwrap();
        let chain = vec![vec![3], vec![0, 4], vec![1, 2]];
        let trace = nonsecure_pass(&params, &chain, &chain_blocks(&x, &chain)).unwrap();
        let pooled = pooled_ll(&params, &DataPartition::dense(x).unwrap()).unwrap();
        assert!(((trace.total - pooled) / pooled).abs() < 1e-10);
        assert_eq!(trace.tail_means.last().unwrap().ncols(), 0);
    }

    #[test]
    fn split_and_assemble_are_inverse() {
        let layout = PartitionLayout::vertical(4, &[vec![1], vec![0, 2]]).unwrap();
        let x = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        let parts = split_pooled(&layout, &x).unwrap();
        assert_eq!(assemble_pooled(&layout, &parts).unwrap().rows, x);
    }
}
