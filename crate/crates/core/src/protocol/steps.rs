//! Node-local computations of the masked vertical protocol.
//!
//! Notation, for node `k` in chain order: `X_k` its `n × p_k` data, `S_k` the
//! covariance of its block conditional on all earlier blocks, `W_k = S_k⁻¹`,
//! `μ̃_k` the masked conditional mean it receives (`true + P_k`), and `R_k`,
//! `Q_k`, `M_k` the masks it draws itself.
//!
//! With `d = X_k − μ̃_k` the node reports
//!
//! ```text
//! LL̃_k = −½ Σ_i [ p_k ln 2π + ln|S_k| + (d_i + r_i) W (d_i − r_i)ᵀ + r_i W r_iᵀ ]
//! A¹_k = W (d + R)ᵀ        A²_k = W (d − R)ᵀ + Q_k
//! ```
//!
//! The `R` terms cancel inside `LL̃_k`, leaving `LL̃_k = LL_k + Σ_i p_i W e_iᵀ − ½ p_i W p_iᵀ`
//! with `e = X_k − (true mean)`. The central node can rebuild that residue
//! from `A¹`, `A²` and its own `P_k` except for a `½ tr(P_k Q_k)` term, which
//! the next node in the chain (the only other holder of `P_k` and `Q_k`) adds.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};
use crate::mvn::{cholesky, log_det, mean_rows, neumaier_sum, ConditionalBlocks, ParameterSet, LN_2PI};
use crate::protocol::noise::NoiseSource;

/// Everything the central node derives from the parameters before any data
/// node is contacted.
#[derive(Debug, Clone)]
pub struct CentralInit {
    /// Conditional blocks per node: `S_k`, cross block with later nodes, remainder.
    pub blocks: Vec<ConditionalBlocks>,
    /// `C_k = S_k⁻¹ Σ_{k,k⁺|k⁻}` per node (`p_k × p_plus`).
    pub coefficients: Vec<DMatrix<f64>>,
    /// Mean masks `P_k` (`n × p_k`).
    pub masks: Vec<DMatrix<f64>>,
    /// Masked marginal mean of node 1's block, `μ_1 + P_1`.
    pub first_mean: DMatrix<f64>,
    /// Masked marginal mean of everything after node 1, `μ_{1⁺} + [P_2 … P_K]`.
    pub first_tail_mean: DMatrix<f64>,
}

/// Conditional covariance blocks along the chain by repeated Schur complements.
/// `cov` must already be in chain column order.
pub fn conditional_chain(cov: &DMatrix<f64>, dims: &[usize]) -> Result<Vec<ConditionalBlocks>> {
    let total: usize = dims.iter().sum();
    if total != cov.nrows() || dims.contains(&0) {
        return Err(Error::Shape(format!("block sizes {dims:?} do not split a {}x{} covariance", cov.nrows(), cov.ncols())));
    }
    let mut out = Vec::with_capacity(dims.len());
    let mut current = cov.clone();
    for &d in dims {
        let blocks = ConditionalBlocks::from_cov(&current, d)?;
        cholesky(&blocks.marginal)?;
        current = if blocks.tail_dim() > 0 {
            blocks.schur_complement()?
        } else {
            DMatrix::zeros(0, 0)
        };
        out.push(blocks);
    }
    Ok(out)
}

/// Central-node initiation: conditional blocks, coefficients and mean masks.
/// `params` must be in chain column order.
pub fn cn_initiate(params: &ParameterSet, dims: &[usize], n: usize, noise: &mut NoiseSource) -> Result<CentralInit> {
    if dims.len() < 2 {
        return Err(Error::Layout(format!("vertical protocol needs at least 2 nodes, got {}", dims.len())));
    }
    let blocks = conditional_chain(&params.cov, dims)?;
    let coefficients = blocks.iter().map(|b| b.coefficients()).collect::<Result<Vec<_>>>()?;
    let masks: Vec<DMatrix<f64>> = dims.iter().map(|&d| noise.matrix(n, d)).collect();
    let means = mean_rows(&params.mean, n);
    let p1 = dims[0];
    let first_mean = means.columns(0, p1) + &masks[0];
    let mut first_tail_mean = means.columns(p1, params.dim() - p1).into_owned();
    let mut col = 0;
    for m in &masks[1..] {
        let mut view = first_tail_mean.columns_mut(col, m.ncols());
        view += m;
        col += m.ncols();
    }
    Ok(CentralInit { blocks, coefficients, masks, first_mean, first_tail_mean })
}

/// `tr(P Q) = Σ_i (row i of P)·(column i of Q)` for `P: n×m`, `Q: m×n`.
pub fn trace_coupling(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64> {
    if p.nrows() != q.ncols() || p.ncols() != q.nrows() {
        return Err(Error::Shape(format!(
            "trace coupling of {}x{} with {}x{}",
            p.nrows(),
            p.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    Ok(neumaier_sum((0..p.nrows()).flat_map(|i| (0..p.ncols()).map(move |j| p[(i, j)] * q[(j, i)]))))
}

/// Column-wise dot products of two equally shaped matrices.
fn column_dots(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    a.column_iter().zip(b.column_iter()).map(|(x, y)| neumaier_sum(x.iter().zip(y.iter()).map(|(u, v)| u * v))).collect()
}

/// `L⁻¹ Mᵀ` for the Cholesky factor `L` of `W⁻¹`.
fn half_solve(chol: &Cholesky<f64, Dyn>, rows: &DMatrix<f64>) -> DMatrix<f64> {
    chol.l_dirty()
        .solve_lower_triangular(&rows.transpose())
        .expect("Cholesky factor has a positive diagonal")
}

fn check_block(x: &DMatrix<f64>, mu: &DMatrix<f64>, sigma: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    let (n, p) = x.shape();
    if mu.shape() != (n, p) || r.shape() != (n, p) || sigma.shape() != (p, p) {
        return Err(Error::Shape(format!(
            "node block {n}x{p} with mean {}x{}, mask {}x{}, covariance {}x{}",
            mu.nrows(),
            mu.ncols(),
            r.nrows(),
            r.ncols(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    Ok(())
}

/// Masked partial log-likelihood of one node's block.
pub fn compute_noisy_ll(mu_tilde: &DMatrix<f64>, sigma: &DMatrix<f64>, x: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<f64> {
    check_block(x, mu_tilde, sigma, r)?;
    let chol = cholesky(sigma)?;
    noisy_ll_chol(&chol, mu_tilde, x, r)
}

fn noisy_ll_chol(chol: &Cholesky<f64, Dyn>, mu_tilde: &DMatrix<f64>, x: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<f64> {
    let p = x.ncols() as f64;
    let d = x - mu_tilde;
    let plus = half_solve(chol, &(&d + r));
    let minus = half_solve(chol, &(&d - r));
    let rr = half_solve(chol, r);
    let cross = column_dots(&plus, &minus);
    let own = column_dots(&rr, &rr);
    let constant = p * LN_2PI + log_det(chol);
    let terms = cross.iter().zip(&own).flat_map(|(c, o)| [constant, *c, *o]);
    Ok(-0.5 * neumaier_sum(terms))
}

/// Output of a data node's main computation.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeComputation {
    /// Running masked total `LL̃_{1..k}`.
    pub ll_tilde: f64,
    /// `A¹_k`, `p_k × n`.
    pub a1: DMatrix<f64>,
    /// `A²_k`, `p_k × n`.
    pub a2: DMatrix<f64>,
}

/// Data node computation: masked partial LL added to the running total and
/// the adjustment bundle for the central node. `running` is `None` at node 1.
pub fn en_compute(
    x: &DMatrix<f64>,
    mu_tilde: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    running: Option<f64>,
    r: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> Result<NodeComputation> {
    check_block(x, mu_tilde, sigma, r)?;
    if q.shape() != (x.ncols(), x.nrows()) {
        return Err(Error::Shape(format!("Q is {}x{}, expected {}x{}", q.nrows(), q.ncols(), x.ncols(), x.nrows())));
    }
    let chol = cholesky(sigma)?;
    let own = noisy_ll_chol(&chol, mu_tilde, x, r)?;
    let d = x - mu_tilde;
    let a1 = chol.solve(&(&d + r).transpose());
    let a2 = chol.solve(&(&d - r).transpose()) + q;
    let ll_tilde = match running {
        Some(prev) => neumaier_sum([prev, own]),
        None => own,
    };
    Ok(NodeComputation { ll_tilde, a1, a2 })
}

/// Central adjustment: `B_k = μ̃_{k⁺} + A¹_kᵀ Σ_{k,k⁺|k⁻}`.
pub fn cn_adjust(a1: &DMatrix<f64>, tail_mean: &DMatrix<f64>, cross: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a1.nrows() != cross.nrows() || a1.ncols() != tail_mean.nrows() || tail_mean.ncols() != cross.ncols() {
        return Err(Error::Shape(format!(
            "A1 {}x{}, tail means {}x{}, cross block {}x{}",
            a1.nrows(),
            a1.ncols(),
            tail_mean.nrows(),
            tail_mean.ncols(),
            cross.nrows(),
            cross.ncols()
        )));
    }
    Ok(tail_mean + a1.transpose() * cross)
}

/// What node `k+1` recovers from node `k`'s forward and the central forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjusted {
    /// Running total with node `k`'s coupling residue removed.
    pub ll_star: f64,
    /// Masked conditional mean of the receiving node's own block.
    pub own_mean: DMatrix<f64>,
    /// Masked conditional mean of the blocks after the receiving node.
    pub tail_mean: DMatrix<f64>,
}

/// Previous node's contribution as received by node `k+1`.
#[derive(Debug, Clone, Copy)]
pub struct Upstream<'a> {
    pub ll_tilde: f64,
    pub b: &'a DMatrix<f64>,
    pub c: &'a DMatrix<f64>,
    pub r: &'a DMatrix<f64>,
    pub p: &'a DMatrix<f64>,
    pub q: &'a DMatrix<f64>,
    pub m: Option<&'a DMatrix<f64>>,
}

/// Data node adjustment at node `k+1`:
/// `μ̃ = B_k − M_k − (R_k − P_k) C_k`, split into the node's own `own_dim`
/// columns and the rest, and `LL̃* = LL̃ + ½ tr(P_k Q_k)`.
pub fn en_adjust(up: Upstream<'_>, own_dim: usize) -> Result<Adjusted> {
    let (n, tail) = up.b.shape();
    if up.r.shape() != up.p.shape() || up.r.nrows() != n || up.c.shape() != (up.r.ncols(), tail) {
        return Err(Error::Shape(format!(
            "B {}x{}, C {}x{}, R {}x{}, P {}x{}",
            n,
            tail,
            up.c.nrows(),
            up.c.ncols(),
            up.r.nrows(),
            up.r.ncols(),
            up.p.nrows(),
            up.p.ncols()
        )));
    }
    if own_dim == 0 || own_dim > tail {
        return Err(Error::Shape(format!("node block of {own_dim} columns in a tail of {tail}")));
    }
    let mut mean = up.b - (up.r - up.p) * up.c;
    if let Some(m) = up.m {
        if m.shape() != mean.shape() {
            return Err(Error::Shape(format!("M is {}x{}, expected {}x{}", m.nrows(), m.ncols(), n, tail)));
        }
        mean -= m;
    }
    let ll_star = neumaier_sum([up.ll_tilde, 0.5 * trace_coupling(up.p, up.q)?]);
    Ok(Adjusted {
        ll_star,
        own_mean: mean.columns(0, own_dim).into_owned(),
        tail_mean: mean.columns(own_dim, tail - own_dim).into_owned(),
    })
}

/// First node adjustment: `LL̃* = LL̃ + ½ tr(P_K Q_K)`.
pub fn fn_adjust(ll_tilde: f64, p_last: &DMatrix<f64>, q_last: &DMatrix<f64>) -> Result<f64> {
    Ok(neumaier_sum([ll_tilde, 0.5 * trace_coupling(p_last, q_last)?]))
}

/// The part of node `k`'s masked contribution the central node can rebuild:
/// `tr(P A¹) + tr(P A²) + Σ_i p_i S⁻¹ p_iᵀ`.
pub fn central_correction(a1: &DMatrix<f64>, a2: &DMatrix<f64>, p: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    if a1.shape() != a2.shape() || a1.shape() != (p.ncols(), p.nrows()) || sigma.shape() != (p.ncols(), p.ncols()) {
        return Err(Error::Shape(format!(
            "bundle {}x{} / {}x{} against mask {}x{} and covariance {}x{}",
            a1.nrows(),
            a1.ncols(),
            a2.nrows(),
            a2.ncols(),
            p.nrows(),
            p.ncols(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let chol = cholesky(sigma)?;
    let half = half_solve(&chol, p);
    let pwp = column_dots(&half, &half);
    let mut terms = vec![trace_coupling(p, a1)?, trace_coupling(p, a2)?];
    terms.extend(pwp);
    Ok(neumaier_sum(terms))
}

/// Central final de-noising: `LL = LL̃* − ½ Σ_k correction_k`.
pub fn cn_final(
    ll_star: f64,
    bundles: &[(DMatrix<f64>, DMatrix<f64>)],
    masks: &[DMatrix<f64>],
    sigmas: &[DMatrix<f64>],
) -> Result<f64> {
    if bundles.len() != masks.len() || masks.len() != sigmas.len() {
        return Err(Error::ProtocolOrder(format!(
            "{} bundles for {} nodes ({} covariance blocks)",
            bundles.len(),
            masks.len(),
            sigmas.len()
        )));
    }
    let mut terms = vec![ll_star];
    for ((a, p), s) in bundles.iter().zip(masks).zip(sigmas) {
        terms.push(-0.5 * central_correction(&a.0, &a.1, p, s)?);
    }
    Ok(neumaier_sum(terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mvn::{log_likelihood_rows, select_columns};
    use crate::protocol::noise::NoiseLedger;
    use crate::sim::{random_pd, standard_normal_matrix};
    use nalgebra::{dmatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_expansion_cancels_r() {
        // x = 0, μ̃ = 0, Σ = 1, r = 0.7: (0 + r)(0 − r) + r² = 0.
        let ll = compute_noisy_ll(&dmatrix![0.0], &dmatrix![1.0], &dmatrix![0.0], &dmatrix![0.7]).unwrap();
        assert!((ll + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_matches_plain_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sigma = random_pd(&mut rng, 3);
        let x = standard_normal_matrix(&mut rng, 5, 3);
        let mu = DMatrix::from_element(5, 3, 0.2);
        let zero = DMatrix::zeros(5, 3);
        let got = compute_noisy_ll(&mu, &sigma, &x, &zero).unwrap();
        let want = log_likelihood_rows(&x, &mu, &sigma).unwrap();
        assert!((got - want).abs() < 1e-12);
        let out = en_compute(&x, &mu, &sigma, None, &zero, &DMatrix::zeros(3, 5)).unwrap();
        assert_eq!(out.a1, out.a2);
        assert!((out.ll_tilde - want).abs() < 1e-12);
    }

    /// Independent expansion of the residue left in a masked contribution.
    fn residue_oracle(x: &DMatrix<f64>, mu: &DMatrix<f64>, p: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
        let w = sigma.clone().try_inverse().unwrap();
        let mut total = 0.0;
        for i in 0..x.nrows() {
            let e = (x.row(i) - mu.row(i)).transpose();
            let pi = p.row(i).transpose();
            total += (pi.transpose() * &w * &e)[(0, 0)] - 0.5 * (pi.transpose() * &w * &pi)[(0, 0)];
        }
        total
    }

    #[test]
    fn masked_contribution_decomposes_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, pk) = (4, 2);
        let sigma = random_pd(&mut rng, pk);
        let x = standard_normal_matrix(&mut rng, n, pk);
        let mu = standard_normal_matrix(&mut rng, n, pk);
        let mut src = NoiseLedger::new(3.0, 5).unwrap().source(0, 1, 0);
        let (p, r, q) = (src.matrix(n, pk), src.matrix(n, pk), src.matrix(pk, n));
        let out = en_compute(&x, &(&mu + &p), &sigma, None, &r, &q).unwrap();
        let truth = log_likelihood_rows(&x, &mu, &sigma).unwrap();
        assert!((out.ll_tilde - truth - residue_oracle(&x, &mu, &p, &sigma)).abs() < 1e-9);
        // central-removable part plus the next node's tr(PQ) term restore the truth
        let central = central_correction(&out.a1, &out.a2, &p, &sigma).unwrap();
        let next = trace_coupling(&p, &q).unwrap();
        assert!((out.ll_tilde + 0.5 * next - 0.5 * central - truth).abs() < 1e-9);
        // bundle consistency: A1 − (A2 − Q) = 2 Σ⁻¹ Rᵀ
        let diff = &out.a1 - (&out.a2 - &q);
        let expect = sigma.clone().try_inverse().unwrap() * r.transpose() * 2.0;
        assert!((diff - expect).amax() < 1e-9);
    }

    #[test]
    fn central_initiation_blocks_match_direct_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cov = random_pd(&mut rng, 6);
        let params = ParameterSet::unnamed(DVector::zeros(6), cov.clone()).unwrap();
        let mut src = NoiseLedger::disabled(0).source(0, 0, 0);
        let init = cn_initiate(&params, &[2, 2, 2], 3, &mut src).unwrap();
        // node 3's block given nodes 1 and 2, directly
        let a = [0, 1, 2, 3];
        let b = [4, 5];
        let saa = crate::mvn::select_block(&cov, &a, &a);
        let sab = crate::mvn::select_block(&cov, &a, &b);
        let sbb = crate::mvn::select_block(&cov, &b, &b);
        let direct = &sbb - sab.transpose() * saa.try_inverse().unwrap() * &sab;
        assert!((&init.blocks[2].marginal - direct).amax() < 1e-10);
        assert_eq!(init.first_mean, DMatrix::zeros(3, 2));
        assert_eq!(init.masks.len(), 3);
    }

    #[test]
    fn independence_gives_identity_block_and_unmasked_mean() {
        let params = ParameterSet::unnamed(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let mut src = NoiseLedger::new(5.0, 1).unwrap().source(0, 0, 0);
        let init = cn_initiate(&params, &[1, 1], 4, &mut src).unwrap();
        assert_eq!(init.blocks[1].marginal, dmatrix![1.0]);
        assert_eq!(init.first_mean, init.masks[0]);
        assert_eq!(init.first_tail_mean, init.masks[1]);
        let b = cn_adjust(&DMatrix::from_element(1, 4, 3.0), &init.first_tail_mean, &init.blocks[0].cross).unwrap();
        assert_eq!(b, init.first_tail_mean);
    }

    #[test]
    fn two_node_chain_restores_conditional_mean_and_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, p) = (6, 3);
        let cov = random_pd(&mut rng, p);
        let mean = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let params = ParameterSet::unnamed(mean.clone(), cov.clone()).unwrap();
        let x = standard_normal_matrix(&mut rng, n, p);
        let ledger = NoiseLedger::new(50.0, 2).unwrap();
        let mut cn = ledger.source(0, 0, 0);
        let mut dn1 = ledger.source(0, 1, 0);
        let mut dn2 = ledger.source(0, 2, 0);
        let init = cn_initiate(&params, &[1, 2], n, &mut cn).unwrap();
        let x1 = select_columns(&x, &[0]);
        let x2 = select_columns(&x, &[1, 2]);
        let (r1, q1) = (dn1.matrix(n, 1), dn1.matrix(1, n));
        let out1 = en_compute(&x1, &init.first_mean, &init.blocks[0].marginal, None, &r1, &q1).unwrap();
        let b1 = cn_adjust(&out1.a1, &init.first_tail_mean, &init.blocks[0].cross).unwrap();
        let adj = en_adjust(
            Upstream { ll_tilde: out1.ll_tilde, b: &b1, c: &init.coefficients[0], r: &r1, p: &init.masks[0], q: &q1, m: None },
            2,
        )
        .unwrap();
        // node 2's mean is the true conditional mean plus its own mask
        let blocks = ConditionalBlocks::from_cov(&cov, 1).unwrap();
        let means = mean_rows(&mean, n);
        let cond = crate::mvn::condition(&blocks, &x1, &means.columns(0, 1).into_owned(), &means.columns(1, 2).into_owned()).unwrap();
        assert!((&adj.own_mean - &init.masks[1] - &cond.mean).amax() < 1e-8);
        assert_eq!(adj.tail_mean.ncols(), 0);
        let (r2, q2) = (dn2.matrix(n, 2), dn2.matrix(2, n));
        let out2 = en_compute(&x2, &adj.own_mean, &init.blocks[1].marginal, Some(adj.ll_star), &r2, &q2).unwrap();
        let ll_star = fn_adjust(out2.ll_tilde, &init.masks[1], &q2).unwrap();
        let total = cn_final(
            ll_star,
            &[(out1.a1, out1.a2), (out2.a1, out2.a2)],
            &init.masks,
            &[init.blocks[0].marginal.clone(), init.blocks[1].marginal.clone()],
        )
        .unwrap();
        let pooled = log_likelihood_rows(&x, &means, &cov).unwrap();
        assert!(((total - pooled) / pooled).abs() < 1e-9, "{total} vs {pooled}");
        assert!((out1.ll_tilde - log_likelihood_rows(&x1, &means.columns(0, 1).into_owned(), &blocks.marginal).unwrap()).abs() > 1.0);
    }

    #[test]
    fn shape_and_order_errors() {
        let m = DMatrix::zeros(2, 2);
        assert!(matches!(trace_coupling(&m, &DMatrix::zeros(3, 2)), Err(Error::Shape(_))));
        assert!(matches!(cn_final(0.0, &[], std::slice::from_ref(&m), std::slice::from_ref(&m)), Err(Error::ProtocolOrder(_))));
        assert!(matches!(cn_adjust(&DMatrix::zeros(1, 3), &m, &DMatrix::zeros(1, 2)), Err(Error::Shape(_))));
        let params = ParameterSet::unnamed(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let mut src = NoiseLedger::disabled(0).source(0, 0, 0);
        assert!(matches!(cn_initiate(&params, &[2], 3, &mut src), Err(Error::Layout(_))));
    }
}
