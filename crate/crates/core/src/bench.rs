//! Timing and accuracy sweeps over `(n, p, K)` grids.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mvn::DataPartition;
use crate::oracle::{closed_form_mle, pooled_ll, split_pooled};
use crate::partition::{Federation, FederationOptions, PartitionLayout};
use crate::protocol::noise::{derive_seed, NoiseLedger};
use crate::sim::{random_params, sample_mvn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchCell {
    pub n: usize,
    pub p: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Timed evaluations per cell (after one warm-up).
    pub reps: usize,
    pub noise_scale: f64,
    pub seed: u64,
    /// Cells with `n · p` above this are rejected.
    pub max_cells: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { reps: 5, noise_scale: 10.0, seed: 1, max_cells: 5_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub p: usize,
    pub k: usize,
    /// Median wall-clock seconds per secure evaluation.
    pub seconds: f64,
    /// `|secure − pooled|` log-likelihood at the pooled closed-form estimate.
    pub ll_error: f64,
    pub pooled_ll: f64,
}

/// Cartesian product of the given axes, in `n`, `p`, `K` order.
pub fn grid(ns: &[usize], ps: &[usize], ks: &[usize]) -> Vec<BenchCell> {
    let mut cells = Vec::new();
    for &n in ns {
        for &p in ps {
            for &k in ks {
                cells.push(BenchCell { n, p, k });
            }
        }
    }
    cells
}

/// Contiguous, as-even-as-possible column split over `k` nodes.
pub fn even_columns(p: usize, k: usize) -> Vec<Vec<usize>> {
    let base = p / k;
    let extra = p % k;
    let mut start = 0;
    (0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let cols = (start..start + len).collect();
            start += len;
            cols
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

pub fn run_cell(cell: BenchCell, config: &BenchConfig) -> Result<BenchRow> {
    let BenchCell { n, p, k } = cell;
    if k < 2 || k > p || n <= p {
        return Err(Error::Config(format!("bench cell n={n} p={p} K={k} needs 2 ≤ K ≤ p < n")));
    }
    if n.saturating_mul(p) > config.max_cells {
        return Err(Error::Config(format!("bench cell n={n} p={p} exceeds the cap of {} data cells", config.max_cells)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, n as u64, p as u64, k as u64]));
    let truth = random_params(&mut rng, p);
    let x = sample_mvn(&mut rng, &truth, n)?;
    let pooled = DataPartition::dense(x.clone())?;
    let at = closed_form_mle(&pooled)?.params()?;
    let expected = pooled_ll(&at, &pooled)?;

    let layout = PartitionLayout::vertical(n, &even_columns(p, k))?;
    let data = split_pooled(&layout, &x)?;
    let noise = NoiseLedger::new(config.noise_scale, config.seed)?;
    let mut fed = Federation::new(layout, data, FederationOptions::new(noise))?;
    let secure = fed.evaluate(&at)?;
    let mut times = Vec::with_capacity(config.reps);
    for _ in 0..config.reps.max(1) {
        let t = Instant::now();
        fed.evaluate(&at)?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(BenchRow { n, p, k, seconds: median(times), ll_error: (secure - expected).abs(), pooled_ll: expected })
}

pub fn run_bench(cells: &[BenchCell], config: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cells.is_empty() {
        return Err(Error::Config("empty bench grid".into()));
    }
    cells
        .iter()
        .map(|&c| {
            let row = run_cell(c, config)?;
            log::info!("bench n={} p={} K={}: {:.3e} s/eval, error {:.2e}", row.n, row.p, row.k, row.seconds, row.ll_error);
            Ok(row)
        })
        .collect()
}

/// Least-squares slope and R² of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

/// Write rows as CSV with a header.
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("n,p,k,seconds_per_eval,ll_error,pooled_ll\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.6e},{:.3e},{}\n", r.n, r.p, r.k, r.seconds, r.ll_error, r.pooled_ll));
    }
    out
}
