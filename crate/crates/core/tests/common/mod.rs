#![allow(dead_code)]

use nalgebra::DMatrix;
use partmle::oracle::split_pooled;
use partmle::partition::{Federation, FederationOptions, PartitionLayout};
use partmle::protocol::noise::NoiseLedger;
use partmle::sim::{random_params, sample_mvn};
use partmle::{DataPartition, ParameterSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub params: ParameterSet,
    pub x: DMatrix<f64>,
    /// Column sets in chain order (sorted by lowest column).
    pub chain: Vec<Vec<usize>>,
    pub layout: PartitionLayout,
}

impl Instance {
    pub fn pooled(&self) -> DataPartition {
        DataPartition::dense(self.x.clone()).unwrap()
    }

    pub fn data(&self) -> Vec<DataPartition> {
        split_pooled(&self.layout, &self.x).unwrap()
    }

    pub fn federation(&self, scale: f64, seed: u64) -> Federation {
        let noise = NoiseLedger::new(scale, seed).unwrap();
        Federation::new(self.layout.clone(), self.data(), FederationOptions::new(noise)).unwrap()
    }
}

/// Shuffle `0..p` into `k` non-empty column groups.
pub fn random_chain(rng: &mut impl Rng, p: usize, k: usize) -> Vec<Vec<usize>> {
    let mut cols: Vec<usize> = (0..p).collect();
    cols.shuffle(rng);
    let mut cuts: Vec<usize> = (1..p).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts[..k - 1].to_vec();
    cuts.sort_unstable();
    let mut groups = Vec::new();
    let mut start = 0;
    for c in cuts.into_iter().chain(std::iter::once(p)) {
        let mut g = cols[start..c].to_vec();
        g.sort_unstable();
        groups.push(g);
        start = c;
    }
    groups.sort_by_key(|g| g[0]);
    groups
}

pub fn vertical_instance(seed: u64, n: usize, p: usize, k: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_params(&mut rng, p);
    let x = sample_mvn(&mut rng, &params, n).unwrap();
    let chain = random_chain(&mut rng, p, k);
    let layout = PartitionLayout::vertical(n, &chain).unwrap();
    Instance { params, x, chain, layout }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}
