mod common;

use common::{random_chain, rel_err, vertical_instance};
use nalgebra::DMatrix;
use partmle::mvn::select_columns;
use partmle::oracle::{chain_blocks, nonsecure_pass, pooled_ll, split_pooled};
use partmle::partition::{run_complex, Federation, FederationOptions, NodeCell, PartitionLayout};
use partmle::protocol::noise::NoiseLedger;
use partmle::protocol::{CentralNode, DataNode, Payload};
use partmle::sim::{random_params, sample_mvn};
use partmle::transport::{InProcessBus, VerticalTransport};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent log-density: explicit inverse and LU determinant, row by row.
fn naive_ll(mean: &nalgebra::DVector<f64>, cov: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    let inv = cov.clone().try_inverse().unwrap();
    let det = cov.clone().lu().determinant();
    let p = cov.nrows() as f64;
    let mut total = 0.0;
    for i in 0..x.nrows() {
        let d = x.row(i).transpose() - mean;
        total += -0.5 * (p * (2.0 * std::f64::consts::PI).ln() + det.ln() + (d.transpose() * &inv * &d)[(0, 0)]);
    }
    total
}

fn bus(x: &DMatrix<f64>, chain: &[Vec<usize>], ledger: NoiseLedger) -> InProcessBus {
    let k = chain.len() as u32;
    let central = CentralNode::new(x.nrows(), x.ncols(), chain.to_vec(), ledger, 0).unwrap();
    let nodes = chain.iter().enumerate().map(|(i, c)| DataNode::new(i as u32 + 1, k, select_columns(x, c), ledger, 0).unwrap()).collect();
    InProcessBus::new(central, nodes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn secure_total_equals_pooled(seed in any::<u64>(), k in 2usize..=5, extra in 0usize..=7, n in 20usize..=120) {
        let p = k + extra;
        let inst = vertical_instance(seed, n, p, k);
        let expected = naive_ll(&inst.params.mean, &inst.params.cov, &inst.x);
        let mut fed = inst.federation(100.0, seed ^ 1);
        let got = fed.evaluate(&inst.params).unwrap();
        prop_assert!(rel_err(got, expected) < 1e-9, "{} vs {}", got, expected);
        let trace = nonsecure_pass(&inst.params, &inst.chain, &chain_blocks(&inst.x, &inst.chain)).unwrap();
        prop_assert!(rel_err(trace.total, expected) < 1e-10);
    }

    #[test]
    fn masks_do_not_change_the_total(seed in any::<u64>(), k in 2usize..=4, s1 in any::<u64>(), s2 in any::<u64>()) {
        prop_assume!(s1 != s2);
        let inst = vertical_instance(seed, 40, 2 * k, k);
        let a = run_complex(&mut inst.federation(100.0, s1), &inst.params).unwrap();
        let b = run_complex(&mut inst.federation(100.0, s2), &inst.params).unwrap();
        prop_assert!(rel_err(a.ll, b.ll) < 1e-9);
        prop_assert!(!a.transcripts[0].same_messages(&b.transcripts[0]));
    }

    #[test]
    fn chain_order_does_not_matter(seed in any::<u64>(), k in 2usize..=5) {
        let inst = vertical_instance(seed, 50, k + 3, k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chain = inst.chain.clone();
        chain.shuffle(&mut rng);
        for c in &mut chain {
            c.shuffle(&mut rng);
        }
        let ledger = NoiseLedger::new(100.0, seed).unwrap();
        let base = bus(&inst.x, &inst.chain, ledger).run_evaluation(0, &inst.params).unwrap().ll;
        let permuted = bus(&inst.x, &chain, ledger).run_evaluation(0, &inst.params).unwrap().ll;
        prop_assert!(rel_err(base, permuted) < 1e-9);
    }

    #[test]
    fn random_tilings_sum_to_pooled(seed in any::<u64>(), bands in 1usize..=4, p in 2usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 24 * bands;
        let params = random_params(&mut rng, p);
        let x = sample_mvn(&mut rng, &params, n).unwrap();
        let mut nodes = Vec::new();
        for b in 0..bands {
            let rows: Vec<usize> = (b * 24..(b + 1) * 24).collect();
            let k = rng.random_range(1..=p.min(3));
            for (j, cols) in random_chain(&mut rng, p, k).into_iter().enumerate() {
                nodes.push(NodeCell { name: format!("b{b}n{j}"), rows: rows.clone(), cols });
            }
        }
        let names = partmle::mvn::default_names(p);
        let layout = PartitionLayout::new(n, p, names, nodes).unwrap();
        let data = split_pooled(&layout, &x).unwrap();
        let mut fed = Federation::new(layout, data, FederationOptions::new(NoiseLedger::new(100.0, seed).unwrap())).unwrap();
        let got = fed.evaluate(&params).unwrap();
        let expected = pooled_ll(&params, &partmle::DataPartition::dense(x).unwrap()).unwrap();
        prop_assert!(rel_err(got, expected) < 1e-9, "{} vs {}", got, expected);
    }
}

#[test]
fn zero_noise_exposes_the_true_running_totals() {
    let inst = vertical_instance(3, 30, 6, 3);
    let out = run_complex(&mut inst.federation(0.0, 1), &inst.params).unwrap();
    let trace = nonsecure_pass(&inst.params, &inst.chain, &chain_blocks(&inst.x, &inst.chain)).unwrap();
    let mut seen = 0;
    for m in out.transcripts[0].messages() {
        if let (Payload::ChainForward { ll_tilde, .. }, partmle::protocol::NodeId::Data(k)) = (&m.payload, m.sender) {
            assert!(rel_err(*ll_tilde, trace.running[k as usize - 1]) < 1e-12);
            seen += 1;
        }
        if let Payload::MarginalParams { mu_tilde, .. } = &m.payload {
            assert_eq!(mu_tilde, &trace.cond_means[0]);
        }
    }
    assert_eq!(seen, 2);
    assert!(rel_err(out.ll, trace.total) < 1e-12);
}

#[test]
fn accuracy_degrades_with_the_square_of_the_mask_scale() {
    // masked totals carry terms of size S² · n · p, so f64 rounding grows like ε S²
    let inst = vertical_instance(8, 60, 6, 3);
    let expected = naive_ll(&inst.params.mean, &inst.params.cov, &inst.x);
    for (scale, tol) in [(1e2, 1e-10), (1e4, 1e-6)] {
        let got = inst.federation(scale, 2).evaluate(&inst.params).unwrap();
        assert!(rel_err(got, expected) < tol, "S={scale}: {got} vs {expected}");
    }
}

#[test]
fn wave_shaped_layout_has_two_bands() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params = random_params(&mut rng, 4);
    let x = sample_mvn(&mut rng, &params, 244).unwrap();
    let nodes = vec![
        NodeCell { name: "site_a".into(), rows: (0..158).collect(), cols: vec![0] },
        NodeCell { name: "site_b".into(), rows: (158..244).collect(), cols: vec![0] },
        NodeCell { name: "site_c".into(), rows: (0..244).collect(), cols: vec![1, 2, 3] },
    ];
    let layout = PartitionLayout::new(244, 4, partmle::mvn::default_names(4), nodes).unwrap();
    let data = split_pooled(&layout, &x).unwrap();
    let mut fed = Federation::new(layout, data, FederationOptions::new(NoiseLedger::new(100.0, 5).unwrap())).unwrap();
    assert_eq!(fed.plan().bands.len(), 2);
    let out = run_complex(&mut fed, &params).unwrap();
    let expected = naive_ll(&params.mean, &params.cov, &x);
    assert!(rel_err(out.ll, expected) < 1e-9);
    assert_eq!(out.transcripts.len(), 2);
}
