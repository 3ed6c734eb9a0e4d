use nalgebra::{DMatrix, DVector};
use partmle::mvn::{condition, log_likelihood, mean_rows, ConditionalBlocks};
use partmle::oracle::closed_form_mle;
use partmle::sim::{random_params, sample_mvn};
use partmle::DataPartition;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Density product evaluated one row at a time with an explicit inverse.
fn naive_ll(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    let inv = cov.clone().try_inverse().unwrap();
    let det = cov.clone().lu().determinant();
    let k = cov.nrows() as i32;
    (0..x.nrows())
        .map(|i| {
            let d = x.row(i).transpose() - mean;
            let q = (d.transpose() * &inv * &d)[(0, 0)];
            ((-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powi(k) * det).sqrt()).ln()
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_likelihood_matches_density_product(seed in any::<u64>(), p in 1usize..6, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_params(&mut rng, p);
        let x = sample_mvn(&mut rng, &params, n).unwrap();
        let got = log_likelihood(&params, &DataPartition::dense(x.clone()).unwrap()).unwrap();
        let want = naive_ll(&params.mean, &params.cov, &x);
        prop_assert!((got - want).abs() < 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn closed_form_matches_sample_moments(seed in any::<u64>(), p in 1usize..5, n in 6usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_params(&mut rng, p);
        let x = sample_mvn(&mut rng, &params, n).unwrap();
        let mle = closed_form_mle(&DataPartition::dense(x.clone()).unwrap()).unwrap();
        for a in 0..p {
            let ma: f64 = (0..n).map(|i| x[(i, a)]).sum::<f64>() / n as f64;
            prop_assert!((mle.mean[a] - ma).abs() < 1e-12 * (1.0 + ma.abs()));
            for b in 0..p {
                let mb: f64 = (0..n).map(|i| x[(i, b)]).sum::<f64>() / n as f64;
                let c: f64 = (0..n).map(|i| (x[(i, a)] - ma) * (x[(i, b)] - mb)).sum::<f64>() / n as f64;
                prop_assert!((mle.cov[(a, b)] - c).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conditioning_matches_explicit_inverse(seed in any::<u64>(), pk in 1usize..4, tail in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = pk + tail;
        let params = random_params(&mut rng, p);
        let x = sample_mvn(&mut rng, &params, 5).unwrap();
        let blocks = ConditionalBlocks::from_cov(&params.cov, pk).unwrap();
        let own_mean = mean_rows(&params.mean.rows(0, pk).into_owned(), 5);
        let tail_mean = mean_rows(&params.mean.rows(pk, tail).into_owned(), 5);
        let out = condition(&blocks, &x.columns(0, pk).into_owned(), &own_mean, &tail_mean).unwrap();

        let s11 = params.cov.view((0, 0), (pk, pk)).into_owned();
        let s12 = params.cov.view((0, pk), (pk, tail)).into_owned();
        let s22 = params.cov.view((pk, pk), (tail, tail)).into_owned();
        let inv = s11.try_inverse().unwrap();
        let want_cov = &s22 - s12.transpose() * &inv * &s12;
        prop_assert!((&out.cov - &want_cov).amax() < 1e-10);
        let want_mean = &tail_mean + (x.columns(0, pk) - &own_mean) * &inv * &s12;
        prop_assert!((&out.mean - &want_mean).amax() < 1e-10);
    }
}
