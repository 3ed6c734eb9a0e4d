use nalgebra::DMatrix;
use partmle::error::Error;
use partmle::primitives::{default_rank, secure_matmul, secure_sum};
use partmle::sim::standard_normal_matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn secure_product_matches_direct(seed in any::<u64>(), n in 8usize..60, p1 in 1usize..5, p2 in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = standard_normal_matrix(&mut rng, n, p1);
        let x2 = standard_normal_matrix(&mut rng, n, p2);
        let out = secure_matmul(&x1, &x2, None, &mut rng).unwrap();
        let direct = x1.transpose() * &x2;
        prop_assert!((&out.product - &direct).amax() < 1e-10 * (1.0 + direct.amax()));
        let z = &out.basis.z;
        prop_assert_eq!(z.ncols(), default_rank(n, p1));
        prop_assert!((x1.transpose() * z).amax() < 1e-10);
        prop_assert!((z.transpose() * z - DMatrix::identity(z.ncols(), z.ncols())).amax() < 1e-10);
    }

    #[test]
    fn secure_sum_is_exact(seed in any::<u64>(), values in prop::collection::vec(-1e6f64..1e6, 2..12)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = secure_sum(&values, 1e12, &mut rng).unwrap();
        let direct: f64 = values.iter().sum();
        prop_assert!((out.total - direct).abs() < 1e-6);
        prop_assert!(out.mask.abs() >= 0.5e12);
        // every transmitted value is dominated by the mask
        for t in out.transmitted_values() {
            prop_assert!(t.abs() > 0.4e12);
        }
    }
}

#[test]
fn rank_outside_the_complement_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x1 = standard_normal_matrix(&mut rng, 10, 3);
    let x2 = standard_normal_matrix(&mut rng, 10, 2);
    assert!(matches!(secure_matmul(&x1, &x2, Some(8), &mut rng), Err(Error::Rank(_))));
    assert!(matches!(secure_matmul(&x1, &x2, Some(0), &mut rng), Err(Error::Rank(_))));
    assert!(secure_matmul(&x1, &x2, Some(7), &mut rng).is_ok());
}

#[test]
fn single_value_is_not_a_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(secure_sum(&[1.0], 1e12, &mut rng).is_err());
}
