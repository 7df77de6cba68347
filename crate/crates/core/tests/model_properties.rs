use pkoopman::dictionary::{Dictionary, Observable};
use pkoopman::koopman::{monomials, n_monomials, OperatorKind, OperatorModel};
use pkoopman::nn::{gradient, Mat};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn prefix_is_exact_for_any_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut dict = Dictionary::trainable(3, Observable::Identity, 9, vec![12, 12], 5).unwrap();
    for round in 0..10 {
        let p: Vec<f64> = (0..dict.params().len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        dict.set_params(&p).unwrap();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-50.0..50.0) * (round + 1) as f64).collect();
            let psi = dict.evaluate(&x).unwrap();
            assert_eq!(psi[0], 1.0);
            assert_eq!(&psi[1..4], x.as_slice());
        }
    }
}

#[test]
fn prefix_carries_no_gradient() {
    let dict = Dictionary::trainable(2, Observable::Identity, 7, vec![8], 1).unwrap();
    let x = Mat::from_row_slice(4, 2, &[0.1, 0.2, -1.0, 0.5, 2.0, -0.3, 0.0, 0.0]);
    let (_, grads) = gradient(&[dict.params()], |g, leaves| {
        let psi = dict.lift_graph(g, Some(leaves[0]), &x)?;
        let prefix = g.slice_cols(psi, 0, 3)?;
        Ok(g.sum_squares(prefix))
    })
    .unwrap();
    assert!(grads[0].iter().all(|v| *v == 0.0));
    let (_, grads) = gradient(&[dict.params()], |g, leaves| {
        let psi = dict.lift_graph(g, Some(leaves[0]), &x)?;
        let tail = g.slice_cols(psi, 3, 7)?;
        Ok(g.sum_squares(tail))
    })
    .unwrap();
    assert!(grads[0].iter().any(|v| *v != 0.0));
}

#[test]
fn fixed_first_row_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = OperatorModel::network(6, 3, vec![16, 16], true, 9).unwrap();
    for v in model.theta.iter_mut() {
        *v *= 4.0;
    }
    for _ in 0..1000 {
        let u: Vec<f64> = (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let k = model.k_matrix(&u).unwrap();
        assert_eq!(k[(0, 0)], 1.0);
        assert!((1..6).all(|j| k[(0, j)] == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn poly_operator_is_linear_in_monomials(u in proptest::collection::vec(-2.0f64..2.0, 2), seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4;
        let count = n_monomials(2, 3);
        let ks: Vec<Mat> = (0..count).map(|_| Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let model = OperatorModel::poly(2, 3, &ks).unwrap();
        let features = monomials(&u, 3);
        prop_assert_eq!(features.len(), count);
        let mut expected = Mat::zeros(n, n);
        for (h, k) in features.iter().zip(&ks) {
            expected += k * *h;
        }
        let got = model.k_matrix(&u).unwrap();
        prop_assert!((got - expected).abs().max() < 1e-12);
    }

    #[test]
    fn bilinear_at_zero_is_the_drift(seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Mat::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
        let bs: Vec<Mat> = (0..2).map(|_| Mat::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let model = OperatorModel::bilinear(&a, &bs).unwrap();
        prop_assert_eq!(model.k_matrix(&[0.0, 0.0]).unwrap(), a);
    }

    #[test]
    fn generator_recovers_dyadic_rates(entries in proptest::collection::vec(-64i32..64, 16), shift in 1u32..10) {
        let dt = 0.5f64.powi(shift as i32);
        let l = Mat::from_fn(4, 4, |i, j| entries[i * 4 + j] as f64 / 8.0);
        let k = Mat::identity(4, 4) + &l * dt;
        let model = OperatorModel::constant(&k).unwrap();
        prop_assert_eq!(model.generator(&[], dt).unwrap().matrix, l);
    }
}

#[test]
fn affine_and_network_kinds_differ_in_generator_support() {
    let a = Mat::identity(3, 3);
    let b = Mat::from_element(3, 1, 0.5);
    let affine = OperatorModel::affine_control(&a, &b).unwrap();
    assert!(affine.generator(&[0.2], 0.1).is_err());
    let net = OperatorModel::network(3, 1, vec![4], false, 0).unwrap();
    assert!(matches!(net.kind, OperatorKind::Network { fixed_first_row: false, .. }));
    assert_eq!(net.generator(&[0.2], 0.1).unwrap().matrix.shape(), (3, 3));
}
