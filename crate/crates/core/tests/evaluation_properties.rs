use pkoopman::dictionary::{Dictionary, Observable};
use pkoopman::dynamics::{generate, SamplingSpec, System, Trajectory, TrajectoryDataset};
use pkoopman::evaluation::{evaluate_suite, relative_error, rollout, Predictor};
use pkoopman::koopman::{OperatorKind, OperatorModel};
use pkoopman::nn::Mat;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sequence(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn error_is_scale_covariant(seed in 0u64..100_000, n in 1usize..30, dim in 1usize..5, c in 1e-3f64..1e3, negative in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = sequence(&mut rng, n, dim);
        let pred = sequence(&mut rng, n, dim);
        let c = if negative { -c } else { c };
        let scale = |v: &[Vec<f64>]| v.iter().map(|r| r.iter().map(|x| c * x).collect()).collect::<Vec<Vec<f64>>>();
        let base = relative_error(&truth, &pred).unwrap();
        let scaled = relative_error(&scale(&truth), &scale(&pred)).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
        }
    }

    #[test]
    fn error_vanishes_exactly_on_a_matching_prefix(seed in 0u64..100_000, n in 2usize..20, dim in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = sequence(&mut rng, n, dim);
        let mut pred = truth.clone();
        let split = rng.gen_range(1..n);
        pred[split][0] += 0.5;
        let e = relative_error(&truth, &pred).unwrap();
        prop_assert!(e.iter().all(|v| *v >= 0.0));
        prop_assert!(e[..split].iter().all(|v| *v == 0.0));
        prop_assert!(e[split..].iter().all(|v| *v > 0.0));
    }
}

#[test]
fn stepwise_rollout_equals_the_operator_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n_psi in [4, 8, 17, 32] {
        let dict = Dictionary::trainable(2, Observable::Identity, n_psi, vec![8], n_psi as u64).unwrap();
        let mut model = OperatorModel::identity_of_kind(OperatorKind::Bilinear, n_psi, 2).unwrap();
        for v in model.theta.iter_mut() {
            *v += rng.gen_range(-0.5..0.5) / n_psi as f64;
        }
        let x0 = [0.3, -0.6];
        let params: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let refs: Vec<&[f64]> = params.iter().map(Vec::as_slice).collect();
        let stepwise = rollout(&dict, &model, &x0, &refs, false).unwrap();

        let psi0 = nalgebra::DVector::from_vec(dict.evaluate(&x0).unwrap());
        let mut product = Mat::identity(n_psi, n_psi);
        for (n, u) in params.iter().enumerate() {
            product = model.k_matrix(u).unwrap() * product;
            let lifted = &product * &psi0;
            let scale = lifted.amax().max(1.0);
            for (i, y) in stepwise[n].iter().enumerate() {
                assert!((y - lifted[i + 1]).abs() < 1e-10 * scale, "n_psi {n_psi}, step {n}");
            }
        }
    }
}

fn decay_dataset(rate: f64) -> TrajectoryDataset {
    let trajectories = [0.5, -1.0, 2.0]
        .iter()
        .map(|x0| Trajectory { states: (0..=10).map(|n| x0 * rate.powi(n)).collect(), params: vec![0.0; 10] })
        .collect();
    TrajectoryDataset { system: System::Vdpm { mu: 0.0 }, dt: 0.1, seed: 0, state_dim: 1, param_dim: 1, trajectories }
}

fn decay_predictor(rate: f64) -> Predictor {
    let k = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, rate]);
    Predictor::Single { dict: Dictionary::plain(1, Observable::Identity), model: OperatorModel::constant(&k).unwrap() }
}

#[test]
fn exact_model_beats_a_corrupted_copy_at_every_step() {
    let test = decay_dataset(0.9);
    let named = vec![("exact".to_string(), decay_predictor(0.9)), ("corrupted".to_string(), decay_predictor(0.85))];
    let rows = evaluate_suite(&named, &test, true).unwrap();
    assert!(rows[0].mean.iter().all(|e| *e < 1e-12));
    assert!(rows[0].mean.iter().zip(&rows[1].mean).all(|(a, b)| a < b));
}

#[test]
fn a_model_compared_with_itself_gives_identical_rows() {
    let sys = System::Vdpm { mu: 1.0 };
    let test = generate(&sys, &SamplingSpec::new(&sys, 5, 8, 0.01, 2)).unwrap();
    let dict = Dictionary::trainable(2, Observable::Identity, 5, vec![4], 1).unwrap();
    let model = OperatorModel::network(5, 1, vec![4], true, 2).unwrap();
    let p = Predictor::Single { dict, model };
    let rows = evaluate_suite(&[("a".into(), p.clone()), ("b".into(), p)], &test, true).unwrap();
    assert_eq!(rows[0].per_trajectory, rows[1].per_trajectory);
    assert_eq!(rows[0].mean, rows[1].mean);
    assert_eq!(rows[0].std, rows[1].std);
}
