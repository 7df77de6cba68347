use pkoopman::dynamics::{
    generate, kdv_profile, mass, momentum, ForcingMode, Integrator, ParameterLaw, SamplingSpec, Simulator, System,
};
use proptest::prelude::*;

const HARMONIC: [f64; 3] = [0.0, 0.0, 1.0];

#[test]
fn rk4_harmonic_oscillator_matches_cosine() {
    let sim = Simulator::new(System::Duffing).unwrap();
    let mut x = vec![1.0, 0.0];
    let mut hint = None;
    for _ in 0..100 {
        x = sim.advance(&x, &HARMONIC, 0.01, Integrator::Rk4 { substeps: 1 }, &mut hint).unwrap();
    }
    assert!((x[0] - 1f64.cos()).abs() < 1e-8, "{}", x[0]);
    assert!((x[1] + 1f64.sin()).abs() < 1e-8, "{}", x[1]);
}

#[test]
fn rk4_error_falls_sixteenfold_when_dt_halves() {
    let sim = Simulator::new(System::Duffing).unwrap();
    let params = [0.3, 1.0, -1.0];
    let x0 = vec![1.2, -0.4];
    let mut hint = None;
    let mut run = |dt: f64, substeps: usize| {
        let mut x = x0.clone();
        for _ in 0..(1.0 / dt).round() as usize {
            x = sim.advance(&x, &params, dt, Integrator::Rk4 { substeps }, &mut hint).unwrap();
        }
        x
    };
    let reference = run(0.2, 100);
    let error = |x: Vec<f64>| x.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let ratio = error(run(0.2, 1)) / error(run(0.1, 1));
    assert!((13.0..19.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn rk23_unforced_kdv_conserves_mass_over_a_macro_step() {
    let system = System::Kdv { nx: 128, forcing: ForcingMode::Sin };
    let sim = Simulator::new(system.clone()).unwrap();
    let x = kdv_profile(&system, [0.2, 0.5, 0.3]);
    let mut hint = None;
    let next = sim.advance(&x, &[0.0; 3], 0.01, Integrator::Rk23 { tol: 1e-8 }, &mut hint).unwrap();
    assert!((mass(&next) - mass(&x)).abs() < 1e-10);
}

#[test]
fn quadrature_of_trig_modes() {
    let system = System::Kdv { nx: 128, forcing: ForcingMode::Sin };
    let eta: Vec<f64> = system.grid().iter().map(|x| x.sin()).collect();
    assert!(mass(&eta).abs() < 1e-12);
    assert!((momentum(&eta) - std::f64::consts::PI).abs() < 1e-12);
    let flat = vec![0.2; 128];
    assert!((mass(&flat) - 0.4 * std::f64::consts::PI).abs() < 1e-12);
}

#[test]
fn fhn_constant_state_stays_constant_without_forcing() {
    let system = System::Fhn { nx: 10, control_dim: 1 };
    let sim = Simulator::new(system).unwrap();
    let mut x: Vec<f64> = [vec![0.7; 10], vec![-0.2; 10]].concat();
    let mut hint = None;
    for _ in 0..20 {
        x = sim.step(&x, &[0.0], 0.001, &mut hint).unwrap();
        assert!(x[..10].iter().all(|v| *v == x[0]));
        assert!(x[10..].iter().all(|v| *v == x[10]));
    }
    // the reaction term still acts
    assert_ne!(x[0], 0.7);
}

#[test]
fn duffing_dataset_size() {
    let sys = System::Duffing;
    let ds = generate(&sys, &SamplingSpec::new(&sys, 10, 50, 0.25, 3)).unwrap();
    assert_eq!(ds.n_transitions(), 500);
}

#[test]
fn kdv_dataset_dimensions() {
    let sys = System::Kdv { nx: 128, forcing: ForcingMode::Sin };
    let ds = generate(&sys, &SamplingSpec::new(&sys, 2, 3, 0.01, 3)).unwrap();
    assert_eq!(ds.state_dim, 128);
    assert_eq!(ds.param_dim, 3);
    assert_eq!(ds.n_transitions(), 6);
}

fn small_system() -> impl Strategy<Value = System> {
    prop_oneof![
        Just(System::Duffing),
        Just(System::Vdpm { mu: 1.0 }),
        Just(System::Fhn { nx: 4, control_dim: 1 }),
        Just(System::Kdv { nx: 16, forcing: ForcingMode::Linear }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn states_outnumber_parameters_by_one(system in small_system(), m in 1usize..5, n in 1usize..6, seed in 0u64..1000) {
        let dt = if matches!(system, System::Duffing) { 0.25 } else { 0.01 };
        let ds = generate(&system, &SamplingSpec::new(&system, m, n, dt, seed)).unwrap();
        prop_assert_eq!(ds.len(), m);
        for t in &ds.trajectories {
            prop_assert_eq!(t.states.len() / ds.state_dim, t.params.len() / ds.param_dim + 1);
            prop_assert_eq!(t.params.len(), n * ds.param_dim);
            prop_assert!(t.states.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn split_is_a_function_of_seed_and_fraction(seed in 0u64..1000, fraction in 0.0f64..0.9) {
        let sys = System::Duffing;
        let spec = SamplingSpec { parameter_law: ParameterLaw::Static { group_size: 2 }, ..SamplingSpec::new(&sys, 8, 3, 0.25, seed) };
        let (a_train, a_val) = generate(&sys, &spec).unwrap().split_validation(fraction).unwrap();
        let (b_train, b_val) = generate(&sys, &spec).unwrap().split_validation(fraction).unwrap();
        prop_assert_eq!(a_train, b_train);
        prop_assert_eq!(&a_val, &b_val);
        prop_assert!(!a_val.trajectories.is_empty() || fraction == 0.0);
    }
}
