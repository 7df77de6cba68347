//! Optimal control on learned lifted dynamics: finite-horizon costs, receding
//! horizon tracking against a true plant, and the controllability rank test.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{Dictionary, ObservableSelector};
use crate::dynamics::{mass, ForcingMode, Simulator, System};
use crate::error::{Error, Result};
use crate::koopman::OperatorModel;
use crate::linalg::{numerical_rank, singular_values};
use crate::nn::{minimize_box, BoxBounds, Graph, Mat, MinimizeOptions, Var};

/// Finite-horizon cost on observables `y_n = B psi_n` of a lifted trajectory
/// started from `psi0`:
/// `sum_n (||y_n - r_n||^2 + lambda ||u_{n-1}||^2) + terminal ||y_N - target||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct BolzaProblem {
    pub psi0: Vec<f64>,
    pub selector: ObservableSelector,
    /// Running references `r_1..r_N`; `None` drops the tracking term.
    pub references: Option<Vec<Vec<f64>>>,
    pub lambda: f64,
    pub terminal: Option<(Vec<f64>, f64)>,
    pub horizon: usize,
    pub bounds: BoxBounds,
}

/// Value and gradient of a [`BolzaProblem`] cost at the flattened controls
/// `u = (u_0, ..., u_{N-1})`. Lifted states are propagated with
/// [`OperatorModel::step_graph`] (no resubstitution).
pub fn lifted_bolza_cost(model: &OperatorModel, problem: &BolzaProblem, u: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n_u = model.n_u;
    let horizon = problem.horizon;
    if u.len() != horizon * n_u {
        return Err(Error::Dimension(format!("controls of length {}, expected {}", u.len(), horizon * n_u)));
    }
    if problem.psi0.len() != model.n_psi {
        return Err(Error::Dimension("initial lift does not match the model".into()));
    }
    if let Some(r) = &problem.references {
        if r.len() != horizon {
            return Err(Error::Dimension(format!("{} references for horizon {horizon}", r.len())));
        }
    }
    let mut g = Graph::new();
    let theta = g.row(&model.theta);
    let u_all = g.row(u);
    let sel = g.leaf(problem.selector.matrix.clone());
    let mut psi = g.row(&problem.psi0);
    let mut terms: Vec<Var> = Vec::new();
    for n in 0..horizon {
        let un = g.slice_cols(u_all, n * n_u, (n + 1) * n_u)?;
        psi = model.step_graph(&mut g, theta, psi, un)?;
        let y = g.matmul_nt(psi, sel)?;
        if let Some(refs) = &problem.references {
            let r = g.row(&refs[n]);
            let e = g.sub(y, r)?;
            terms.push(g.sum_squares(e));
        }
        if problem.lambda > 0.0 {
            let s = g.sum_squares(un);
            terms.push(g.scale(s, problem.lambda));
        }
        if n + 1 == horizon {
            if let Some((target, w)) = &problem.terminal {
                let t = g.row(target);
                let e = g.sub(y, t)?;
                let s = g.sum_squares(e);
                terms.push(g.scale(s, *w));
            }
        }
    }
    let total = match terms.split_first() {
        None => {
            let z = g.row(&[0.0]);
            g.sum(z)
        }
        Some((first, rest)) => {
            let mut acc = *first;
            for t in rest {
                acc = g.add(acc, *t)?;
            }
            acc
        }
    };
    let value = g.scalar(total);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("lifted cost over horizon {horizon}")));
    }
    let grad = if terms.is_empty() {
        vec![0.0; u.len()]
    } else {
        g.gradients(total, &[u_all])?.remove(0).iter().copied().collect()
    };
    Ok((value, grad))
}

/// Reference tracking on a learned model driving a true plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingProblem {
    /// `r_0..r_{N_T}`, each of length `rows.len()`.
    pub references: Vec<Vec<f64>>,
    pub lambda: f64,
    pub horizon: usize,
    /// Rows of the observable selector that are tracked.
    pub rows: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub x0: Vec<f64>,
    pub n_steps: usize,
    pub dt: f64,
}

impl TrackingProblem {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.horizon > self.n_steps {
            return Err(Error::Invalid(format!("horizon {} must be in 1..={}", self.horizon, self.n_steps)));
        }
        if self.references.len() < self.n_steps + 1 {
            return Err(Error::Invalid(format!(
                "{} references for {} steps",
                self.references.len(),
                self.n_steps
            )));
        }
        if self.references.iter().any(|r| r.len() != self.rows.len() || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Invalid("references must be finite and match the tracked rows".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Invalid("lambda must be >= 0".into()));
        }
        BoxBounds::new(self.lower.clone(), self.upper.clone()).map(|_| ())
    }

    pub fn bounds(&self, horizon: usize) -> Result<BoxBounds> {
        let lower = (0..horizon).flat_map(|_| self.lower.iter().copied()).collect();
        let upper = (0..horizon).flat_map(|_| self.upper.iter().copied()).collect();
        BoxBounds::new(lower, upper)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub control: Vec<f64>,
    /// Whole optimized window, `horizon * N_u` entries.
    pub window: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seconds: f64,
}

/// Optimizes controls over one window `r_{n+1}..r_{n+tau}` from the plant
/// state `x`, starting at `warm_start` (zeros when absent), and returns the
/// first control.
#[allow(clippy::too_many_arguments)]
pub fn mpc_step(
    dict: &Dictionary,
    model: &OperatorModel,
    x: &[f64],
    window: &[Vec<f64>],
    rows: &[usize],
    lambda: f64,
    bounds: &BoxBounds,
    warm_start: Option<&[f64]>,
    opts: MinimizeOptions,
) -> Result<MpcSolution> {
    let started = Instant::now();
    let horizon = window.len();
    let n_u = model.n_u;
    if bounds.len() != horizon * n_u {
        return Err(Error::Dimension("bounds do not cover the window".into()));
    }
    let problem = BolzaProblem {
        psi0: dict.evaluate(x)?,
        selector: dict.selector()?.rows(rows)?,
        references: Some(window.to_vec()),
        lambda,
        terminal: None,
        horizon,
        bounds: bounds.clone(),
    };
    let x0 = warm_start.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; horizon * n_u]);
    let min = minimize_box(|u| lifted_bolza_cost(model, &problem, u), &x0, bounds, opts)?;
    Ok(MpcSolution {
        control: min.x[..n_u].to_vec(),
        window: min.x.clone(),
        cost: min.f,
        iterations: min.iterations,
        converged: min.converged,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Cost improvement, relative to `1 + warm cost`, that a cold start needs
/// before it replaces the warm-started window in [`closed_loop`].
pub const COLD_START_MARGIN: f64 = 1e-6;

/// The true system driven in closed loop.
pub trait Plant {
    fn advance(&mut self, x: &[f64], u: &[f64]) -> Result<Vec<f64>>;
}

/// A simulator advanced with its default integrator.
pub struct SimulatorPlant {
    pub sim: Simulator,
    pub dt: f64,
    hint: Option<f64>,
}

impl SimulatorPlant {
    pub fn new(system: System, dt: f64) -> Result<Self> {
        Ok(Self { sim: Simulator::new(system)?, dt, hint: None })
    }
}

impl Plant for SimulatorPlant {
    fn advance(&mut self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.sim.step(x, u, self.dt, &mut self.hint)
    }
}

/// The lifted model itself, for full-state dictionaries: `x' = B K(u) Psi(x)`.
pub struct ModelPlant {
    pub dict: Dictionary,
    pub model: OperatorModel,
}

impl Plant for ModelPlant {
    fn advance(&mut self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let psi = self.model.apply(u, &self.dict.evaluate(x)?)?;
        Ok(self.dict.selector()?.apply(&psi))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControlResult {
    pub controls: Vec<Vec<f64>>,
    /// Plant states `x_0..x_n`.
    pub states: Vec<Vec<f64>>,
    /// Tracked observables of the plant states.
    pub tracked: Vec<Vec<f64>>,
    pub references: Vec<Vec<f64>>,
    pub seconds: Vec<f64>,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub dt: f64,
}

fn tracked_of(dict: &Dictionary, rows: &[usize], x: &[f64]) -> Vec<f64> {
    let g = dict.observable.eval(x);
    rows.iter().map(|&r| g[r]).collect()
}

/// Receding-horizon loop: at every step solve [`mpc_step`] from the current
/// plant state, apply the first control to `plant`, and shift the window
/// solution as the next warm start. A cold-started solve runs alongside and
/// replaces the warm one when clearly cheaper (see [`COLD_START_MARGIN`]). The horizon shrinks at the end of the reference.
pub fn closed_loop(problem: &TrackingProblem, dict: &Dictionary, model: &OperatorModel, plant: &mut dyn Plant) -> Result<ControlResult> {
    closed_loop_with(problem, dict, model, plant, MinimizeOptions::default())
}

pub fn closed_loop_with(
    problem: &TrackingProblem,
    dict: &Dictionary,
    model: &OperatorModel,
    plant: &mut dyn Plant,
    opts: MinimizeOptions,
) -> Result<ControlResult> {
    problem.validate()?;
    let n_u = model.n_u;
    if problem.lower.len() != n_u {
        return Err(Error::Dimension(format!("control box of dim {}, model takes {n_u}", problem.lower.len())));
    }
    let mut result = ControlResult { dt: problem.dt, ..ControlResult::default() };
    let mut x = problem.x0.clone();
    result.states.push(x.clone());
    result.tracked.push(tracked_of(dict, &problem.rows, &x));
    result.references.push(problem.references[0].clone());
    let mut warm: Option<Vec<f64>> = None;
    for n in 0..problem.n_steps {
        let horizon = problem.horizon.min(problem.n_steps - n);
        let window = &problem.references[n + 1..n + 1 + horizon];
        let bounds = problem.bounds(horizon)?;
        let start = warm.as_ref().map(|w| {
            let mut s = w[n_u.min(w.len())..].to_vec();
            let tail = w[w.len() - n_u..].to_vec();
            s.extend(tail);
            s.truncate(horizon * n_u);
            s
        });
        let mut sol = mpc_step(dict, model, &x, window, &problem.rows, problem.lambda, &bounds, start.as_deref(), opts)?;
        if start.is_some() {
            // a shifted window can sit in a local minimum the cold start avoids,
            // e.g. at a control where the forcing vanishes; keep the cheaper one
            let cold = mpc_step(dict, model, &x, window, &problem.rows, problem.lambda, &bounds, None, opts)?;
            if sol.cost - cold.cost > COLD_START_MARGIN * (1.0 + sol.cost) {
                sol = MpcSolution { iterations: sol.iterations + cold.iterations, seconds: sol.seconds + cold.seconds, ..cold };
            } else {
                sol.seconds += cold.seconds;
            }
        }
        let next = plant.advance(&x, &sol.control);
        result.controls.push(sol.control.clone());
        result.seconds.push(sol.seconds);
        result.iterations.push(sol.iterations);
        result.converged.push(sol.converged);
        match next {
            Ok(xn) if xn.iter().all(|v| v.is_finite()) => x = xn,
            _ => return Err(Error::PlantBlowUp { step: n, partial: Box::new(result) }),
        }
        result.states.push(x.clone());
        result.tracked.push(tracked_of(dict, &problem.rows, &x));
        result.references.push(problem.references[n + 1].clone());
        warm = Some(sol.window);
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllabilityReport {
    pub n_samples: usize,
    /// Columns are `vec(K~(u_i))` (row-major), `d^2 x N`.
    pub matrix: Mat,
    pub singular_values: Vec<f64>,
    pub threshold: f64,
    pub rank: usize,
    pub required_rank: usize,
    pub controllable: bool,
}

/// Samples `n_samples` parameters uniformly from the box and tests the rank
/// of the stacked projected generators.
pub fn controllability(
    model: &OperatorModel,
    dt: f64,
    lower: &[f64],
    upper: &[f64],
    n_samples: usize,
    seed: u64,
    threshold: f64,
) -> Result<ControllabilityReport> {
    if n_samples == 0 {
        return Err(Error::Invalid("controllability needs at least one sample".into()));
    }
    BoxBounds::new(lower.to_vec(), upper.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Vec<f64>> = (0..n_samples)
        .map(|_| lower.iter().zip(upper).map(|(l, u)| if u > l { rng.gen_range(*l..*u) } else { *l }).collect())
        .collect();
    let d = model.n_psi;
    let columns: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|u| model.generator(u, dt).map(|g| g.matrix.transpose().as_slice().to_vec()))
        .collect::<Result<_>>()?;
    let matrix = Mat::from_fn(d * d, n_samples, |r, c| columns[c][r]);
    let singular_values = singular_values(&matrix);
    let rank = numerical_rank(&singular_values, threshold);
    let required_rank = if model.has_fixed_first_row() { d * (d - 1) } else { d * d };
    Ok(ControllabilityReport {
        n_samples,
        matrix,
        singular_values,
        threshold,
        rank,
        required_rank,
        controllable: rank >= required_rank,
    })
}

/// Mass added per unit time by the KdV forcing at amplitude `a` on every
/// component: `a * dx * sum_i sum_j v_i(x_j)`.
pub fn kdv_mass_rate(system: &System, amplitude: f64) -> Result<f64> {
    let sim = Simulator::new(system.clone())?;
    let dx = system.dx().unwrap_or(0.0);
    Ok(amplitude * dx * sim.profiles().iter().flat_map(|p| p.iter()).sum::<f64>())
}

/// Oracle controls for KdV mass tracking without control penalty: since the
/// mass changes at a rate proportional to the summed forcing amplitudes,
/// every jump of the piecewise-constant reference is met by saturating all
/// components (`u = 1/2` for sine forcing, `u = 1` for linear forcing, with
/// the sign of the jump) for as many steps as the jump needs, starting at the
/// step where the reference changes; controls are zero otherwise.
pub fn kdv_analytic_mass_control(problem: &TrackingProblem, system: &System) -> Result<Vec<Vec<f64>>> {
    let System::Kdv { forcing, .. } = system else {
        return Err(Error::Invalid("analytic mass control applies to KdV only".into()));
    };
    if problem.lambda != 0.0 || problem.rows != [0] {
        return Err(Error::Invalid("analytic mass control needs lambda = 0 and the mass row only".into()));
    }
    problem.validate()?;
    let u_max = match forcing {
        ForcingMode::Sin => 0.5,
        ForcingMode::Linear => 1.0,
    };
    let rate = kdv_mass_rate(system, 1.0)? * problem.dt;
    let mut controls = vec![vec![0.0; 3]; problem.n_steps];
    let mut level = mass(&problem.x0);
    let mut n = 0;
    while n < problem.n_steps {
        let target = problem.references[n + 1][0];
        let jump = target - level;
        if jump.abs() > 1e-9 {
            let steps = (jump.abs() / rate - 1e-9).ceil() as usize;
            for c in controls.iter_mut().skip(n).take(steps) {
                c.fill(u_max * jump.signum());
            }
            level = target;
            n += steps.max(1);
            continue;
        }
        n += 1;
    }
    Ok(controls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::Observable;
    use crate::koopman::OperatorKind;

    fn toy_model(dt: f64) -> OperatorModel {
        // K(u) = [[1, 0], [u dt, 1]] as a bilinear model on the lift (1, y)
        let a = Mat::identity(2, 2);
        let mut b = Mat::zeros(2, 2);
        b[(1, 0)] = dt;
        OperatorModel::bilinear(&a, &[b]).unwrap()
    }

    #[test]
    fn zero_cost_zero_gradient() {
        let model = toy_model(0.1);
        let p = BolzaProblem {
            psi0: vec![1.0, 0.3],
            selector: ObservableSelector::new(1, 2).unwrap(),
            references: None,
            lambda: 0.0,
            terminal: None,
            horizon: 3,
            bounds: BoxBounds::uniform(3, -1.0, 1.0).unwrap(),
        };
        let (f, g) = lifted_bolza_cost(&model, &p, &[0.2, -0.5, 0.9]).unwrap();
        assert_eq!(f, 0.0);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn toy_chain_gradient_matches_fd() {
        let model = toy_model(0.5);
        let p = BolzaProblem {
            psi0: vec![1.0, 0.2],
            selector: ObservableSelector::new(1, 2).unwrap(),
            references: Some(vec![vec![0.7]]),
            lambda: 0.1,
            terminal: None,
            horizon: 1,
            bounds: BoxBounds::uniform(1, -1.0, 1.0).unwrap(),
        };
        let u = [0.3];
        let (_, g) = lifted_bolza_cost(&model, &p, &u).unwrap();
        let h = 1e-6;
        let fp = lifted_bolza_cost(&model, &p, &[u[0] + h]).unwrap().0;
        let fm = lifted_bolza_cost(&model, &p, &[u[0] - h]).unwrap().0;
        // cost = (0.2 + 0.5u - 0.7)^2 + 0.1u^2
        let exact = 2.0 * (0.2 + 0.5 * u[0] - 0.7) * 0.5 + 0.2 * u[0];
        assert!((g[0] - exact).abs() < 1e-12);
        assert!((g[0] - (fp - fm) / (2.0 * h)).abs() < 1e-6);
    }

    #[test]
    fn mpc_matches_grid_search() {
        let dt = 0.5;
        let model = toy_model(dt);
        let dict = Dictionary::plain(1, Observable::Identity);
        let bounds = BoxBounds::uniform(1, -1.0, 1.0).unwrap();
        for target in [0.45, 2.0, -0.1] {
            let sol = mpc_step(&dict, &model, &[0.2], &[vec![target]], &[0], 0.05, &bounds, None, MinimizeOptions::default()).unwrap();
            let cost = |u: f64| (0.2 + dt * u - target).powi(2) + 0.05 * u * u;
            let best = (0..=2000).map(|i| -1.0 + i as f64 * 1e-3).min_by(|a, b| cost(*a).total_cmp(&cost(*b))).unwrap();
            assert!((sol.control[0] - best).abs() < 2e-3, "{target}: {} vs {best}", sol.control[0]);
            assert!(sol.control[0].abs() <= 1.0);
        }
    }

    #[test]
    fn reference_on_free_trajectory_gives_zero_control() {
        let model = toy_model(0.1);
        let dict = Dictionary::plain(1, Observable::Identity);
        let bounds = BoxBounds::uniform(4, -1.0, 1.0).unwrap();
        let window = vec![vec![0.4]; 4];
        let sol = mpc_step(&dict, &model, &[0.4], &window, &[0], 0.1, &bounds, None, MinimizeOptions::default()).unwrap();
        assert!(sol.window.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-4);
    }

    #[test]
    fn model_consistent_closed_loop_tracks() {
        let model = toy_model(0.1);
        let dict = Dictionary::plain(1, Observable::Identity);
        let refs: Vec<Vec<f64>> = (0..=20).map(|n| vec![0.05 * n as f64]).collect();
        let problem = TrackingProblem {
            references: refs.clone(),
            lambda: 0.0,
            horizon: 3,
            rows: vec![0],
            lower: vec![-1.0],
            upper: vec![1.0],
            x0: vec![0.0],
            n_steps: 20,
            dt: 0.1,
        };
        let mut plant = ModelPlant { dict: dict.clone(), model: model.clone() };
        let r = closed_loop(&problem, &dict, &model, &mut plant).unwrap();
        for (y, rf) in r.tracked.iter().zip(&refs) {
            assert!((y[0] - rf[0]).abs() < 1e-6);
        }
        assert!(r.controls.iter().all(|u| (u[0] - 0.5).abs() < 1e-4));
    }

    #[test]
    fn controllability_of_constant_and_synthetic_models() {
        let k = Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 0.9]);
        let c = OperatorModel::constant(&k).unwrap();
        let r = controllability(&c, 0.1, &[-1.0], &[1.0], 50, 0, 1e-6).unwrap();
        assert_eq!(r.rank, 1);

        let dt = 0.01;
        let a1 = Mat::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 1.0, 0.0, 0.0]);
        let a2 = Mat::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 1.0, -1.0]);
        let m = OperatorModel::bilinear(&Mat::identity(3, 3), &[&a1 * dt, &a2 * dt]).unwrap();
        let r = controllability(&m, dt, &[-1.0, -1.0], &[1.0, 1.0], 40, 1, 1e-6).unwrap();
        assert_eq!(r.rank, 2);
        assert_eq!(r.required_rank, 9);
        assert!(!r.controllable);
        assert!(r.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn fixed_first_row_bounds_rank() {
        let m = OperatorModel::network(3, 2, vec![16], true, 4).unwrap();
        let r = controllability(&m, 0.01, &[-1.0, -1.0], &[1.0, 1.0], 200, 2, 1e-6).unwrap();
        assert_eq!(r.required_rank, 6);
        assert!(r.rank <= 6);
        assert!((0..200).all(|c| (0..3).all(|i| r.matrix[(i, c)] == 0.0)));
        let one = controllability(&m, 0.01, &[-1.0, -1.0], &[1.0, 1.0], 1, 2, 1e-6).unwrap();
        assert!(one.rank <= 1);
        assert!(matches!(m.kind, OperatorKind::Network { .. }));
    }

    #[test]
    fn analytic_mass_oracle() {
        let sys = System::Kdv { nx: 64, forcing: ForcingMode::Sin };
        let x0 = vec![0.2; 64];
        let m0 = mass(&x0);
        let mut refs = vec![vec![1.90]; 501];
        refs.extend(vec![vec![3.16]; 500]);
        let problem = TrackingProblem {
            references: refs,
            lambda: 0.0,
            horizon: 10,
            rows: vec![0],
            lower: vec![-1.0; 3],
            upper: vec![1.0; 3],
            x0,
            n_steps: 1000,
            dt: 0.01,
        };
        let u = kdv_analytic_mass_control(&problem, &sys).unwrap();
        let rate = kdv_mass_rate(&sys, 1.0).unwrap();
        assert!((rate - 3.0 * (std::f64::consts::PI / 25.0).sqrt()).abs() < 1e-6);
        assert_eq!(u[30], vec![0.5; 3]);
        assert_eq!(u[200], vec![0.0; 3]);
        assert_eq!(u[550], vec![0.5; 3]);
        let first_ramp = u.iter().take_while(|c| c[0] != 0.0).count();
        assert_eq!(first_ramp, ((1.90 - m0) / (rate * 0.01)).ceil() as usize);
        let lin = System::Kdv { nx: 64, forcing: ForcingMode::Linear };
        assert_eq!(kdv_analytic_mass_control(&problem, &lin).unwrap()[550], vec![1.0; 3]);
    }
}
