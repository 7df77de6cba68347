//! Trajectory datasets and their seeded generation.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::systems::{Simulator, System};
use crate::error::{Error, Result};

/// How parameters vary along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParameterLaw {
    /// One draw shared by `group_size` consecutive trajectories, constant in time.
    Static { group_size: usize },
    /// A fresh draw at every step.
    PerStep,
}

impl ParameterLaw {
    pub fn default_for(system: &System) -> Self {
        match system {
            System::Duffing => ParameterLaw::Static { group_size: 1 },
            _ => ParameterLaw::PerStep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub n_trajectories: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub seed: u64,
    pub parameter_law: ParameterLaw,
}

impl SamplingSpec {
    pub fn new(system: &System, n_trajectories: usize, n_steps: usize, dt: f64, seed: u64) -> Self {
        Self { n_trajectories, n_steps, dt, seed, parameter_law: ParameterLaw::default_for(system) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trajectories == 0 || self.n_steps == 0 {
            return Err(Error::Invalid("sampling needs at least one trajectory and one step".into()));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if let ParameterLaw::Static { group_size: 0 } = self.parameter_law {
            return Err(Error::Invalid("static parameter group size must be >= 1".into()));
        }
        Ok(())
    }
}

/// States `x_0..x_N` and parameters `u_0..u_{N-1}`, both flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<f64>,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub system: System,
    pub dt: f64,
    pub seed: u64,
    pub state_dim: usize,
    pub param_dim: usize,
    pub trajectories: Vec<Trajectory>,
}

impl Trajectory {
    pub fn n_steps(&self, param_dim: usize) -> usize {
        self.params.len() / param_dim.max(1)
    }
}

impl TrajectoryDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_steps(&self, m: usize) -> usize {
        self.trajectories[m].n_steps(self.param_dim)
    }

    pub fn state(&self, m: usize, n: usize) -> &[f64] {
        &self.trajectories[m].states[n * self.state_dim..(n + 1) * self.state_dim]
    }

    pub fn param(&self, m: usize, n: usize) -> &[f64] {
        &self.trajectories[m].params[n * self.param_dim..(n + 1) * self.param_dim]
    }

    pub fn n_transitions(&self) -> usize {
        (0..self.len()).map(|m| self.n_steps(m)).sum()
    }

    /// All `(trajectory, step)` index pairs in trajectory-major order.
    pub fn transition_indices(&self) -> Vec<(usize, usize)> {
        (0..self.len()).flat_map(|m| (0..self.n_steps(m)).map(move |n| (m, n))).collect()
    }

    /// Checks shapes and finiteness.
    pub fn validate(&self) -> Result<()> {
        for (m, t) in self.trajectories.iter().enumerate() {
            if self.state_dim == 0 || t.states.len() % self.state_dim != 0 || t.params.len() % self.param_dim.max(1) != 0 {
                return Err(Error::Dimension(format!("trajectory {m} has ragged blocks")));
            }
            if t.states.len() / self.state_dim != t.n_steps(self.param_dim) + 1 {
                return Err(Error::Dimension(format!(
                    "trajectory {m}: {} states for {} parameters",
                    t.states.len() / self.state_dim,
                    t.n_steps(self.param_dim)
                )));
            }
            if t.states.iter().chain(&t.params).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("trajectory {m}")));
            }
        }
        Ok(())
    }

    /// Splits off the last `fraction` of trajectories (at least one when the
    /// fraction is positive and more than one trajectory exists).
    pub fn split_validation(&self, fraction: f64) -> Result<(TrajectoryDataset, TrajectoryDataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Invalid(format!("validation fraction must be in [0, 1), got {fraction}")));
        }
        let m = self.len();
        let mut n_val = (fraction * m as f64).round() as usize;
        if fraction > 0.0 && n_val == 0 && m > 1 {
            n_val = 1;
        }
        n_val = n_val.min(m.saturating_sub(1));
        let mut train = self.clone();
        let val_traj = train.trajectories.split_off(m - n_val);
        let val = TrajectoryDataset { trajectories: val_traj, ..self.clone_header() };
        Ok((train, val))
    }

    /// Same metadata, no trajectories.
    pub fn clone_header(&self) -> TrajectoryDataset {
        TrajectoryDataset {
            system: self.system.clone(),
            dt: self.dt,
            seed: self.seed,
            state_dim: self.state_dim,
            param_dim: self.param_dim,
            trajectories: Vec::new(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> TrajectoryDataset {
        TrajectoryDataset {
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
            ..self.clone_header()
        }
    }
}

const PARAM_STREAM_OFFSET: u64 = 1 << 40;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_param(rng: &mut ChaCha8Rng, lower: &[f64], upper: &[f64]) -> Vec<f64> {
    lower.iter().zip(upper).map(|(l, u)| rng.gen_range(*l..*u)).collect()
}

/// A seeded draw from the initial-state distribution of `system`.
pub fn initial_state(system: &System, seed: u64) -> Vec<f64> {
    sample_initial_state(system, &mut rng_for(seed, 0))
}

/// Initial condition drawn from the system's initial-condition law.
pub fn sample_initial_state(system: &System, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match *system {
        System::Duffing => (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        System::Vdpm { .. } => (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        System::Fhn { nx, .. } => {
            let a = rng.gen_range(2..20) as f64;
            let mut x: Vec<f64> = system.grid().iter().map(|x| (a * PI * x / 10.0 + PI / 2.0).sin()).collect();
            x.extend(std::iter::repeat(0.0).take(nx));
            x
        }
        System::Kdv { .. } => kdv_initial_state(system, rng),
    }
}

fn kdv_initial_state(system: &System, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let total: f64 = raw.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let b = raw.map(|r| r / total);
    kdv_profile(system, b)
}

/// Convex combination of the three KdV initial-condition profiles.
pub fn kdv_profile(system: &System, weights: [f64; 3]) -> Vec<f64> {
    system
        .grid()
        .iter()
        .map(|&x| {
            let s = (x / 2.0).sin();
            weights[0] * (-(x - PI / 2.0).powi(2)).exp() - weights[1] * s * s
                + weights[2] * (-(x + PI / 2.0).powi(2)).exp()
        })
        .collect()
}

/// Simulates one trajectory from `x0` under the given parameter sequence.
pub fn simulate(sim: &Simulator, x0: &[f64], params: &[f64], dt: f64) -> Result<Trajectory> {
    let sd = sim.state_dim();
    let pd = sim.param_dim();
    if x0.len() != sd || params.len() % pd != 0 {
        return Err(Error::Dimension(format!("simulate: state {} / params {}", x0.len(), params.len())));
    }
    let n = params.len() / pd;
    let mut states = Vec::with_capacity((n + 1) * sd);
    states.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let mut hint = None;
    for u in params.chunks(pd) {
        x = sim.step(&x, u, dt, &mut hint)?;
        states.extend_from_slice(&x);
    }
    Ok(Trajectory { states, params: params.to_vec() })
}

/// Generates a dataset; trajectory `m` uses the RNG stream `(seed, m)`, so
/// the result does not depend on thread scheduling.
pub fn generate(system: &System, spec: &SamplingSpec) -> Result<TrajectoryDataset> {
    spec.validate()?;
    let sim = Simulator::new(system.clone())?;
    let (lower, upper) = system.param_box();
    let pd = system.param_dim();
    let trajectories = (0..spec.n_trajectories)
        .into_par_iter()
        .map(|m| {
            let mut rng = rng_for(spec.seed, m as u64);
            let x0 = sample_initial_state(system, &mut rng);
            let params: Vec<f64> = match spec.parameter_law {
                ParameterLaw::Static { group_size } => {
                    let group = (m / group_size) as u64;
                    let mut prng = rng_for(spec.seed, PARAM_STREAM_OFFSET + group);
                    let u = draw_param(&mut prng, &lower, &upper);
                    (0..spec.n_steps).flat_map(|_| u.iter().copied()).collect()
                }
                ParameterLaw::PerStep => (0..spec.n_steps)
                    .flat_map(|_| draw_param(&mut rng, &lower, &upper))
                    .collect(),
            };
            debug_assert_eq!(params.len(), spec.n_steps * pd);
            simulate(&sim, &x0, &params, spec.dt)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryDataset {
        system: system.clone(),
        dt: spec.dt,
        seed: spec.seed,
        state_dim: system.state_dim(),
        param_dim: pd,
        trajectories,
    })
}

/// Generates trajectories whose static parameter is given explicitly; the
/// initial states still follow the system's law (stream `(seed, m)`).
pub fn generate_with_params(
    system: &System,
    params: &[Vec<f64>],
    per_param: usize,
    n_steps: usize,
    dt: f64,
    seed: u64,
) -> Result<TrajectoryDataset> {
    let spec = SamplingSpec { n_trajectories: params.len() * per_param, n_steps, dt, seed, parameter_law: ParameterLaw::PerStep };
    spec.validate()?;
    let sim = Simulator::new(system.clone())?;
    if params.iter().any(|p| p.len() != system.param_dim()) {
        return Err(Error::Dimension("explicit parameter of wrong length".into()));
    }
    let trajectories = (0..spec.n_trajectories)
        .into_par_iter()
        .map(|m| {
            let mut rng = rng_for(seed, m as u64);
            let x0 = sample_initial_state(system, &mut rng);
            let u = &params[m / per_param];
            let seq: Vec<f64> = (0..n_steps).flat_map(|_| u.iter().copied()).collect();
            simulate(&sim, &x0, &seq, dt)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryDataset {
        system: system.clone(),
        dt,
        seed,
        state_dim: system.state_dim(),
        param_dim: system.param_dim(),
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ForcingMode;

    #[test]
    fn duffing_shape() {
        let sys = System::Duffing;
        let ds = generate(&sys, &SamplingSpec::new(&sys, 10, 50, 0.25, 1)).unwrap();
        assert_eq!(ds.n_transitions(), 500);
        ds.validate().unwrap();
        for m in 0..10 {
            assert_eq!(ds.trajectories[m].states.len(), 51 * 2);
            let u0 = ds.param(m, 0).to_vec();
            assert!((0..50).all(|n| ds.param(m, n) == u0.as_slice()));
            assert!((0.0..1.0).contains(&u0[0]) && (0.0..2.0).contains(&u0[1]) && (-2.0..2.0).contains(&u0[2]));
            assert!(ds.state(m, 0).iter().all(|x| (-2.0..2.0).contains(x)));
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let sys = System::Vdpm { mu: 1.0 };
        let spec = SamplingSpec::new(&sys, 4, 20, 0.01, 9);
        assert_eq!(generate(&sys, &spec).unwrap(), generate(&sys, &spec).unwrap());
        let other = SamplingSpec { seed: 10, ..spec };
        assert_ne!(generate(&sys, &spec).unwrap(), generate(&sys, &other).unwrap());
    }

    #[test]
    fn static_groups_share_parameters() {
        let sys = System::Duffing;
        let spec = SamplingSpec { parameter_law: ParameterLaw::Static { group_size: 3 }, ..SamplingSpec::new(&sys, 6, 5, 0.25, 2) };
        let ds = generate(&sys, &spec).unwrap();
        assert_eq!(ds.param(0, 0), ds.param(2, 4));
        assert_ne!(ds.param(0, 0), ds.param(3, 0));
        assert_ne!(ds.state(0, 0), ds.state(1, 0));
    }

    #[test]
    fn kdv_initial_condition_is_a_convex_combination() {
        let sys = System::Kdv { nx: 32, forcing: ForcingMode::Sin };
        let mut rng = rng_for(3, 0);
        let eta = sample_initial_state(&sys, &mut rng);
        assert_eq!(eta.len(), 32);
        // each profile is bounded by 1 in magnitude
        assert!(eta.iter().all(|e| e.abs() <= 1.0));
    }

    #[test]
    fn fhn_initial_condition() {
        let sys = System::Fhn { nx: 10, control_dim: 3 };
        let mut rng = rng_for(5, 1);
        let x = sample_initial_state(&sys, &mut rng);
        assert_eq!(x.len(), 20);
        assert!(x[10..].iter().all(|w| *w == 0.0));
        // v(-10) = sin(-a pi + pi/2) = cos(a pi) = +-1
        assert!((x[0].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_takes_trailing_trajectories() {
        let sys = System::Vdpm { mu: 0.5 };
        let ds = generate(&sys, &SamplingSpec::new(&sys, 10, 3, 0.01, 0)).unwrap();
        let (train, val) = ds.split_validation(0.1).unwrap();
        assert_eq!((train.len(), val.len()), (9, 1));
        assert_eq!(val.trajectories[0], ds.trajectories[9]);
        let (t2, v2) = ds.split_validation(0.1).unwrap();
        assert_eq!((t2, v2), (train, val));
        assert!(ds.split_validation(1.0).is_err());
    }

    #[test]
    fn rejects_empty_spec() {
        let sys = System::Duffing;
        assert!(generate(&sys, &SamplingSpec::new(&sys, 0, 5, 0.25, 0)).is_err());
        assert!(generate(&sys, &SamplingSpec::new(&sys, 1, 5, 0.0, 0)).is_err());
    }
}
