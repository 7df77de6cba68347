//! Right-hand sides of the benchmark systems.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::integrate::{rk23_advance, rk4_advance};
use crate::error::{Error, Result};

/// Van der Pol–Mathieu constants.
pub const VDPM_K1: f64 = 2.0;
pub const VDPM_K2: f64 = 2.0;
pub const VDPM_K3: f64 = 1.0;
pub const VDPM_W0: f64 = 1.0;

/// FitzHugh–Nagumo constants.
pub const FHN_DELTA: f64 = 4.0;
pub const FHN_EPSILON: f64 = 0.03;
pub const FHN_A1: f64 = 2.0;
pub const FHN_A0: f64 = -0.03;
pub const FHN_CENTERS: [f64; 3] = [-5.0, 0.0, 5.0];
pub const FHN_HALF_WIDTH: f64 = 10.0;

/// KdV forcing centers and width.
pub const KDV_CENTERS: [f64; 3] = [-PI / 2.0, 0.0, PI / 2.0];
pub const KDV_FORCING_WIDTH: f64 = 25.0;

/// How the KdV control enters the forcing amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ForcingMode {
    /// `sin(pi u)`
    #[default]
    Sin,
    /// `u`
    Linear,
}

impl ForcingMode {
    pub fn amplitude(self, u: f64) -> f64 {
        match self {
            ForcingMode::Sin => (PI * u).sin(),
            ForcingMode::Linear => u,
        }
    }
}

/// Descriptor of a benchmark system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum System {
    /// Unforced Duffing oscillator; the parameter is `(delta, alpha, beta)`.
    Duffing,
    /// Van der Pol–Mathieu oscillator with scalar input.
    Vdpm { mu: f64 },
    /// FitzHugh–Nagumo on `[-10, 10]` with Neumann boundaries; state `(v, w)` stacked.
    Fhn { nx: usize, control_dim: usize },
    /// Forced Korteweg–de Vries on the periodic grid `x_j = -pi + j dx`.
    Kdv {
        nx: usize,
        #[serde(default)]
        forcing: ForcingMode,
    },
}

/// Time integrator used to advance a system over one sample interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Integrator {
    Rk4 { substeps: usize },
    Rk23 { tol: f64 },
}

impl System {
    pub fn name(&self) -> &'static str {
        match self {
            System::Duffing => "duffing",
            System::Vdpm { .. } => "vdpm",
            System::Fhn { .. } => "fhn",
            System::Kdv { .. } => "kdv",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            System::Duffing => Ok(()),
            System::Vdpm { mu } if mu >= 0.0 && mu.is_finite() => Ok(()),
            System::Vdpm { mu } => Err(Error::Invalid(format!("vdpm mu must be >= 0, got {mu}"))),
            System::Fhn { nx, control_dim } => {
                if nx < 3 {
                    return Err(Error::Invalid(format!("fhn needs nx >= 3, got {nx}")));
                }
                if control_dim != 1 && control_dim != 3 {
                    return Err(Error::Invalid(format!("fhn control_dim must be 1 or 3, got {control_dim}")));
                }
                Ok(())
            }
            System::Kdv { nx, .. } if nx >= 5 => Ok(()),
            System::Kdv { nx, .. } => Err(Error::Invalid(format!("kdv needs nx >= 5, got {nx}"))),
        }
    }

    pub fn state_dim(&self) -> usize {
        match *self {
            System::Duffing | System::Vdpm { .. } => 2,
            System::Fhn { nx, .. } => 2 * nx,
            System::Kdv { nx, .. } => nx,
        }
    }

    pub fn param_dim(&self) -> usize {
        match *self {
            System::Duffing | System::Kdv { .. } => 3,
            System::Vdpm { .. } => 1,
            System::Fhn { control_dim, .. } => control_dim,
        }
    }

    /// Box the parameter is sampled from (and constrained to in control).
    pub fn param_box(&self) -> (Vec<f64>, Vec<f64>) {
        match *self {
            System::Duffing => (vec![0.0, 0.0, -2.0], vec![1.0, 2.0, 2.0]),
            _ => (vec![-1.0; self.param_dim()], vec![1.0; self.param_dim()]),
        }
    }

    /// Grid spacing of the spatial discretization (PDE systems only).
    pub fn dx(&self) -> Option<f64> {
        match *self {
            System::Fhn { nx, .. } => Some(2.0 * FHN_HALF_WIDTH / (nx - 1) as f64),
            System::Kdv { nx, .. } => Some(2.0 * PI / nx as f64),
            _ => None,
        }
    }

    /// Grid points (PDE systems only).
    pub fn grid(&self) -> Vec<f64> {
        match *self {
            System::Fhn { nx, .. } => {
                let dx = self.dx().unwrap_or(0.0);
                (0..nx).map(|j| -FHN_HALF_WIDTH + j as f64 * dx).collect()
            }
            System::Kdv { nx, .. } => {
                let dx = 2.0 * PI / nx as f64;
                (0..nx).map(|j| -PI + j as f64 * dx).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Default integrator for one sample interval of length `dt`.
    pub fn default_integrator(&self, dt: f64) -> Integrator {
        match *self {
            System::Duffing => Integrator::Rk4 { substeps: 10 },
            System::Vdpm { .. } => Integrator::Rk4 { substeps: 1 },
            System::Fhn { .. } => {
                let dx = self.dx().unwrap_or(1.0);
                let max_sub = 0.25 * dx * dx / FHN_DELTA;
                Integrator::Rk4 { substeps: ((dt / max_sub).ceil() as usize).max(1) }
            }
            System::Kdv { .. } => Integrator::Rk23 { tol: 1e-8 },
        }
    }
}

/// A system with its spatial forcing profiles precomputed.
#[derive(Debug, Clone)]
pub struct Simulator {
    system: System,
    profiles: Vec<Vec<f64>>,
    dx: f64,
}

impl Simulator {
    pub fn new(system: System) -> Result<Self> {
        system.validate()?;
        let grid = system.grid();
        let profiles = match system {
            System::Fhn { control_dim, .. } => {
                let centers: &[f64] = if control_dim == 3 { &FHN_CENTERS } else { &FHN_CENTERS[1..2] };
                centers
                    .iter()
                    .map(|c| grid.iter().map(|x| (-(x - c) * (x - c) / 2.0).exp()).collect())
                    .collect()
            }
            System::Kdv { .. } => KDV_CENTERS
                .iter()
                .map(|c| grid.iter().map(|x| (-KDV_FORCING_WIDTH * (x - c) * (x - c)).exp()).collect())
                .collect(),
            _ => Vec::new(),
        };
        Ok(Self { dx: system.dx().unwrap_or(0.0), system, profiles })
    }

    pub fn system(&self) -> &System {
        &self.system
    }

    /// Spatial forcing profiles (FHN and KdV), one per control component.
    pub fn profiles(&self) -> &[Vec<f64>] {
        &self.profiles
    }

    pub fn state_dim(&self) -> usize {
        self.system.state_dim()
    }

    pub fn param_dim(&self) -> usize {
        self.system.param_dim()
    }

    fn check(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() || u.len() != self.param_dim() {
            return Err(Error::Dimension(format!(
                "{} expects state {} and parameter {}, got {} and {}",
                self.system.name(),
                self.state_dim(),
                self.param_dim(),
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }

    /// Spatial forcing `w(x_j) = sum_i v_i(x_j) s(u_i)` for KdV, `sum_i u_i v_i(x_j)` for FHN.
    pub fn forcing(&self, u: &[f64]) -> Vec<f64> {
        let n = self.profiles.first().map_or(0, Vec::len);
        let mut w = vec![0.0; n];
        for (profile, &ui) in self.profiles.iter().zip(u) {
            let a = match self.system {
                System::Kdv { forcing, .. } => forcing.amplitude(ui),
                _ => ui,
            };
            for (wj, pj) in w.iter_mut().zip(profile) {
                *wj += a * pj;
            }
        }
        w
    }

    pub fn rhs(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check(x, u)?;
        let mut d = vec![0.0; x.len()];
        let w = self.forcing(u);
        self.rhs_into(x, u, &w, &mut d);
        Ok(d)
    }

    /// Writes the derivative into `d`; `w` is the precomputed spatial forcing.
    fn rhs_into(&self, x: &[f64], u: &[f64], w: &[f64], d: &mut [f64]) {
        match self.system {
            System::Duffing => {
                let (delta, alpha, beta) = (u[0], u[1], u[2]);
                d[0] = x[1];
                d[1] = -delta * x[1] - x[0] * (beta + alpha * x[0] * x[0]);
            }
            System::Vdpm { mu } => {
                d[0] = x[1];
                d[1] = (VDPM_K1 - VDPM_K2 * x[0] * x[0]) * x[1]
                    - (VDPM_W0 * VDPM_W0 + 2.0 * mu * u[0] * u[0] - mu) * x[0]
                    + u[0] * VDPM_K3;
            }
            System::Fhn { nx, .. } => {
                let (v, wv) = x.split_at(nx);
                let (dv, dw) = d.split_at_mut(nx);
                let inv = 1.0 / (self.dx * self.dx);
                for j in 0..nx {
                    // Neumann ghost cells mirror the first interior neighbour
                    let left = if j == 0 { 1 } else { j - 1 };
                    let right = if j + 1 == nx { nx - 2 } else { j + 1 };
                    let lap_v = (v[left] - 2.0 * v[j] + v[right]) * inv;
                    let lap_w = (wv[left] - 2.0 * wv[j] + wv[right]) * inv;
                    dv[j] = lap_v + v[j] - v[j] * v[j] * v[j] - wv[j] + w[j];
                    dw[j] = FHN_DELTA * lap_w + FHN_EPSILON * (v[j] - FHN_A1 * wv[j] - FHN_A0);
                }
            }
            System::Kdv { nx, .. } => {
                let h = self.dx;
                let c1 = 1.0 / (2.0 * h);
                let c3 = 1.0 / (2.0 * h * h * h);
                for j in 0..nx {
                    let m1 = x[(j + nx - 1) % nx];
                    let m2 = x[(j + nx - 2) % nx];
                    let p1 = x[(j + 1) % nx];
                    let p2 = x[(j + 2) % nx];
                    let eta_x = (p1 - m1) * c1;
                    let eta_xxx = (p2 - 2.0 * p1 + 2.0 * m1 - m2) * c3;
                    d[j] = -x[j] * eta_x - eta_xxx + w[j];
                }
            }
        }
    }

    /// Advances `x` by `dt` with `u` held constant.
    pub fn advance(&self, x: &[f64], u: &[f64], dt: f64, integrator: Integrator, h_hint: &mut Option<f64>) -> Result<Vec<f64>> {
        self.check(x, u)?;
        let w = self.forcing(u);
        let f = |y: &[f64], d: &mut [f64]| self.rhs_into(y, u, &w, d);
        match integrator {
            Integrator::Rk4 { substeps } => rk4_advance(&f, x, dt, substeps),
            Integrator::Rk23 { tol } => rk23_advance(&f, x, dt, tol, h_hint),
        }
    }

    /// Advances with the system's default integrator.
    pub fn step(&self, x: &[f64], u: &[f64], dt: f64, h_hint: &mut Option<f64>) -> Result<Vec<f64>> {
        self.advance(x, u, dt, self.system.default_integrator(dt), h_hint)
    }
}

/// `dx * sum(eta)` on the periodic KdV grid.
pub fn mass(eta: &[f64]) -> f64 {
    if eta.is_empty() {
        return 0.0;
    }
    2.0 * PI / eta.len() as f64 * eta.iter().sum::<f64>()
}

/// `dx * sum(eta^2)` on the periodic KdV grid.
pub fn momentum(eta: &[f64]) -> f64 {
    if eta.is_empty() {
        return 0.0;
    }
    2.0 * PI / eta.len() as f64 * eta.iter().map(|e| e * e).sum::<f64>()
}

/// Trapezoid rule on a uniform bounded grid.
pub fn trapezoid(values: &[f64], dx: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => dx * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1])),
    }
}
