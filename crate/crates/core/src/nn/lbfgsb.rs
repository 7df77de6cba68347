//! Gradient-projection L-BFGS for smooth objectives on a box.
//!
//! Variables sitting on a bound with the gradient pushing outward are frozen
//! for the iteration; the two-loop recursion runs on the remaining free
//! coordinates and the step is projected back onto the box during an Armijo
//! backtracking search along the projection arc.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension(format!(
                "bounds of length {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::Invalid("lower bound exceeds upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn uniform(n: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; n], vec![upper; n])
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((xi, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *xi = xi.clamp(*l, *u);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.len()
            && x.iter().zip(&self.lower).zip(&self.upper).all(|((xi, l), u)| l <= xi && xi <= u)
    }

    /// `x - P(x - g)`; zero exactly at first-order stationary points.
    pub fn projected_gradient(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(g)
            .zip(self.lower.iter().zip(&self.upper))
            .map(|((xi, gi), (l, u))| xi - (xi - gi).clamp(*l, *u))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimizeOptions {
    pub max_iter: usize,
    /// Stop once the infinity norm of the projected gradient drops below this.
    pub tol: f64,
    pub memory: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-9, memory: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `objective` (returning value and gradient) over `bounds`,
/// starting from `x0` projected onto the box.
pub fn minimize_box<F>(
    mut objective: F,
    x0: &[f64],
    bounds: &BoxBounds,
    opts: MinimizeOptions,
) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if x0.len() != bounds.len() {
        return Err(Error::Dimension(format!("x0 has {} entries, bounds {}", x0.len(), bounds.len())));
    }
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let (mut f, mut g) = objective(&x)?;
    let mut evaluations = 1;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective at the starting point".into()));
    }

    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        let pg = bounds.projected_gradient(&x, &g);
        if pg.iter().fold(0.0f64, |m, v| m.max(v.abs())) < opts.tol {
            converged = true;
            break;
        }
        iterations += 1;

        let free: Vec<bool> = (0..n)
            .map(|i| {
                !((x[i] <= bounds.lower[i] && g[i] > 0.0) || (x[i] >= bounds.upper[i] && g[i] < 0.0))
            })
            .collect();
        let masked = |v: &mut Vec<f64>| {
            for (vi, &fr) in v.iter_mut().zip(&free) {
                if !fr {
                    *vi = 0.0;
                }
            }
        };

        let mut q = g.clone();
        masked(&mut q);
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, y, rho) in memory.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = memory.back() {
            let gamma = dot(s, y) / dot(y, y);
            for qi in &mut q {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        masked(&mut d);
        if dot(&g, &d) >= 0.0 {
            memory.clear();
            d = g.iter().map(|v| -v).collect();
            masked(&mut d);
        }

        let mut step = if memory.is_empty() {
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if dmax > 0.0 { (1.0 / dmax).min(1.0) } else { 1.0 }
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..50 {
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            bounds.project(&mut xn);
            let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            if s.iter().all(|v| *v == 0.0) {
                break;
            }
            let (fnew, gnew) = objective(&xn)?;
            evaluations += 1;
            if fnew.is_finite() && fnew <= f + 1e-4 * dot(&g, &s) {
                accepted = Some((xn, fnew, gnew, s));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew, s)) = accepted else {
            break;
        };
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).max(f64::MIN_POSITIVE) {
            if memory.len() == opts.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        let small_decrease = (f - fnew).abs() <= 1e-15 * f.abs().max(fnew.abs()).max(1e-300);
        x = xn;
        f = fnew;
        g = gnew;
        if small_decrease && f != 0.0 {
            let pg = bounds.projected_gradient(&x, &g);
            converged = pg.iter().fold(0.0f64, |m, v| m.max(v.abs())) < opts.tol;
            break;
        }
    }

    Ok(Minimum { x, f, iterations, evaluations, converged })
}
