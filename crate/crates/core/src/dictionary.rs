//! Observable dictionaries `Psi(x) = (1, g(x), tail(x))`.
//!
//! The first `1 + N_y` components are fixed: a constant and the target
//! observables `g`. The tail is either a trainable residual network, a fixed
//! set of Gaussian radial basis functions, or empty.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{mass, momentum};
use crate::error::{Error, Result};
use crate::nn::{forward_batch, forward_graph, init_params, Graph, Mat, NetworkSpec, Var};

/// Target observables `g` recovered linearly from the lift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    /// The full state.
    #[default]
    Identity,
    /// `(mass, momentum)` of a periodic KdV profile.
    KdvMassMomentum,
}

impl Observable {
    pub fn dim(self, state_dim: usize) -> usize {
        match self {
            Observable::Identity => state_dim,
            Observable::KdvMassMomentum => 2,
        }
    }

    pub fn eval(self, x: &[f64]) -> Vec<f64> {
        match self {
            Observable::Identity => x.to_vec(),
            Observable::KdvMassMomentum => vec![mass(x), momentum(x)],
        }
    }

    /// Whether a state can be reconstructed from `g`, which resubstituting
    /// rollouts need.
    pub fn is_full_state(self) -> bool {
        self == Observable::Identity
    }
}

/// Elementwise `(x - shift) * scale` applied before the dictionary tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaler {
    /// Standardizes each coordinate to zero mean and unit variance over `points`.
    pub fn fit(points: &[&[f64]]) -> Result<Self> {
        let dim = points.first().map(|p| p.len()).ok_or_else(|| Error::Invalid("no points to fit a scaler".into()))?;
        let n = points.len() as f64;
        let mut shift = vec![0.0; dim];
        for p in points {
            for (s, v) in shift.iter_mut().zip(*p) {
                *s += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for p in points {
            for ((s, v), m) in var.iter_mut().zip(*p).zip(&shift) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let scale = var.iter().map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        Ok(Self { shift, scale })
    }

    fn apply_rows(&self, x: &Mat) -> Mat {
        let mut out = x.clone();
        for mut row in out.row_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.shift[j]) * self.scale[j];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tail {
    None,
    Network { spec: NetworkSpec, params: Vec<f64> },
    Rbf { centers: Vec<Vec<f64>>, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub state_dim: usize,
    pub observable: Observable,
    #[serde(default)]
    pub scaler: Option<InputScaler>,
    pub tail: Tail,
}

/// Picks observables out of the lift: `B Psi(x) = g(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableSelector {
    pub matrix: Mat,
}

impl ObservableSelector {
    /// `B = [0 | I_{N_y} | 0]`, skipping the constant component.
    pub fn new(n_y: usize, n_psi: usize) -> Result<Self> {
        if n_y == 0 || n_psi < n_y + 1 {
            return Err(Error::Invalid(format!("selector needs 1 <= N_y < N_psi, got {n_y}, {n_psi}")));
        }
        let mut matrix = Mat::zeros(n_y, n_psi);
        for i in 0..n_y {
            matrix[(i, i + 1)] = 1.0;
        }
        Ok(Self { matrix })
    }

    /// Keeps only the given rows (e.g. the mass row of a KdV selector).
    pub fn rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.iter().any(|&r| r >= self.matrix.nrows()) {
            return Err(Error::Invalid(format!("selector rows {rows:?} out of range")));
        }
        Ok(Self { matrix: self.matrix.select_rows(rows) })
    }

    pub fn n_outputs(&self) -> usize {
        self.matrix.nrows()
    }

    /// Indices of the lifted components read by each output row.
    pub fn columns(&self) -> Vec<usize> {
        (0..self.matrix.nrows())
            .map(|i| (0..self.matrix.ncols()).find(|&j| self.matrix[(i, j)] != 0.0).unwrap_or(0))
            .collect()
    }

    pub fn apply(&self, psi: &[f64]) -> Vec<f64> {
        (0..self.matrix.nrows())
            .map(|i| (0..psi.len()).map(|j| self.matrix[(i, j)] * psi[j]).sum())
            .collect()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl Dictionary {
    /// `(1, g(x))` only.
    pub fn plain(state_dim: usize, observable: Observable) -> Self {
        Self { state_dim, observable, scaler: None, tail: Tail::None }
    }

    /// Trainable residual-network tail of `n_psi - 1 - N_y` outputs.
    pub fn trainable(state_dim: usize, observable: Observable, n_psi: usize, hidden: Vec<usize>, seed: u64) -> Result<Self> {
        let n_y = observable.dim(state_dim);
        if n_psi <= 1 + n_y {
            return Err(Error::Invalid(format!("N_psi = {n_psi} leaves no room for a trainable tail after 1 + {n_y}")));
        }
        let spec = NetworkSpec::new(state_dim, hidden, n_psi - 1 - n_y).residual(true);
        let params = init_params(&spec, seed)?;
        Ok(Self { state_dim, observable, scaler: None, tail: Tail::Network { spec, params } })
    }

    pub fn rbf(state_dim: usize, observable: Observable, centers: Vec<Vec<f64>>, gamma: f64) -> Result<Self> {
        if centers.iter().any(|c| c.len() != state_dim) {
            return Err(Error::Dimension("rbf center of wrong length".into()));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::Invalid(format!("rbf shape parameter must be positive, got {gamma}")));
        }
        Ok(Self { state_dim, observable, scaler: None, tail: Tail::Rbf { centers, gamma } })
    }

    /// Centers drawn uniformly from the bounding box of `points`, shape
    /// parameter `1 / (2 median^2)` of the pairwise center distances.
    pub fn rbf_from_data(observable: Observable, points: &[&[f64]], n_centers: usize, seed: u64) -> Result<Self> {
        let dim = points.first().map(|p| p.len()).ok_or_else(|| Error::Invalid("no data for rbf centers".into()))?;
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for p in points {
            for j in 0..dim {
                lo[j] = lo[j].min(p[j]);
                hi[j] = hi[j].max(p[j]);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..n_centers)
            .map(|_| (0..dim).map(|j| if hi[j] > lo[j] { rng.gen_range(lo[j]..hi[j]) } else { lo[j] }).collect())
            .collect();
        let mut dists = Vec::new();
        for a in 0..centers.len() {
            for b in a + 1..centers.len() {
                let d2: f64 = centers[a].iter().zip(&centers[b]).map(|(x, y)| (x - y) * (x - y)).sum();
                dists.push(d2.sqrt());
            }
        }
        let med = median(dists);
        let gamma = if med > 0.0 { 1.0 / (2.0 * med * med) } else { 1.0 };
        Self::rbf(dim, observable, centers, gamma)
    }

    pub fn with_scaler(mut self, scaler: Option<InputScaler>) -> Self {
        self.scaler = scaler;
        self
    }

    pub fn n_y(&self) -> usize {
        self.observable.dim(self.state_dim)
    }

    pub fn tail_dim(&self) -> usize {
        match &self.tail {
            Tail::None => 0,
            Tail::Network { spec, .. } => spec.output_dim,
            Tail::Rbf { centers, .. } => centers.len(),
        }
    }

    pub fn n_psi(&self) -> usize {
        1 + self.n_y() + self.tail_dim()
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self.tail, Tail::Network { .. })
    }

    /// Trainable parameters (empty for fixed dictionaries).
    pub fn params(&self) -> &[f64] {
        match &self.tail {
            Tail::Network { params, .. } => params,
            _ => &[],
        }
    }

    pub fn set_params(&mut self, new: &[f64]) -> Result<()> {
        match &mut self.tail {
            Tail::Network { params, .. } if params.len() == new.len() => {
                params.copy_from_slice(new);
                Ok(())
            }
            Tail::Network { params, .. } => Err(Error::Dimension(format!(
                "dictionary has {} parameters, got {}",
                params.len(),
                new.len()
            ))),
            _ if new.is_empty() => Ok(()),
            _ => Err(Error::Invalid("fixed dictionary has no parameters".into())),
        }
    }

    pub fn selector(&self) -> Result<ObservableSelector> {
        ObservableSelector::new(self.n_y(), self.n_psi())
    }

    fn check_rows(&self, x: &Mat) -> Result<()> {
        if x.ncols() != self.state_dim {
            return Err(Error::Dimension(format!(
                "dictionary expects states of length {}, got {}",
                self.state_dim,
                x.ncols()
            )));
        }
        Ok(())
    }

    fn prefix_rows(&self, x: &Mat) -> Mat {
        let n_y = self.n_y();
        let mut out = Mat::zeros(x.nrows(), 1 + n_y);
        for (b, row) in x.row_iter().enumerate() {
            out[(b, 0)] = 1.0;
            let state: Vec<f64> = row.iter().copied().collect();
            for (j, v) in self.observable.eval(&state).into_iter().enumerate() {
                out[(b, 1 + j)] = v;
            }
        }
        out
    }

    fn tail_input(&self, x: &Mat) -> Mat {
        match &self.scaler {
            Some(s) => s.apply_rows(x),
            None => x.clone(),
        }
    }

    fn rbf_rows(x: &Mat, centers: &[Vec<f64>], gamma: f64) -> Mat {
        Mat::from_fn(x.nrows(), centers.len(), |b, c| {
            let d2: f64 = centers[c].iter().enumerate().map(|(j, cj)| (x[(b, j)] - cj).powi(2)).sum();
            (-gamma * d2).exp()
        })
    }

    /// Records the lift of the rows of `x` on `g`; `theta` is the `1 x P`
    /// parameter node of a trainable tail (ignored otherwise). The prefix is
    /// a constant leaf, so it never receives a gradient.
    pub fn lift_graph(&self, g: &mut Graph, theta: Option<Var>, x: &Mat) -> Result<Var> {
        self.check_rows(x)?;
        let prefix = g.leaf(self.prefix_rows(x));
        match &self.tail {
            Tail::None => Ok(prefix),
            Tail::Rbf { centers, gamma } => {
                let tail = g.leaf(Self::rbf_rows(&self.tail_input(x), centers, *gamma));
                g.concat_cols(&[prefix, tail])
            }
            Tail::Network { spec, params } => {
                let theta = match theta {
                    Some(t) => t,
                    None => g.row(params),
                };
                let input = g.leaf(self.tail_input(x));
                let tail = forward_graph(spec, g, theta, input)?;
                g.concat_cols(&[prefix, tail])
            }
        }
    }

    /// Lifts the rows of `x`: result is `rows x N_psi`.
    pub fn lift_rows(&self, x: &Mat) -> Result<Mat> {
        self.check_rows(x)?;
        let prefix = self.prefix_rows(x);
        let tail = match &self.tail {
            Tail::None => return Ok(prefix),
            Tail::Rbf { centers, gamma } => Self::rbf_rows(&self.tail_input(x), centers, *gamma),
            Tail::Network { spec, params } => forward_batch(spec, params, &self.tail_input(x))?,
        };
        let mut out = Mat::zeros(x.nrows(), self.n_psi());
        out.columns_mut(0, prefix.ncols()).copy_from(&prefix);
        out.columns_mut(prefix.ncols(), tail.ncols()).copy_from(&tail);
        Ok(out)
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        let psi = self.lift_rows(&Mat::from_row_slice(1, x.len(), x))?;
        let out: Vec<f64> = psi.iter().copied().collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dictionary output".into()));
        }
        Ok(out)
    }

    /// Columnwise lift: `N_psi x |xs|`.
    pub fn evaluate_batch(&self, xs: &[&[f64]]) -> Result<Mat> {
        if xs.iter().any(|x| x.len() != self.state_dim) {
            return Err(Error::Dimension(format!("dictionary expects states of length {}", self.state_dim)));
        }
        let rows = Mat::from_fn(xs.len(), self.state_dim, |b, j| xs[b][j]);
        Ok(self.lift_rows(&rows)?.transpose())
    }
}

/// Stacks states as the rows of a matrix.
pub fn rows_of(xs: &[&[f64]]) -> Mat {
    let dim = xs.first().map_or(0, |x| x.len());
    Mat::from_fn(xs.len(), dim, |b, j| xs[b][j])
}
