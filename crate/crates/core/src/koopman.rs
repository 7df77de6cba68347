//! Parametric lifted evolution models `u -> K(u)`.
//!
//! Every variant keeps its trainable entries in one flat vector `theta` so the
//! training and control code can treat them uniformly. Matrices inside
//! `theta` are stored row-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward, forward_graph, init_params, Graph, Mat, NetworkSpec, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorKind {
    /// A single matrix `K`.
    Constant,
    /// `psi' = A psi + B u`; `theta = [A, B]`.
    AffineControl,
    /// `K(u) = A + sum_i u_i B_i`; `theta = [A, B_1, ..., B_{N_u}]`.
    Bilinear,
    /// `K(u) = sum_i h_i(u) K_i` over monomials up to `degree`.
    Poly { degree: usize },
    /// Network output reshaped row-major into `K(u)`, optionally below a
    /// fixed first row `(1, 0, ..., 0)`.
    Network { spec: NetworkSpec, fixed_first_row: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorModel {
    pub n_psi: usize,
    pub n_u: usize,
    pub kind: OperatorKind,
    pub theta: Vec<f64>,
}

/// `(K(u) - I) / dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSample {
    pub matrix: Mat,
    pub dt: f64,
}

/// Exponent tuples of all monomials in `n_u` variables of total degree at
/// most `max_degree`, graded by degree and lexicographic within a degree.
/// Each tuple is listed as the variable indices it multiplies (with repeats).
pub fn monomial_terms(n_u: usize, max_degree: usize) -> Vec<Vec<usize>> {
    let mut terms = vec![Vec::new()];
    let mut last: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..max_degree {
        let mut next = Vec::new();
        for t in &last {
            let start = t.last().copied().unwrap_or(0);
            for i in start..n_u {
                let mut e = t.clone();
                e.push(i);
                next.push(e);
            }
        }
        terms.extend(next.iter().cloned());
        last = next;
    }
    terms
}

pub fn monomials(u: &[f64], max_degree: usize) -> Vec<f64> {
    monomial_terms(u.len(), max_degree)
        .iter()
        .map(|t| t.iter().map(|&i| u[i]).product())
        .collect()
}

/// `C(n_u + degree, degree)`.
pub fn n_monomials(n_u: usize, max_degree: usize) -> usize {
    (1..=max_degree).fold(1usize, |acc, k| acc * (n_u + k) / k)
}

fn monomials_graph(g: &mut Graph, u: Var, max_degree: usize) -> Result<Var> {
    let (rows, n_u) = g.value(u).shape();
    let ones = g.leaf(Mat::from_element(rows, 1, 1.0));
    let cols: Vec<Var> = (0..n_u).map(|i| g.slice_cols(u, i, i + 1)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for t in monomial_terms(n_u, max_degree) {
        let mut acc = ones;
        for (k, &i) in t.iter().enumerate() {
            acc = if k == 0 { cols[i] } else { g.mul(acc, cols[i])? };
        }
        out.push(acc);
    }
    g.concat_cols(&out)
}

fn identity_flat(n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    v
}

impl OperatorModel {
    pub fn constant(k: &Mat) -> Result<Self> {
        if k.nrows() != k.ncols() {
            return Err(Error::Dimension(format!("K must be square, got {:?}", k.shape())));
        }
        let n = k.nrows();
        Ok(Self { n_psi: n, n_u: 0, kind: OperatorKind::Constant, theta: row_major(k) })
    }

    pub fn identity(n_psi: usize) -> Self {
        Self { n_psi, n_u: 0, kind: OperatorKind::Constant, theta: identity_flat(n_psi) }
    }

    pub fn affine_control(a: &Mat, b: &Mat) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n {
            return Err(Error::Dimension(format!("A {:?} and B {:?}", a.shape(), b.shape())));
        }
        let mut theta = row_major(a);
        theta.extend(row_major(b));
        Ok(Self { n_psi: n, n_u: b.ncols(), kind: OperatorKind::AffineControl, theta })
    }

    pub fn bilinear(a: &Mat, bs: &[Mat]) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || bs.iter().any(|b| b.shape() != (n, n)) {
            return Err(Error::Dimension("bilinear blocks must be square and equal".into()));
        }
        let mut theta = row_major(a);
        for b in bs {
            theta.extend(row_major(b));
        }
        Ok(Self { n_psi: n, n_u: bs.len(), kind: OperatorKind::Bilinear, theta })
    }

    pub fn poly(n_u: usize, degree: usize, ks: &[Mat]) -> Result<Self> {
        let n = ks.first().map_or(0, |k| k.nrows());
        if ks.len() != n_monomials(n_u, degree) || ks.iter().any(|k| k.shape() != (n, n)) {
            return Err(Error::Dimension(format!(
                "poly model needs {} square blocks, got {}",
                n_monomials(n_u, degree),
                ks.len()
            )));
        }
        let theta = ks.iter().flat_map(row_major).collect();
        Ok(Self { n_psi: n, n_u, kind: OperatorKind::Poly { degree }, theta })
    }

    /// Untrained parametric models with `K(u) = I` (affine: `A = I, B = 0`).
    pub fn identity_of_kind(kind: OperatorKind, n_psi: usize, n_u: usize) -> Result<Self> {
        let n2 = n_psi * n_psi;
        let theta = match &kind {
            OperatorKind::Constant => identity_flat(n_psi),
            OperatorKind::AffineControl => {
                let mut t = identity_flat(n_psi);
                t.extend(vec![0.0; n_psi * n_u]);
                t
            }
            OperatorKind::Bilinear => {
                let mut t = identity_flat(n_psi);
                t.extend(vec![0.0; n2 * n_u]);
                t
            }
            OperatorKind::Poly { degree } => {
                let mut t = identity_flat(n_psi);
                t.extend(vec![0.0; n2 * (n_monomials(n_u, *degree) - 1)]);
                t
            }
            OperatorKind::Network { .. } => {
                return Err(Error::Invalid("network models are initialized with OperatorModel::network".into()))
            }
        };
        Ok(Self { n_psi, n_u, kind, theta })
    }

    /// Glorot-initialized network model; `hidden` widths end with `N_K - 1`.
    pub fn network(n_psi: usize, n_u: usize, hidden: Vec<usize>, fixed_first_row: bool, seed: u64) -> Result<Self> {
        let rows = if fixed_first_row { n_psi - 1 } else { n_psi };
        if n_psi < 2 && fixed_first_row {
            return Err(Error::Invalid("fixed first row needs N_psi >= 2".into()));
        }
        let spec = NetworkSpec::new(n_u, hidden, rows * n_psi);
        let theta = init_params(&spec, seed)?;
        Ok(Self { n_psi, n_u, kind: OperatorKind::Network { spec, fixed_first_row }, theta })
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn has_fixed_first_row(&self) -> bool {
        matches!(self.kind, OperatorKind::Network { fixed_first_row: true, .. })
    }

    fn expected_params(&self) -> usize {
        let n2 = self.n_psi * self.n_psi;
        match &self.kind {
            OperatorKind::Constant => n2,
            OperatorKind::AffineControl => n2 + self.n_psi * self.n_u,
            OperatorKind::Bilinear => n2 * (1 + self.n_u),
            OperatorKind::Poly { degree } => n2 * n_monomials(self.n_u, *degree),
            OperatorKind::Network { spec, .. } => spec.n_params(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != self.expected_params() {
            return Err(Error::Dimension(format!(
                "operator expects {} parameters, has {}",
                self.expected_params(),
                self.theta.len()
            )));
        }
        if let OperatorKind::Network { spec, fixed_first_row } = &self.kind {
            let rows = if *fixed_first_row { self.n_psi - 1 } else { self.n_psi };
            if spec.input_dim != self.n_u || spec.output_dim != rows * self.n_psi {
                return Err(Error::Dimension("network shape does not match the lift".into()));
            }
        }
        Ok(())
    }

    fn check_u(&self, u: &[f64]) -> Result<()> {
        let expected = if matches!(self.kind, OperatorKind::Constant) { u.len() } else { self.n_u };
        if u.len() != expected {
            return Err(Error::Dimension(format!("parameter of length {}, expected {}", u.len(), self.n_u)));
        }
        Ok(())
    }

    fn block(&self, i: usize) -> Mat {
        let n2 = self.n_psi * self.n_psi;
        Mat::from_row_slice(self.n_psi, self.n_psi, &self.theta[i * n2..(i + 1) * n2])
    }

    pub fn k_matrix(&self, u: &[f64]) -> Result<Mat> {
        self.check_u(u)?;
        let n = self.n_psi;
        match &self.kind {
            OperatorKind::Constant => Ok(self.block(0)),
            OperatorKind::AffineControl => Err(Error::AffineControl("k_matrix")),
            OperatorKind::Bilinear => {
                let mut k = self.block(0);
                for (i, ui) in u.iter().enumerate() {
                    k += self.block(i + 1) * *ui;
                }
                Ok(k)
            }
            OperatorKind::Poly { degree } => {
                let h = monomials(u, *degree);
                let mut k = Mat::zeros(n, n);
                for (i, hi) in h.iter().enumerate() {
                    k += self.block(i) * *hi;
                }
                Ok(k)
            }
            OperatorKind::Network { spec, fixed_first_row } => {
                let out = forward(spec, &self.theta, u)?;
                if *fixed_first_row {
                    let mut k = Mat::zeros(n, n);
                    k[(0, 0)] = 1.0;
                    for r in 1..n {
                        for c in 0..n {
                            k[(r, c)] = out[(r - 1) * n + c];
                        }
                    }
                    Ok(k)
                } else {
                    Ok(Mat::from_row_slice(n, n, &out))
                }
            }
        }
    }

    pub fn apply(&self, u: &[f64], psi: &[f64]) -> Result<Vec<f64>> {
        if psi.len() != self.n_psi {
            return Err(Error::Dimension(format!("lift of length {}, expected {}", psi.len(), self.n_psi)));
        }
        let p = nalgebra::DVector::from_column_slice(psi);
        let next = match self.kind {
            OperatorKind::AffineControl => {
                self.check_u(u)?;
                let n = self.n_psi;
                let a = self.block(0);
                let b = Mat::from_row_slice(n, self.n_u, &self.theta[n * n..]);
                a * p + b * nalgebra::DVector::from_column_slice(u)
            }
            _ => self.k_matrix(u)? * p,
        };
        Ok(next.iter().copied().collect())
    }

    pub fn generator(&self, u: &[f64], dt: f64) -> Result<GeneratorSample> {
        if !(dt > 0.0) {
            return Err(Error::Invalid(format!("generator needs dt > 0, got {dt}")));
        }
        let k = self.k_matrix(u)?;
        let n = self.n_psi;
        Ok(GeneratorSample { matrix: (k - Mat::identity(n, n)) / dt, dt })
    }

    /// Records one lifted step for every row: rows of `psi` (`B x N_psi`)
    /// advanced under the matching rows of `u` (`B x N_u`). `theta` is the
    /// `1 x n_params` parameter node.
    pub fn step_graph(&self, g: &mut Graph, theta: Var, psi: Var, u: Var) -> Result<Var> {
        let n = self.n_psi;
        let n2 = n * n;
        let (rows, cols) = g.value(psi).shape();
        if cols != n {
            return Err(Error::Dimension(format!("lift has {cols} columns, expected {n}")));
        }
        let u_shape = g.value(u).shape();
        if !matches!(self.kind, OperatorKind::Constant) && u_shape != (rows, self.n_u) {
            return Err(Error::Dimension(format!("parameter block {u_shape:?}, expected ({rows}, {})", self.n_u)));
        }
        match &self.kind {
            OperatorKind::Constant => {
                let k = g.reshape(theta, n, n)?;
                g.matmul_nt(psi, k)
            }
            OperatorKind::AffineControl => {
                let a_flat = g.slice_cols(theta, 0, n2)?;
                let a = g.reshape(a_flat, n, n)?;
                let b_flat = g.slice_cols(theta, n2, n2 + n * self.n_u)?;
                let b = g.reshape(b_flat, n, self.n_u)?;
                let lin = g.matmul_nt(psi, a)?;
                let ctl = g.matmul_nt(u, b)?;
                g.add(lin, ctl)
            }
            OperatorKind::Bilinear | OperatorKind::Poly { .. } => {
                let features = match &self.kind {
                    OperatorKind::Poly { degree } => monomials_graph(g, u, *degree)?,
                    _ => monomials_graph(g, u, 1)?,
                };
                let n_feat = g.value(features).ncols();
                let blocks = g.reshape(theta, n_feat, n2)?;
                let k_rows = g.matmul(features, blocks)?;
                g.batch_matvec(k_rows, psi, n)
            }
            OperatorKind::Network { spec, fixed_first_row } => {
                let out = forward_graph(spec, g, theta, u)?;
                if *fixed_first_row {
                    let rest = g.batch_matvec(out, psi, n - 1)?;
                    let first = g.slice_cols(psi, 0, 1)?;
                    g.concat_cols(&[first, rest])
                } else {
                    g.batch_matvec(out, psi, n)
                }
            }
        }
    }

    /// Batched lifted step outside a gradient computation.
    pub fn step_rows(&self, psi: &Mat, u: &Mat) -> Result<Mat> {
        let mut g = Graph::new();
        let theta = g.row(&self.theta);
        let p = g.leaf(psi.clone());
        let uu = g.leaf(u.clone());
        let out = self.step_graph(&mut g, theta, p, uu)?;
        Ok(g.value(out).clone())
    }
}

pub fn row_major(m: &Mat) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(n: usize, i: usize, j: usize) -> Mat {
        let mut m = Mat::zeros(n, n);
        m[(i, j)] = 1.0;
        m
    }

    #[test]
    fn monomial_ordering_and_counts() {
        assert_eq!(monomials(&[2.0], 3), vec![1.0, 2.0, 4.0, 8.0]);
        assert_eq!(n_monomials(3, 3), 20);
        assert_eq!(monomials(&[0.3, -0.2, 0.9], 3).len(), 20);
        let z = monomials(&[0.0, 0.0, 0.0], 3);
        assert_eq!(z[0], 1.0);
        assert!(z[1..].iter().all(|v| *v == 0.0));
        assert_eq!(monomials(&[2.0, 3.0], 2), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        assert_eq!(monomials(&[5.0], 0), vec![1.0]);
    }

    #[test]
    fn network_zero_params_fixed_row() {
        let mut m = OperatorModel::network(4, 2, vec![5], true, 0).unwrap();
        m.theta.fill(0.0);
        let k = m.k_matrix(&[0.3, -0.7]).unwrap();
        let mut expect = Mat::zeros(4, 4);
        expect[(0, 0)] = 1.0;
        assert_eq!(k, expect);
    }

    #[test]
    fn network_fixed_row_preserves_constant() {
        let m = OperatorModel::network(5, 1, vec![8], true, 3).unwrap();
        for u in [-1.0, 0.2, 0.9] {
            let next = m.apply(&[u], &[1.0, 0.3, -2.0, 0.5, 0.1]).unwrap();
            assert_eq!(next[0], 1.0);
            let k = m.k_matrix(&[u]).unwrap();
            assert_eq!(k.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
            let gen = m.generator(&[u], 0.01).unwrap();
            assert!(gen.matrix.row(0).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn poly_by_formula() {
        let ks: Vec<Mat> = (0..4).map(|i| Mat::from_element(2, 2, i as f64 + 1.0)).collect();
        let m = OperatorModel::poly(1, 3, &ks).unwrap();
        let k = m.k_matrix(&[2.0]).unwrap();
        let expect = &ks[0] + &ks[1] * 2.0 + &ks[2] * 4.0 + &ks[3] * 8.0;
        assert_eq!(k, expect);
    }

    #[test]
    fn bilinear_by_formula() {
        let a = Mat::identity(3, 3);
        let m = OperatorModel::bilinear(&a, &[e(3, 1, 0)]).unwrap();
        assert_eq!(m.k_matrix(&[0.5]).unwrap(), &a + e(3, 1, 0) * 0.5);
        assert_eq!(m.k_matrix(&[0.0]).unwrap(), a);
    }

    #[test]
    fn constant_identity_and_affine() {
        let m = OperatorModel::identity(3);
        assert_eq!(m.apply(&[], &[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let af = OperatorModel::affine_control(&Mat::zeros(2, 2), &Mat::identity(2, 2)).unwrap();
        assert_eq!(af.apply(&[3.0, 4.0], &[9.0, 9.0]).unwrap(), vec![3.0, 4.0]);
        assert!(matches!(af.k_matrix(&[0.0, 0.0]), Err(Error::AffineControl(_))));
        assert!(m.generator(&[], 0.1).unwrap().matrix.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn graph_step_matches_apply() {
        let models = vec![
            OperatorModel::network(4, 2, vec![6], true, 1).unwrap(),
            OperatorModel::network(4, 2, vec![6], false, 2).unwrap(),
            {
                let mut m = OperatorModel::identity_of_kind(OperatorKind::Poly { degree: 2 }, 4, 2).unwrap();
                m.theta.iter_mut().enumerate().for_each(|(i, v)| *v += (i as f64 * 0.37).sin());
                m
            },
            {
                let mut m = OperatorModel::identity_of_kind(OperatorKind::Bilinear, 4, 2).unwrap();
                m.theta.iter_mut().enumerate().for_each(|(i, v)| *v += (i as f64 * 0.11).cos());
                m
            },
            {
                let mut m = OperatorModel::identity_of_kind(OperatorKind::AffineControl, 4, 2).unwrap();
                m.theta.iter_mut().enumerate().for_each(|(i, v)| *v += 0.1 * i as f64);
                m
            },
        ];
        let psi = Mat::from_row_slice(2, 4, &[1.0, 0.5, -0.2, 0.3, 1.0, -1.0, 0.4, 0.0]);
        let u = Mat::from_row_slice(2, 2, &[0.3, -0.6, -0.9, 0.1]);
        for m in models {
            m.validate().unwrap();
            let batch = m.step_rows(&psi, &u).unwrap();
            for b in 0..2 {
                let p: Vec<f64> = psi.row(b).iter().copied().collect();
                let uu: Vec<f64> = u.row(b).iter().copied().collect();
                let single = m.apply(&uu, &p).unwrap();
                for i in 0..4 {
                    assert!((batch[(b, i)] - single[i]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn generator_recovers_exact_rate() {
        let dt = 0.125;
        let l = Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let k = Mat::identity(2, 2) + &l * dt;
        let m = OperatorModel::constant(&k).unwrap();
        assert_eq!(m.generator(&[], dt).unwrap().matrix, l);
    }
}
