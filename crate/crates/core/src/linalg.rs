//! Dense least squares and rank utilities (backed by nalgebra).

use nalgebra::{Cholesky, DMatrix, QR};

use crate::error::{Error, Result};
use crate::nn::Mat;

/// Conditioning estimate above which the normal equations are abandoned for QR.
pub const QR_FALLBACK_COND: f64 = 1e12;

/// Solves `min_W ||F W - T||_F^2 + ridge ||W||_F^2` for `W` (`m x d`), where
/// `F` is `samples x m` and `T` is `samples x d`.
///
/// Uses a Cholesky solve of `F^T F + ridge I` with one step of iterative
/// refinement; falls back to a QR solve of the stacked system
/// `[F; sqrt(ridge) I]` when the Cholesky factor suggests a condition number
/// above [`QR_FALLBACK_COND`].
pub fn ridge_lstsq(features: &Mat, targets: &Mat, ridge: f64) -> Result<Mat> {
    if features.nrows() != targets.nrows() {
        return Err(Error::Dimension(format!(
            "least squares with {} feature rows and {} target rows",
            features.nrows(),
            targets.nrows()
        )));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Invalid(format!("ridge must be >= 0, got {ridge}")));
    }
    if features.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("least-squares data".into()));
    }
    let m = features.ncols();
    let mut gram = features.transpose() * features;
    for i in 0..m {
        gram[(i, i)] += ridge;
    }
    let rhs = features.transpose() * targets;
    if let Some(chol) = Cholesky::new(gram.clone()) {
        let l = chol.l_dirty();
        let diag: Vec<f64> = (0..m).map(|i| l[(i, i)].abs()).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if min > 0.0 && (max / min).powi(2) <= QR_FALLBACK_COND {
            let mut w = chol.solve(&rhs);
            // one refinement step with the residual taken from F itself; the
            // formed Gram matrix has already rounded away part of a small ridge
            let residual = features.transpose() * (targets - features * &w) - &w * ridge;
            w += chol.solve(&residual);
            return Ok(w);
        }
    }
    qr_solve(features, targets, ridge)
}

fn qr_solve(features: &Mat, targets: &Mat, ridge: f64) -> Result<Mat> {
    let (p, m) = features.shape();
    let d = targets.ncols();
    let rows = if ridge > 0.0 { p + m } else { p };
    if rows < m {
        return Err(Error::SingularGram(format!("{p} samples for {m} features and no ridge")));
    }
    let mut a = DMatrix::zeros(rows, m);
    a.view_mut((0, 0), (p, m)).copy_from(features);
    let mut b = DMatrix::zeros(rows, d);
    b.view_mut((0, 0), (p, d)).copy_from(targets);
    if ridge > 0.0 {
        let s = ridge.sqrt();
        for i in 0..m {
            a[(p + i, i)] = s;
        }
    }
    let qr = QR::new(a);
    let r = qr.r();
    let scale = (0..m).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..m).any(|i| r[(i, i)].abs() <= scale * 1e-14) {
        return Err(Error::SingularGram(format!("rank-deficient {rows} x {m} system")));
    }
    let qtb = qr.q().transpose() * b;
    r.solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::SingularGram("triangular solve failed".into()))
}

/// Singular values in descending order.
pub fn singular_values(a: &Mat) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Number of singular values strictly above `rel_threshold * sigma_1`.
pub fn numerical_rank(singular: &[f64], rel_threshold: f64) -> usize {
    match singular.first() {
        Some(&top) if top > 0.0 => singular.iter().filter(|&&s| s > rel_threshold * top).count(),
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit() {
        let f = Mat::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let t = Mat::from_row_slice(3, 1, &[1.0, 3.0, 5.0]);
        let w = ridge_lstsq(&f, &t, 0.0).unwrap();
        assert!((w[(0, 0)] - 1.0).abs() < 1e-12 && (w[(1, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn singular_without_ridge() {
        let f = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let t = Mat::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(matches!(ridge_lstsq(&f, &t, 0.0), Err(Error::SingularGram(_))));
        assert!(ridge_lstsq(&f, &t, 1e-6).is_ok());
    }

    #[test]
    fn ill_conditioned_takes_qr_path() {
        // columns nearly collinear: cond(F^T F) ~ 1e16, but F itself is fine for QR
        let eps = 1e-8;
        let f = Mat::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0 + eps, 1.0, 1.0 - eps]);
        let t = Mat::from_row_slice(3, 1, &[2.0, 2.0 + 3.0 * eps, 2.0 - 3.0 * eps]);
        let w = ridge_lstsq(&f, &t, 0.0).unwrap();
        assert!((w[(0, 0)] + 1.0).abs() < 1e-6 && (w[(1, 0)] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn rank_counts() {
        let a = Mat::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0]);
        let s = singular_values(&a);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(numerical_rank(&s, 1e-6), 2);
        assert_eq!(numerical_rank(&[0.0, 0.0], 1e-6), 0);
    }
}
