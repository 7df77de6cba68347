//! Explicit Runge–Kutta steppers with the parameter held constant over a step.

use crate::error::{Error, Result};

/// Classical four-stage Runge–Kutta step of size `dt`.
pub fn rk4_step<F>(rhs: &F, x: &[f64], dt: f64) -> Vec<f64>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    rhs(x, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    rhs(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    rhs(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    rhs(&tmp, &mut k4);
    (0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// `substeps` RK4 steps covering `dt`.
pub fn rk4_advance<F>(rhs: &F, x: &[f64], dt: f64, substeps: usize) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]),
{
    if !(dt > 0.0) || substeps == 0 {
        return Err(Error::Invalid(format!("rk4 needs dt > 0 and substeps >= 1, got {dt}, {substeps}")));
    }
    let h = dt / substeps as f64;
    let mut y = x.to_vec();
    for _ in 0..substeps {
        y = rk4_step(rhs, &y, h);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rk4 state".into()));
    }
    Ok(y)
}

/// Adaptive Bogacki–Shampine 3(2) integration over exactly `dt`.
///
/// The embedded error estimate of every accepted substep satisfies
/// `|e_i| <= tol * (1 + |y_i|)` componentwise. `h_hint` carries the last
/// accepted substep size between calls; pass `None` to start from `dt`.
pub fn rk23_advance<F>(rhs: &F, x: &[f64], dt: f64, tol: f64, h_hint: &mut Option<f64>) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]),
{
    if !(tol > 0.0) || !(dt > 0.0) {
        return Err(Error::Invalid(format!("rk23 needs dt > 0 and tol > 0, got {dt}, {tol}")));
    }
    let n = x.len();
    let mut y = x.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut y3 = vec![0.0; n];
    rhs(&y, &mut k1);

    let h_min = dt * 1e-12;
    let mut h = h_hint.unwrap_or(dt).min(dt);
    let mut t = 0.0;
    while t < dt {
        let last = t + h >= dt * (1.0 - 1e-14);
        let hs = if last { dt - t } else { h };
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * hs * k1[i];
        }
        rhs(&tmp, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + 0.75 * hs * k2[i];
        }
        rhs(&tmp, &mut k3);
        for i in 0..n {
            y3[i] = y[i] + hs * (2.0 / 9.0 * k1[i] + 1.0 / 3.0 * k2[i] + 4.0 / 9.0 * k3[i]);
        }
        rhs(&y3, &mut k4);
        let mut err = 0.0f64;
        for i in 0..n {
            let e = hs
                * (-5.0 / 72.0 * k1[i] + 1.0 / 12.0 * k2[i] + 1.0 / 9.0 * k3[i] - 1.0 / 8.0 * k4[i]);
            err = err.max(e.abs() / (tol * (1.0 + y3[i].abs().max(y[i].abs()))));
        }
        if !err.is_finite() {
            err = f64::INFINITY;
        }
        if err <= 1.0 {
            t = if last { dt } else { t + hs };
            std::mem::swap(&mut y, &mut y3);
            // FSAL: the last stage is the next first stage
            std::mem::swap(&mut k1, &mut k4);
            if !last {
                h = hs;
            }
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-1.0 / 3.0)).clamp(0.2, 5.0) };
        if err <= 1.0 {
            if !last {
                h = (hs * factor).min(dt);
                *h_hint = Some(h);
            }
        } else {
            h = hs * factor;
            if h < h_min {
                return Err(Error::StepUnderflow { t });
            }
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rk23 state".into()));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rhs_is_identity() {
        let zero = |_: &[f64], d: &mut [f64]| d.fill(0.0);
        let x = [0.3, -1.5];
        assert_eq!(rk4_advance(&zero, &x, 0.1, 3).unwrap(), x.to_vec());
        assert_eq!(rk23_advance(&zero, &x, 0.1, 1e-8, &mut None).unwrap(), x.to_vec());
    }

    #[test]
    fn rk23_exponential_decay() {
        let decay = |x: &[f64], d: &mut [f64]| d[0] = -x[0];
        for tol in [1e-6, 1e-9] {
            let y = rk23_advance(&decay, &[1.0], 0.01, tol, &mut None).unwrap();
            assert!((y[0] - (-0.01f64).exp()).abs() < tol);
        }
        let y = rk23_advance(&decay, &[1.0], 2.0, 1e-9, &mut None).unwrap();
        assert!((y[0] - (-2.0f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn rk23_stiff_enough_to_need_substeps() {
        let fast = |x: &[f64], d: &mut [f64]| {
            d[0] = -500.0 * x[1];
            d[1] = 500.0 * x[0];
        };
        let mut hint = None;
        let y = rk23_advance(&fast, &[1.0, 0.0], 0.01, 1e-8, &mut hint).unwrap();
        assert!((y[0] - 5f64.cos()).abs() < 1e-5 && (y[1] - 5f64.sin()).abs() < 1e-5);
        assert!(hint.unwrap() < 0.01);
    }
}
