//! Multi-step prediction and relative error metrics.

use rayon::prelude::*;

use crate::dictionary::Dictionary;
use crate::dynamics::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::koopman::OperatorModel;

/// Predicts `y_1..y_N` from `x0` under `params` (one slice per step).
///
/// Plain mode propagates the lift: `psi_{n+1} = K(u_n) psi_n`. With
/// `resubstitute`, each predicted observable (which must be the full state)
/// is lifted again before the next step.
pub fn rollout(
    dict: &Dictionary,
    model: &OperatorModel,
    x0: &[f64],
    params: &[&[f64]],
    resubstitute: bool,
) -> Result<Vec<Vec<f64>>> {
    if resubstitute && !dict.observable.is_full_state() {
        return Err(Error::Invalid("resubstitution needs the full state as observable".into()));
    }
    let selector = dict.selector()?;
    let mut psi = dict.evaluate(x0)?;
    let mut out = Vec::with_capacity(params.len());
    for (n, u) in params.iter().enumerate() {
        psi = model.apply(u, &psi)?;
        let y = selector.apply(&psi);
        if y.iter().chain(&psi).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("lifted rollout at step {}", n + 1)));
        }
        if resubstitute {
            psi = dict.evaluate(&y)?;
        }
        out.push(y);
    }
    Ok(out)
}

/// `E(t_n) = sqrt(sum_{i<=n} |yhat_i - y_i|^2) / sqrt(sum_{i<=n} |y_i|^2)`.
pub fn relative_error(truth: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<Vec<f64>> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::Dimension(format!(
            "relative error needs equal non-empty sequences, got {} and {}",
            truth.len(),
            pred.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut out = Vec::with_capacity(truth.len());
    for (n, (y, yh)) in truth.iter().zip(pred).enumerate() {
        if y.len() != yh.len() {
            return Err(Error::Dimension(format!("step {n}: lengths {} and {}", y.len(), yh.len())));
        }
        num += y.iter().zip(yh).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        den += y.iter().map(|a| a * a).sum::<f64>();
        if den == 0.0 {
            return Err(Error::Invalid(format!("truth is identically zero up to step {}", n + 1)));
        }
        out.push((num / den).sqrt());
    }
    Ok(out)
}

/// Per-step mean and sample standard deviation across curves of equal length.
pub fn mean_and_std(curves: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let Some(len) = curves.first().map(Vec::len) else {
        return (Vec::new(), Vec::new());
    };
    let m = curves.len() as f64;
    let mean: Vec<f64> = (0..len).map(|n| curves.iter().map(|c| c[n]).sum::<f64>() / m).collect();
    let std = (0..len)
        .map(|n| {
            if curves.len() < 2 {
                return 0.0;
            }
            let s: f64 = curves.iter().map(|c| (c[n] - mean[n]).powi(2)).sum();
            (s / (m - 1.0)).sqrt()
        })
        .collect();
    (mean, std)
}

/// A model to be scored.
#[derive(Debug, Clone)]
pub enum Predictor {
    Single { dict: Dictionary, model: OperatorModel },
    /// Constant-operator models trained at individual parameter values; the
    /// one whose parameter is nearest (Euclidean) to a test trajectory's
    /// first parameter is used.
    NearestNeighbour { bank: Vec<(Vec<f64>, Dictionary, OperatorModel)> },
}

impl Predictor {
    pub fn select(&self, u: &[f64]) -> Result<(&Dictionary, &OperatorModel)> {
        match self {
            Predictor::Single { dict, model } => Ok((dict, model)),
            Predictor::NearestNeighbour { bank } => nearest(bank, u).map(|i| (&bank[i].1, &bank[i].2)),
        }
    }
}

/// Index of the bank entry whose parameter is closest to `u`.
pub fn nearest<T, U>(bank: &[(Vec<f64>, T, U)], u: &[f64]) -> Result<usize> {
    bank.iter()
        .enumerate()
        .map(|(i, (p, _, _))| (i, p.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Invalid("empty nearest-neighbour bank".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    /// `E(t_n)` per test trajectory.
    pub per_trajectory: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SuiteRow {
    pub fn final_mean(&self) -> f64 {
        self.mean.last().copied().unwrap_or(f64::NAN)
    }
}

/// Error curves of one predictor on every trajectory of `test`.
pub fn evaluate_predictor(predictor: &Predictor, test: &TrajectoryDataset, resubstitute: bool) -> Result<Vec<Vec<f64>>> {
    if test.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    (0..test.len())
        .into_par_iter()
        .map(|m| {
            let n_steps = test.n_steps(m);
            let (dict, model) = predictor.select(test.param(m, 0))?;
            let params: Vec<&[f64]> = (0..n_steps).map(|n| test.param(m, n)).collect();
            let pred = rollout(dict, model, test.state(m, 0), &params, resubstitute)?;
            let truth: Vec<Vec<f64>> = (1..=n_steps).map(|n| dict.observable.eval(test.state(m, n))).collect();
            relative_error(&truth, &pred)
        })
        .collect()
}

/// One row per named predictor with its mean and spread of `E(t_n)`.
pub fn evaluate_suite(predictors: &[(String, Predictor)], test: &TrajectoryDataset, resubstitute: bool) -> Result<Vec<SuiteRow>> {
    predictors
        .iter()
        .map(|(name, p)| {
            let per_trajectory = evaluate_predictor(p, test, resubstitute)?;
            let (mean, std) = mean_and_std(&per_trajectory);
            Ok(SuiteRow { name: name.clone(), per_trajectory, mean, std })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::Observable;
    use crate::nn::Mat;

    #[test]
    fn metric_examples() {
        let y = vec![vec![1.0, 0.0]];
        assert_eq!(relative_error(&y, &y).unwrap(), vec![0.0]);
        assert_eq!(relative_error(&y, &[vec![0.0, 0.0]]).unwrap(), vec![1.0]);
        let y2 = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let p2 = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        let e = relative_error(&y2, &p2).unwrap();
        assert_eq!(e[0], 0.0);
        assert!((e[1] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(relative_error(&[vec![0.0]], &[vec![1.0]]).is_err());
        assert!(relative_error(&[], &[]).is_err());
    }

    #[test]
    fn identity_rollout_is_constant() {
        let dict = Dictionary::plain(2, Observable::Identity);
        let model = OperatorModel::identity(3);
        let p: Vec<&[f64]> = vec![&[]; 4];
        let out = rollout(&dict, &model, &[0.3, -0.4], &p, false).unwrap();
        assert!(out.iter().all(|y| y == &vec![0.3, -0.4]));
        assert!(rollout(&dict, &model, &[0.3, -0.4], &[], true).unwrap().is_empty());
    }

    #[test]
    fn exact_linear_rollout() {
        let dict = Dictionary::plain(1, Observable::Identity);
        let model = OperatorModel::constant(&Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.9])).unwrap();
        let p: Vec<&[f64]> = vec![&[]; 50];
        for resub in [false, true] {
            let out = rollout(&dict, &model, &[1.5], &p, resub).unwrap();
            for (n, y) in out.iter().enumerate() {
                assert!((y[0] - 1.5 * 0.9f64.powi(n as i32 + 1)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn resubstitution_needs_full_state() {
        let dict = Dictionary::plain(4, Observable::KdvMassMomentum);
        let model = OperatorModel::identity(3);
        assert!(rollout(&dict, &model, &[0.1; 4], &[&[]], true).is_err());
    }

    #[test]
    fn nearest_neighbour_pick() {
        let bank = vec![(vec![0.0, 0.0], (), ()), (vec![1.0, 1.0], (), ()), (vec![0.2, 0.9], (), ())];
        assert_eq!(nearest(&bank, &[0.3, 0.8]).unwrap(), 2);
        assert_eq!(nearest(&bank, &[-1.0, 0.0]).unwrap(), 0);
    }

    #[test]
    fn spread() {
        let (m, s) = mean_and_std(&[vec![1.0, 2.0], vec![3.0, 2.0]]);
        assert_eq!(m, vec![2.0, 2.0]);
        assert!((s[0] - 2f64.sqrt()).abs() < 1e-15 && s[1] == 0.0);
    }
}
