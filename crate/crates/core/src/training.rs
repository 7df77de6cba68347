//! Fitting dictionaries and operator models.
//!
//! * [`edmd_fit`]: closed-form least squares of a constant `K` on a fixed dictionary.
//! * [`train_pknn`]: joint minibatch Adam on the dictionary network and the
//!   operator network.
//! * [`fit_alternating`]: least squares for the operator blocks alternating with
//!   Adam steps on the dictionary (constant, affine-control and bilinear models).
//! * [`fit_poly`]: polynomial parameter expansions, by least squares on a fixed
//!   dictionary or jointly with a trainable one.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::dynamics::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::koopman::{monomials, n_monomials, row_major, OperatorKind, OperatorModel};
use crate::linalg::ridge_lstsq;
use crate::nn::{AdamConfig, AdamState, Graph, Mat, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epochs without training-loss improvement before the rate is decayed.
    pub decay_patience: usize,
    pub decay_factor: f64,
    pub ridge: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Training stops once the epoch loss drops to this value.
    pub tol: f64,
    /// Adam steps on the dictionary between least-squares solves.
    pub inner_steps: usize,
    /// Epochs between checkpoint writes in the CLI driver (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 1000,
            learning_rate: 1e-3,
            decay_patience: 20,
            decay_factor: 0.8,
            ridge: 1e-8,
            validation_fraction: 0.1,
            seed: 0,
            tol: 1e-9,
            inner_steps: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Invalid(format!(
                "validation fraction must be in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.ridge >= 0.0) {
            return Err(Error::Invalid("learning rate must be > 0 and ridge >= 0".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Invalid(format!("decay factor must be in (0, 1], got {}", self.decay_factor)));
        }
        Ok(())
    }
}

/// Loss history of a fit. Losses are mean squared lifted residuals per
/// transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FitReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    /// Epoch (0-based) whose parameters were retained.
    pub best_epoch: Option<usize>,
    pub dict_params: Vec<f64>,
    pub operator_params: Vec<f64>,
}

impl FitReport {
    /// Equality of everything except wall-clock timings.
    pub fn same_outcome(&self, other: &FitReport) -> bool {
        self.train_loss == other.train_loss
            && self.val_loss == other.val_loss
            && self.best_epoch == other.best_epoch
            && self.dict_params == other.dict_params
            && self.operator_params == other.operator_params
    }
}

/// Transition triples stacked as matrix rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    pub x0: Mat,
    pub x1: Mat,
    pub u: Mat,
}

impl Transitions {
    pub fn from_dataset(ds: &TrajectoryDataset) -> Self {
        let idx = ds.transition_indices();
        let x0 = Mat::from_fn(idx.len(), ds.state_dim, |r, j| ds.state(idx[r].0, idx[r].1)[j]);
        let x1 = Mat::from_fn(idx.len(), ds.state_dim, |r, j| ds.state(idx[r].0, idx[r].1 + 1)[j]);
        let u = Mat::from_fn(idx.len(), ds.param_dim, |r, j| ds.param(idx[r].0, idx[r].1)[j]);
        Self { x0, x1, u }
    }

    pub fn len(&self) -> usize {
        self.x0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self { x0: self.x0.select_rows(rows), x1: self.x1.select_rows(rows), u: self.u.select_rows(rows) }
    }
}

/// Least-squares constant `K` on a fixed dictionary:
/// `K = (Psi_1 Psi_0^T)(Psi_0 Psi_0^T + ridge I)^{-1}`.
pub fn edmd_fit(data: &Transitions, dict: &Dictionary, ridge: f64) -> Result<OperatorModel> {
    if data.is_empty() {
        return Err(Error::Invalid("edmd needs at least one transition".into()));
    }
    let psi0 = dict.lift_rows(&data.x0)?;
    let psi1 = dict.lift_rows(&data.x1)?;
    let w = ridge_lstsq(&psi0, &psi1, ridge)?;
    OperatorModel::constant(&w.transpose())
}

/// Least squares for the operator blocks of `model` given lifted data.
/// The model keeps its kind; only `theta` changes.
pub fn fit_operator_ls(psi0: &Mat, psi1: &Mat, u: &Mat, model: &mut OperatorModel, ridge: f64) -> Result<()> {
    let n = model.n_psi;
    let p = psi0.nrows();
    if psi0.ncols() != n || psi1.ncols() != n {
        return Err(Error::Dimension(format!("lifted data has {} columns, model {}", psi0.ncols(), n)));
    }
    let theta = match &model.kind {
        OperatorKind::Constant => row_major(&ridge_lstsq(psi0, psi1, ridge)?.transpose()),
        OperatorKind::AffineControl => {
            let nu = model.n_u;
            let features = Mat::from_fn(p, n + nu, |r, c| if c < n { psi0[(r, c)] } else { u[(r, c - n)] });
            let w = ridge_lstsq(&features, psi1, ridge)?;
            let a = w.rows(0, n).transpose();
            let b = w.rows(n, nu).transpose();
            let mut t = row_major(&a);
            t.extend(row_major(&b));
            t
        }
        OperatorKind::Bilinear | OperatorKind::Poly { .. } => {
            let degree = match model.kind {
                OperatorKind::Poly { degree } => degree,
                _ => 1,
            };
            let n_feat = n_monomials(model.n_u, degree);
            let h: Vec<Vec<f64>> = (0..p)
                .map(|r| monomials(&u.row(r).iter().copied().collect::<Vec<_>>(), degree))
                .collect();
            let features = Mat::from_fn(p, n_feat * n, |r, c| h[r][c / n] * psi0[(r, c % n)]);
            let w = ridge_lstsq(&features, psi1, ridge)?;
            (0..n_feat).flat_map(|f| row_major(&w.rows(f * n, n).transpose())).collect()
        }
        OperatorKind::Network { .. } => {
            return Err(Error::Invalid("network operators have no least-squares fit".into()))
        }
    };
    model.theta = theta;
    Ok(())
}

fn loss_graph(
    g: &mut Graph,
    dict: &Dictionary,
    model: &OperatorModel,
    theta_psi: Option<Var>,
    theta_k: Var,
    batch: &Transitions,
) -> Result<Var> {
    let b = batch.len();
    let mut stacked = Mat::zeros(2 * b, batch.x0.ncols());
    stacked.rows_mut(0, b).copy_from(&batch.x0);
    stacked.rows_mut(b, b).copy_from(&batch.x1);
    let lifts = dict.lift_graph(g, theta_psi, &stacked)?;
    let psi0 = g.slice_rows(lifts, 0, b)?;
    let psi1 = g.slice_rows(lifts, b, 2 * b)?;
    let u = g.leaf(batch.u.clone());
    let pred = model.step_graph(g, theta_k, psi0, u)?;
    let r = g.sub(psi1, pred)?;
    Ok(g.sum_squares(r))
}

/// `sum_n ||Psi(x_{n+1}) - K(u_n) Psi(x_n)||^2` over the batch.
pub fn pk_loss(dict: &Dictionary, model: &OperatorModel, batch: &Transitions) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut g = Graph::new();
    let theta_k = g.row(&model.theta);
    let out = loss_graph(&mut g, dict, model, None, theta_k, batch)?;
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(v)
}

/// Value and gradients `(d/d theta_psi, d/d theta_K)` of [`pk_loss`].
pub fn pk_loss_grad(dict: &Dictionary, model: &OperatorModel, batch: &Transitions) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let theta_psi = if dict.is_trainable() { Some(g.row(dict.params())) } else { None };
    let theta_k = g.row(&model.theta);
    let out = loss_graph(&mut g, dict, model, theta_psi, theta_k, batch)?;
    let mut wrt = vec![theta_k];
    wrt.extend(theta_psi);
    let grads = g.gradients(out, &wrt)?;
    let flat = |m: &Mat| m.iter().copied().collect::<Vec<f64>>();
    let gk = flat(&grads[0]);
    let gpsi = grads.get(1).map(flat).unwrap_or_default();
    Ok((g.scalar(out), gpsi, gk))
}

/// Mean per-transition loss, evaluated in chunks.
pub fn mean_loss(dict: &Dictionary, model: &OperatorModel, data: &Transitions) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let chunk = 4096;
    let mut total = 0.0;
    for start in (0..data.len()).step_by(chunk) {
        let rows: Vec<usize> = (start..(start + chunk).min(data.len())).collect();
        total += pk_loss(dict, model, &data.select(&rows))?;
    }
    Ok(total / data.len() as f64)
}

/// Which parameter blocks an Adam phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Blocks {
    Both,
    DictOnly,
}

struct AdamDriver {
    state: AdamState,
    rng: ChaCha8Rng,
    best_train: f64,
    stale: usize,
}

impl AdamDriver {
    fn new(n: usize, cfg: &TrainingConfig) -> Self {
        let adam = AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() };
        Self {
            state: AdamState::new(n, adam),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            best_train: f64::INFINITY,
            stale: 0,
        }
    }

    /// One minibatch step; returns the batch's mean loss.
    fn step(&mut self, dict: &mut Dictionary, model: &mut OperatorModel, batch: &Transitions, blocks: Blocks) -> Result<f64> {
        let (loss, gpsi, gk) = pk_loss_grad(dict, model, batch)?;
        let scale = 1.0 / batch.len() as f64;
        let mut params: Vec<f64> = Vec::new();
        let mut grads: Vec<f64> = Vec::new();
        if blocks == Blocks::Both {
            params.extend(&model.theta);
            grads.extend(gk.iter().map(|v| v * scale));
        }
        params.extend(dict.params());
        grads.extend(gpsi.iter().map(|v| v * scale));
        if grads.iter().any(|v| !v.is_finite()) {
            return Ok(f64::NAN);
        }
        self.state.update(&mut params, &grads);
        let nk = if blocks == Blocks::Both { model.theta.len() } else { 0 };
        if blocks == Blocks::Both {
            model.theta.copy_from_slice(&params[..nk]);
        }
        dict.set_params(&params[nk..])?;
        Ok(loss * scale)
    }

    fn shuffled(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.rng);
        idx
    }

    /// Decays the learning rate after `patience` epochs without improvement.
    fn end_epoch(&mut self, train_loss: f64, cfg: &TrainingConfig) {
        if train_loss < self.best_train {
            self.best_train = train_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if cfg.decay_patience > 0 && self.stale >= cfg.decay_patience {
                self.state.config.learning_rate *= cfg.decay_factor;
                self.stale = 0;
            }
        }
    }
}

fn n_adam_params(dict: &Dictionary, model: &OperatorModel, blocks: Blocks) -> usize {
    dict.params().len() + if blocks == Blocks::Both { model.theta.len() } else { 0 }
}

struct Best {
    score: f64,
    epoch: Option<usize>,
    dict: Vec<f64>,
    theta: Vec<f64>,
}

impl Best {
    fn new(dict: &Dictionary, model: &OperatorModel) -> Self {
        Self { score: f64::INFINITY, epoch: None, dict: dict.params().to_vec(), theta: model.theta.clone() }
    }

    fn offer(&mut self, score: f64, epoch: usize, dict: &Dictionary, model: &OperatorModel) {
        if score < self.score {
            self.score = score;
            self.epoch = Some(epoch);
            self.dict = dict.params().to_vec();
            self.theta = model.theta.clone();
        }
    }

    fn restore(&self, dict: &mut Dictionary, model: &mut OperatorModel) -> Result<()> {
        dict.set_params(&self.dict)?;
        model.theta = self.theta.clone();
        Ok(())
    }
}

fn finish(report: &mut FitReport, dict: &Dictionary, model: &OperatorModel, best: &Best) {
    report.best_epoch = best.epoch;
    report.dict_params = dict.params().to_vec();
    report.operator_params = model.theta.clone();
}

/// Joint minibatch Adam on the operator and (when trainable) the dictionary.
/// Parameters with the lowest validation loss (training loss if `val` is
/// empty) are retained.
pub fn train_joint(
    train: &Transitions,
    val: &Transitions,
    dict: &mut Dictionary,
    model: &mut OperatorModel,
    cfg: &TrainingConfig,
) -> Result<FitReport> {
    cfg.validate()?;
    model.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("no training transitions".into()));
    }
    let mut report = FitReport::default();
    let mut best = Best::new(dict, model);
    let mut driver = AdamDriver::new(n_adam_params(dict, model, Blocks::Both), cfg);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let order = driver.shuffled(train.len());
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.select(chunk);
            let l = driver.step(dict, model, &batch, Blocks::Both)?;
            if !l.is_finite() {
                report.train_loss.push(l);
                finish(&mut report, dict, model, &best);
                return Err(Error::Diverged { epoch, report: Box::new(report) });
            }
            total += l * chunk.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if val.is_empty() { train_loss } else { mean_loss(dict, model, val).unwrap_or(f64::NAN) };
        report.train_loss.push(train_loss);
        if !val.is_empty() {
            report.val_loss.push(val_loss);
        }
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        if !train_loss.is_finite() || !val_loss.is_finite() {
            finish(&mut report, dict, model, &best);
            return Err(Error::Diverged { epoch, report: Box::new(report) });
        }
        best.offer(val_loss, epoch, dict, model);
        driver.end_epoch(train_loss, cfg);
        if train_loss <= cfg.tol {
            break;
        }
    }
    best.restore(dict, model)?;
    finish(&mut report, dict, model, &best);
    Ok(report)
}

/// Parametric Koopman training: trainable dictionary and network operator.
pub fn train_pknn(
    train: &Transitions,
    val: &Transitions,
    dict: &mut Dictionary,
    model: &mut OperatorModel,
    cfg: &TrainingConfig,
) -> Result<FitReport> {
    if !dict.is_trainable() || !matches!(model.kind, OperatorKind::Network { .. }) {
        return Err(Error::Invalid("train_pknn needs a trainable dictionary and a network operator".into()));
    }
    train_joint(train, val, dict, model, cfg)
}

/// Alternates a least-squares solve for the operator blocks with
/// `cfg.inner_steps` Adam minibatch steps on the dictionary, for `cfg.epochs`
/// rounds. With a fixed dictionary a single least-squares solve is made.
/// Recorded losses are measured right after each least-squares solve.
pub fn fit_alternating(
    train: &Transitions,
    val: &Transitions,
    dict: &mut Dictionary,
    model: &mut OperatorModel,
    cfg: &TrainingConfig,
) -> Result<FitReport> {
    cfg.validate()?;
    if matches!(model.kind, OperatorKind::Network { .. }) {
        return Err(Error::Invalid("alternating fit needs a least-squares operator".into()));
    }
    if train.is_empty() {
        return Err(Error::Invalid("no training transitions".into()));
    }
    let rounds = if dict.is_trainable() { cfg.epochs.max(1) } else { 1 };
    let mut report = FitReport::default();
    let mut best = Best::new(dict, model);
    let mut driver = AdamDriver::new(n_adam_params(dict, model, Blocks::DictOnly), cfg);
    let mut cursor = Vec::new();
    for round in 0..rounds {
        let started = Instant::now();
        let psi0 = dict.lift_rows(&train.x0)?;
        let psi1 = dict.lift_rows(&train.x1)?;
        fit_operator_ls(&psi0, &psi1, &train.u, model, cfg.ridge)?;
        let train_loss = mean_loss(dict, model, train)?;
        let val_loss = if val.is_empty() { train_loss } else { mean_loss(dict, model, val)? };
        report.train_loss.push(train_loss);
        if !val.is_empty() {
            report.val_loss.push(val_loss);
        }
        best.offer(val_loss, round, dict, model);
        if dict.is_trainable() && round + 1 < rounds {
            for _ in 0..cfg.inner_steps {
                if cursor.is_empty() {
                    cursor = driver.shuffled(train.len());
                    cursor.reverse();
                }
                let take = cfg.batch_size.min(cursor.len());
                let rows: Vec<usize> = cursor.split_off(cursor.len() - take);
                let l = driver.step(dict, model, &train.select(&rows), Blocks::DictOnly)?;
                if !l.is_finite() {
                    finish(&mut report, dict, model, &best);
                    return Err(Error::Diverged { epoch: round, report: Box::new(report) });
                }
            }
            driver.end_epoch(train_loss, cfg);
        }
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        if train_loss <= cfg.tol {
            break;
        }
    }
    best.restore(dict, model)?;
    finish(&mut report, dict, model, &best);
    Ok(report)
}

/// Polynomial parameter expansion. Fixed dictionary: one least-squares solve
/// over the features `monomials(u) (x) Psi(x)`. Trainable dictionary: that
/// solve initializes the blocks, then both are trained jointly with Adam.
pub fn fit_poly(
    train: &Transitions,
    val: &Transitions,
    dict: &mut Dictionary,
    model: &mut OperatorModel,
    cfg: &TrainingConfig,
) -> Result<FitReport> {
    if !matches!(model.kind, OperatorKind::Poly { .. }) {
        return Err(Error::Invalid("fit_poly needs a polynomial operator".into()));
    }
    cfg.validate()?;
    let psi0 = dict.lift_rows(&train.x0)?;
    let psi1 = dict.lift_rows(&train.x1)?;
    fit_operator_ls(&psi0, &psi1, &train.u, model, cfg.ridge)?;
    if !dict.is_trainable() {
        let started = Instant::now();
        let mut report = FitReport::default();
        let train_loss = mean_loss(dict, model, train)?;
        report.train_loss.push(train_loss);
        if !val.is_empty() {
            report.val_loss.push(mean_loss(dict, model, val)?);
        }
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        report.best_epoch = Some(0);
        report.operator_params = model.theta.clone();
        return Ok(report);
    }
    train_joint(train, val, dict, model, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::Observable;
    use crate::dynamics::{System, Trajectory};

    fn scalar_decay(n: usize) -> Transitions {
        let x0 = Mat::from_fn(n, 1, |r, _| -2.0 + 4.0 * r as f64 / (n - 1) as f64 + 0.01 * (r as f64).sin());
        let x1 = &x0 * 0.9;
        Transitions { x0, x1, u: Mat::zeros(n, 1) }
    }

    #[test]
    fn edmd_recovers_scalar_decay() {
        let data = scalar_decay(100);
        let dict = Dictionary::plain(1, Observable::Identity);
        let m = edmd_fit(&data, &dict, 0.0).unwrap();
        let k = m.k_matrix(&[]).unwrap();
        let expect = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.9]);
        assert!((k - expect).abs().max() < 1e-10);
    }

    #[test]
    fn edmd_identity_dynamics() {
        let mut data = scalar_decay(30);
        data.x1 = data.x0.clone();
        let m = edmd_fit(&data, &Dictionary::plain(1, Observable::Identity), 0.0).unwrap();
        assert!((m.k_matrix(&[]).unwrap() - Mat::identity(2, 2)).abs().max() < 1e-10);
    }

    #[test]
    fn edmd_singular_without_ridge() {
        let data = Transitions {
            x0: Mat::from_element(3, 1, 0.5),
            x1: Mat::from_element(3, 1, 0.4),
            u: Mat::zeros(3, 1),
        };
        let dict = Dictionary::plain(1, Observable::Identity);
        assert!(matches!(edmd_fit(&data, &dict, 0.0), Err(Error::SingularGram(_))));
    }

    #[test]
    fn pk_loss_constant_dictionary() {
        // N_psi = 1 is not reachable with a trainable tail; use a constant K on (1, x)
        let data = scalar_decay(5);
        let dict = Dictionary::plain(1, Observable::Identity);
        let exact = OperatorModel::constant(&Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.9])).unwrap();
        assert!(pk_loss(&dict, &exact, &data).unwrap() < 1e-28);
        let off = OperatorModel::constant(&Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.9])).unwrap();
        assert!((pk_loss(&dict, &off, &data).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = scalar_decay(20);
        let mut dict = Dictionary::trainable(1, Observable::Identity, 4, vec![4], 0).unwrap();
        let mut model = OperatorModel::network(4, 1, vec![4], true, 1).unwrap();
        let (d0, m0) = (dict.clone(), model.clone());
        let cfg = TrainingConfig { epochs: 0, ..TrainingConfig::default() };
        let r = train_pknn(&data, &Transitions { x0: Mat::zeros(0, 1), x1: Mat::zeros(0, 1), u: Mat::zeros(0, 1) }, &mut dict, &mut model, &cfg).unwrap();
        assert!(r.train_loss.is_empty());
        assert_eq!((dict, model), (d0, m0));
    }

    #[test]
    fn transitions_from_dataset() {
        let ds = TrajectoryDataset {
            system: System::Vdpm { mu: 0.0 },
            dt: 0.1,
            seed: 0,
            state_dim: 2,
            param_dim: 1,
            trajectories: vec![Trajectory { states: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], params: vec![7.0, 8.0] }],
        };
        let t = Transitions::from_dataset(&ds);
        assert_eq!(t.len(), 2);
        assert_eq!(t.x0.row(1).iter().copied().collect::<Vec<_>>(), vec![2.0, 3.0]);
        assert_eq!(t.x1.row(1).iter().copied().collect::<Vec<_>>(), vec![4.0, 5.0]);
        assert_eq!(t.u[(1, 0)], 8.0);
    }
}
