//! Model-family recipes: which dictionary and operator each variant uses and
//! how it is fitted.

use serde::{Deserialize, Serialize};

use crate::dictionary::{Dictionary, InputScaler, Observable};
use crate::dynamics::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::evaluation::Predictor;
use crate::io::ModelEntry;
use crate::koopman::{OperatorKind, OperatorModel};
use crate::training::{edmd_fit, fit_alternating, fit_poly, train_pknn, FitReport, TrainingConfig, Transitions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Constant `K` on the dictionary `(1, x)`.
    M0,
    /// One constant `K` per training parameter on a random RBF dictionary.
    M1Rbf,
    /// One constant `K` per training parameter on a trained dictionary.
    M1Nn,
    /// Affine control `A psi + B u` on a trained dictionary.
    M2,
    /// Bilinear `A + sum u_i B_i` on a trained dictionary.
    M3,
    /// Cubic parameter expansion on a random RBF dictionary.
    M4Rbf,
    /// Cubic parameter expansion trained jointly with the dictionary.
    M4Nn,
    /// Network dictionary and network operator trained jointly.
    Pknn,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::M0 => "m0",
            Variant::M1Rbf => "m1-rbf",
            Variant::M1Nn => "m1-nn",
            Variant::M2 => "m2",
            Variant::M3 => "m3",
            Variant::M4Rbf => "m4-rbf",
            Variant::M4Nn => "m4-nn",
            Variant::Pknn => "pknn",
        }
    }

    /// Whether one model is fitted per distinct training parameter.
    pub fn is_per_parameter(self) -> bool {
        matches!(self, Variant::M1Rbf | Variant::M1Nn)
    }

    fn uses_rbf(self) -> bool {
        matches!(self, Variant::M1Rbf | Variant::M4Rbf)
    }
}

fn default_degree() -> usize {
    3
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryConfig {
    pub n_psi: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub observable: Observable,
    /// Standardize the tail input with training-data statistics.
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Operator network hidden widths; the last one is `N_K - 1`.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_true")]
    pub fixed_first_row: bool,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default)]
    pub seed: u64,
}

fn states_of(ds: &TrajectoryDataset) -> Vec<&[f64]> {
    (0..ds.len()).flat_map(|m| (0..=ds.n_steps(m)).map(move |n| ds.state(m, n))).collect()
}

/// Builds the untrained dictionary for `variant` from training data.
pub fn build_dictionary(variant: Variant, cfg: &DictionaryConfig, train: &TrajectoryDataset) -> Result<Dictionary> {
    let sd = train.state_dim;
    let states = states_of(train);
    let scaler = if cfg.standardize { Some(InputScaler::fit(&states)?) } else { None };
    let n_y = cfg.observable.dim(sd);
    let dict = if variant == Variant::M0 {
        Dictionary::plain(sd, cfg.observable)
    } else if variant.uses_rbf() {
        let n_centers = cfg.n_psi.checked_sub(1 + n_y).filter(|n| *n > 0).ok_or_else(|| {
            Error::Invalid(format!("N_psi = {} leaves no RBF centers after 1 + {n_y}", cfg.n_psi))
        })?;
        let scaled: Vec<Vec<f64>> = match &scaler {
            Some(s) => states.iter().map(|x| x.iter().enumerate().map(|(j, v)| (v - s.shift[j]) * s.scale[j]).collect()).collect(),
            None => states.iter().map(|x| x.to_vec()).collect(),
        };
        let refs: Vec<&[f64]> = scaled.iter().map(Vec::as_slice).collect();
        let mut d = Dictionary::rbf_from_data(cfg.observable, &refs, n_centers, cfg.seed)?;
        d.state_dim = sd;
        d
    } else {
        if cfg.hidden.is_empty() {
            return Err(Error::Invalid("trainable dictionaries need hidden widths".into()));
        }
        Dictionary::trainable(sd, cfg.observable, cfg.n_psi, cfg.hidden.clone(), cfg.seed)?
    };
    Ok(dict.with_scaler(scaler))
}

/// Builds the untrained operator for `variant`.
pub fn build_operator(cfg: &ModelConfig, n_psi: usize, n_u: usize) -> Result<OperatorModel> {
    match cfg.variant {
        Variant::M0 | Variant::M1Rbf | Variant::M1Nn => Ok(OperatorModel::identity(n_psi)),
        Variant::M2 => OperatorModel::identity_of_kind(OperatorKind::AffineControl, n_psi, n_u),
        Variant::M3 => OperatorModel::identity_of_kind(OperatorKind::Bilinear, n_psi, n_u),
        Variant::M4Rbf | Variant::M4Nn => OperatorModel::identity_of_kind(OperatorKind::Poly { degree: cfg.degree }, n_psi, n_u),
        Variant::Pknn => {
            if cfg.hidden.is_empty() {
                return Err(Error::Invalid("the operator network needs hidden widths".into()));
            }
            OperatorModel::network(n_psi, n_u, cfg.hidden.clone(), cfg.fixed_first_row, cfg.seed)
        }
    }
}

/// Trajectory indices grouped by their (static) first parameter, in order of
/// first appearance.
pub fn parameter_groups(ds: &TrajectoryDataset) -> Vec<(Vec<f64>, Vec<usize>)> {
    let mut groups: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    for m in 0..ds.len() {
        let p = ds.param(m, 0);
        match groups.iter_mut().find(|(q, _)| q.as_slice() == p) {
            Some((_, idx)) => idx.push(m),
            None => groups.push((p.to_vec(), vec![m])),
        }
    }
    groups
}

/// Fits one dictionary/operator pair of a single-model variant (for M1
/// variants, on data from a single parameter value).
pub fn fit_single(
    variant: Variant,
    dcfg: &DictionaryConfig,
    mcfg: &ModelConfig,
    tcfg: &TrainingConfig,
    data: &TrajectoryDataset,
) -> Result<(Dictionary, OperatorModel, FitReport)> {
    let (train_ds, val_ds) = data.split_validation(tcfg.validation_fraction)?;
    let train = Transitions::from_dataset(&train_ds);
    let val = Transitions::from_dataset(&val_ds);
    let mut dict = build_dictionary(variant, dcfg, &train_ds)?;
    let mut model = build_operator(&ModelConfig { variant, ..mcfg.clone() }, dict.n_psi(), data.param_dim)?;
    let report = match variant {
        Variant::M0 | Variant::M1Rbf => {
            model = edmd_fit(&train, &dict, tcfg.ridge)?;
            let mut r = FitReport { best_epoch: Some(0), operator_params: model.theta.clone(), ..FitReport::default() };
            r.train_loss.push(crate::training::mean_loss(&dict, &model, &train)?);
            if !val.is_empty() {
                r.val_loss.push(crate::training::mean_loss(&dict, &model, &val)?);
            }
            r.epoch_seconds.push(0.0);
            r
        }
        Variant::M1Nn | Variant::M2 | Variant::M3 => fit_alternating(&train, &val, &mut dict, &mut model, tcfg)?,
        Variant::M4Rbf | Variant::M4Nn => fit_poly(&train, &val, &mut dict, &mut model, tcfg)?,
        Variant::Pknn => train_pknn(&train, &val, &mut dict, &mut model, tcfg)?,
    };
    Ok((dict, model, report))
}

/// Fits a variant on a dataset. M1 variants return one entry per distinct
/// training parameter (restricted to `groups` when given); the returned
/// report is that of the last group.
pub fn fit_variant(
    variant: Variant,
    dcfg: &DictionaryConfig,
    mcfg: &ModelConfig,
    tcfg: &TrainingConfig,
    data: &TrajectoryDataset,
    groups: Option<&[usize]>,
) -> Result<(Vec<ModelEntry>, FitReport)> {
    if data.is_empty() {
        return Err(Error::Invalid("no training trajectories".into()));
    }
    if !variant.is_per_parameter() {
        let (dict, model, report) = fit_single(variant, dcfg, mcfg, tcfg, data)?;
        return Ok((vec![ModelEntry { param: None, dict, model }], report));
    }
    let all = parameter_groups(data);
    let chosen: Vec<usize> = match groups {
        Some(g) => g.to_vec(),
        None => (0..all.len()).collect(),
    };
    let mut entries = Vec::with_capacity(chosen.len());
    let mut last = FitReport::default();
    for gi in chosen {
        let (param, idx) = all.get(gi).ok_or_else(|| Error::Invalid(format!("no parameter group {gi}")))?;
        let subset = data.subset(idx);
        let (dict, model, report) = fit_single(variant, dcfg, mcfg, tcfg, &subset)?;
        entries.push(ModelEntry { param: Some(param.clone()), dict, model });
        last = report;
    }
    Ok((entries, last))
}

/// Turns checkpoint entries into a predictor.
pub fn predictor_of(entries: &[ModelEntry]) -> Result<Predictor> {
    match entries {
        [] => Err(Error::Invalid("no models".into())),
        [single] if single.param.is_none() => Ok(Predictor::Single { dict: single.dict.clone(), model: single.model.clone() }),
        many => {
            let bank = many
                .iter()
                .map(|e| {
                    e.param
                        .clone()
                        .map(|p| (p, e.dict.clone(), e.model.clone()))
                        .ok_or_else(|| Error::Invalid("bank entry without a parameter".into()))
                })
                .collect::<Result<_>>()?;
            Ok(Predictor::NearestNeighbour { bank })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate, ParameterLaw, SamplingSpec, System};

    #[test]
    fn groups_follow_static_parameters() {
        let sys = System::Duffing;
        let spec = SamplingSpec { parameter_law: ParameterLaw::Static { group_size: 3 }, ..SamplingSpec::new(&sys, 9, 4, 0.25, 0) };
        let ds = generate(&sys, &spec).unwrap();
        let g = parameter_groups(&ds);
        assert_eq!(g.len(), 3);
        assert_eq!(g[1].1, vec![3, 4, 5]);
    }

    #[test]
    fn m0_and_m1_fit() {
        let sys = System::Duffing;
        let spec = SamplingSpec { parameter_law: ParameterLaw::Static { group_size: 4 }, ..SamplingSpec::new(&sys, 8, 10, 0.25, 0) };
        let ds = generate(&sys, &spec).unwrap();
        let dcfg = DictionaryConfig { n_psi: 8, hidden: vec![], observable: Observable::Identity, standardize: false, seed: 0 };
        let mcfg = ModelConfig { variant: Variant::M0, hidden: vec![], fixed_first_row: true, degree: 3, seed: 0 };
        let tcfg = TrainingConfig::default();
        let (m0, _) = fit_variant(Variant::M0, &dcfg, &mcfg, &tcfg, &ds, None).unwrap();
        assert_eq!(m0.len(), 1);
        assert_eq!(m0[0].model.n_psi, 3);
        let (m1, _) = fit_variant(Variant::M1Rbf, &dcfg, &mcfg, &tcfg, &ds, None).unwrap();
        assert_eq!(m1.len(), 2);
        assert_eq!(m1[0].dict.n_psi(), 8);
        assert!(matches!(predictor_of(&m1).unwrap(), Predictor::NearestNeighbour { .. }));
    }
}
