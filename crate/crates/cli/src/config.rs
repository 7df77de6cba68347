//! Experiment configuration files.

use std::path::{Path, PathBuf};

use pkoopman::dictionary::Observable;
use pkoopman::dynamics::{ParameterLaw, SamplingSpec, System};
use pkoopman::pipeline::{DictionaryConfig, ModelConfig, Variant};
use pkoopman::training::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every other seed is derived from it.
    #[serde(default)]
    pub seed: u64,
    pub system: System,
    pub sampling: SamplingBlock,
    pub dictionary: DictionaryConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub evaluation: EvaluationBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingBlock {
    pub n_trajectories: usize,
    pub n_steps: usize,
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter_law: Option<ParameterLaw>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationBlock {
    pub n_trajectories: usize,
    pub n_steps: usize,
    pub parameter_law: Option<ParameterLaw>,
    /// Lift each predicted state again before the next step.
    pub resubstitute: bool,
    /// Offset added to the master seed for the test set.
    pub seed_offset: u64,
}

impl Default for EvaluationBlock {
    fn default() -> Self {
        Self { n_trajectories: 40, n_steps: 50, parameter_law: None, resubstitute: true, seed_offset: 1000 }
    }
}

/// A piecewise-constant reference: `value` holds from step `from` onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSegment {
    pub from: usize,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBlock {
    /// Rows of the observable selector to track (0 = mass, 1 = momentum for KdV).
    #[serde(default = "default_rows")]
    pub rows: Vec<usize>,
    #[serde(default)]
    pub lambda: f64,
    pub horizon: usize,
    pub n_steps: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reference: Vec<ReferenceSegment>,
    /// CSV with one row of reference values per step `0..=n_steps`; relative
    /// paths are resolved against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Weights of the three KdV initial profiles, used when `x0` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_weights: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
}

fn default_rows() -> Vec<usize> {
    vec![0]
}

/// Grid for hyperparameter search; empty lists keep the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepBlock {
    pub n_psi: Vec<usize>,
    pub dictionary_hidden: Vec<Vec<usize>>,
    pub model_hidden: Vec<Vec<usize>>,
    pub learning_rate: Vec<f64>,
}

/// One cell of a sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub n_psi: usize,
    pub dictionary_hidden: Vec<usize>,
    pub model_hidden: Vec<usize>,
    pub learning_rate: f64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(ctrl) = cfg.control.as_mut() {
            if let Some(file) = ctrl.reference_file.as_mut() {
                if file.is_relative() {
                    *file = path.parent().unwrap_or(Path::new(".")).join(&*file);
                }
            }
        }
        Ok(cfg)
    }

    /// Parses TOML; syntax and type errors carry line and column.
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("serializing config: {e}")))
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    pub fn sampling_spec(&self) -> SamplingSpec {
        let s = &self.sampling;
        SamplingSpec {
            n_trajectories: s.n_trajectories,
            n_steps: s.n_steps,
            dt: s.dt,
            seed: self.seed,
            parameter_law: s.parameter_law.unwrap_or_else(|| ParameterLaw::default_for(&self.system)),
        }
    }

    pub fn test_spec(&self) -> SamplingSpec {
        let e = &self.evaluation;
        SamplingSpec {
            n_trajectories: e.n_trajectories,
            n_steps: e.n_steps,
            dt: self.sampling.dt,
            seed: self.seed.wrapping_add(e.seed_offset),
            parameter_law: e.parameter_law.unwrap_or_else(|| ParameterLaw::default_for(&self.system)),
        }
    }

    /// Dictionary, model and training settings with seeds derived from the
    /// master seed.
    pub fn seeded(&self) -> (DictionaryConfig, ModelConfig, TrainingConfig) {
        let dict = DictionaryConfig { seed: self.seed.wrapping_add(1), ..self.dictionary.clone() };
        let model = ModelConfig { seed: self.seed.wrapping_add(2), ..self.model.clone() };
        let training = TrainingConfig { seed: self.seed.wrapping_add(3), ..self.training.clone() };
        (dict, model, training)
    }

    pub fn sweep_cells(&self) -> Vec<SweepCell> {
        let sweep = self.sweep.clone().unwrap_or_default();
        let or = |v: Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v };
        let n_psi = or(sweep.n_psi, self.dictionary.n_psi);
        let dh = if sweep.dictionary_hidden.is_empty() { vec![self.dictionary.hidden.clone()] } else { sweep.dictionary_hidden };
        let mh = if sweep.model_hidden.is_empty() { vec![self.model.hidden.clone()] } else { sweep.model_hidden };
        let lr = if sweep.learning_rate.is_empty() { vec![self.training.learning_rate] } else { sweep.learning_rate };
        let mut cells = Vec::new();
        for &n in &n_psi {
            for d in &dh {
                for m in &mh {
                    for &l in &lr {
                        cells.push(SweepCell { n_psi: n, dictionary_hidden: d.clone(), model_hidden: m.clone(), learning_rate: l });
                    }
                }
            }
        }
        cells
    }

    /// Cross-block checks run before any command does work.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        self.system.validate().map_err(|e| CliError::Config(format!("[system] {e}")))?;
        self.sampling_spec().validate().map_err(|e| CliError::Config(format!("[sampling] {e}")))?;
        self.training.validate().map_err(|e| CliError::Config(format!("[training] {e}")))?;
        if self.evaluation.n_trajectories == 0 || self.evaluation.n_steps == 0 {
            return bad("[evaluation] needs at least one trajectory and one step".into());
        }
        let sd = self.system.state_dim();
        let pd = self.system.param_dim();
        let obs = self.dictionary.observable;
        if obs == Observable::KdvMassMomentum && !matches!(self.system, System::Kdv { .. }) {
            return bad("[dictionary] observable kdv_mass_momentum needs the kdv system".into());
        }
        if self.evaluation.resubstitute && !obs.is_full_state() {
            return bad("[evaluation] resubstitute needs the identity observable".into());
        }
        let n_y = obs.dim(sd);
        let variant = self.model.variant;
        if variant != Variant::M0 {
            for n in self.sweep_cells().iter().map(|c| c.n_psi) {
                if n <= 1 + n_y {
                    return bad(format!("[dictionary] n_psi = {n} must exceed 1 + {n_y} observables"));
                }
            }
        }
        let trained_dict = !matches!(variant, Variant::M0 | Variant::M1Rbf | Variant::M4Rbf);
        if trained_dict && self.dictionary.hidden.is_empty() {
            return bad(format!("[dictionary] variant {} needs hidden widths", variant.label()));
        }
        if variant == Variant::Pknn && self.model.hidden.is_empty() {
            return bad("[model] pknn needs hidden widths".into());
        }
        if matches!(variant, Variant::M4Rbf | Variant::M4Nn) && self.model.degree == 0 {
            return bad("[model] polynomial degree must be >= 1".into());
        }
        if let Some(ctrl) = &self.control {
            if ctrl.horizon == 0 || ctrl.horizon > ctrl.n_steps {
                return bad(format!("[control] horizon {} must be in 1..={}", ctrl.horizon, ctrl.n_steps));
            }
            if ctrl.rows.is_empty() || ctrl.rows.iter().any(|r| *r >= n_y) {
                return bad(format!("[control] rows must be non-empty and below {n_y}"));
            }
            if !(ctrl.lambda >= 0.0) {
                return bad("[control] lambda must be >= 0".into());
            }
            match (&ctrl.reference_file, ctrl.reference.is_empty()) {
                (Some(_), false) => return bad("[control] give either reference or reference_file".into()),
                (None, true) => return bad("[control] a reference is required".into()),
                (Some(f), true) if !f.exists() => return bad(format!("[control] reference file {} not found", f.display())),
                _ => {}
            }
            if let Some(first) = ctrl.reference.first() {
                if first.from != 0 {
                    return bad("[control] the first reference segment must start at 0".into());
                }
            }
            if ctrl.reference.windows(2).any(|w| w[1].from <= w[0].from) {
                return bad("[control] reference segments must start at increasing steps".into());
            }
            if ctrl.reference.iter().any(|s| s.value.len() != ctrl.rows.len()) {
                return bad("[control] reference values must match the tracked rows".into());
            }
            if ctrl.x0.as_ref().is_some_and(|x| x.len() != sd) {
                return bad(format!("[control] x0 must have {sd} entries"));
            }
            if ctrl.initial_weights.is_some() && !matches!(self.system, System::Kdv { .. }) {
                return bad("[control] initial_weights applies to kdv only".into());
            }
            for b in [&ctrl.lower, &ctrl.upper].into_iter().flatten() {
                if b.len() != pd {
                    return bad(format!("[control] bounds must have {pd} entries"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[system]
kind = "duffing"
[sampling]
n_trajectories = 4
n_steps = 5
dt = 0.25
[dictionary]
n_psi = 6
hidden = [8]
[model]
variant = "pknn"
hidden = [8]
"#;

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        cfg.validate().unwrap();
    }

    #[test]
    fn errors_name_the_line() {
        let broken = MINIMAL.replace("n_steps = 5", "n_steps = \"five\"");
        let err = ExperimentConfig::parse(&broken).unwrap_err();
        assert!(err.contains("line 7"), "{err}");
    }

    #[test]
    fn cross_block_checks() {
        let mut cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        cfg.dictionary.n_psi = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        cfg.sampling.n_trajectories = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sweep_grid_size() {
        let mut cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        cfg.sweep = Some(SweepBlock { n_psi: vec![6, 8], learning_rate: vec![1e-3, 1e-2, 1e-4], ..SweepBlock::default() });
        assert_eq!(cfg.sweep_cells().len(), 6);
    }
}
