use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pkoopman::control::{closed_loop, controllability as rank_test, SimulatorPlant, TrackingProblem};
use pkoopman::dynamics::{generate, initial_state, kdv_profile, System, TrajectoryDataset};
use pkoopman::evaluation::{evaluate_suite, rollout, Predictor};
use pkoopman::io::{self, Checkpoint};
use pkoopman::pipeline::{fit_variant, predictor_of, DictionaryConfig, ModelConfig};
use pkoopman::training::TrainingConfig;
use sha2::{Digest, Sha256};

use crate::config::{ControlBlock, ExperimentConfig};
use crate::CliError;

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let cfg = ExperimentConfig::load(path)?.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_dataset(path: &Path) -> Result<(TrajectoryDataset, Vec<u8>), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let ds = io::read_dataset(&mut bytes.as_slice())?;
    Ok((ds, bytes))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("checkpoint {} not found", path.display())));
    }
    Ok(io::load_checkpoint(path)?)
}

fn check_system(cfg: &ExperimentConfig, system: &System, what: &str) -> Result<(), CliError> {
    if &cfg.system != system {
        return Err(CliError::Config(format!("{what} was made for {}, config is for {}", system.name(), cfg.system.name())));
    }
    Ok(())
}

fn provenance(cfg_text: &str, data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(cfg_text.as_bytes());
    h.update(data);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn generate_data(config: &Path, seed: Option<u64>, test: bool, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config, seed)?;
    let spec = if test { cfg.test_spec() } else { cfg.sampling_spec() };
    let ds = generate(&cfg.system, &spec)?;
    let mut w = create(out)?;
    io::write_dataset(&mut w, &ds)?;
    w.flush()?;
    println!(
        "{}: M = {}, N = {}, state dim = {}, parameter dim = {}, dt = {}, seed = {}",
        cfg.system.name(),
        ds.len(),
        spec.n_steps,
        ds.state_dim,
        ds.param_dim,
        ds.dt,
        ds.seed
    );
    Ok(())
}

struct Fitted {
    checkpoint: Checkpoint,
    report: pkoopman::training::FitReport,
}

fn fit(
    cfg: &ExperimentConfig,
    dcfg: &DictionaryConfig,
    mcfg: &ModelConfig,
    tcfg: &TrainingConfig,
    ds: &TrajectoryDataset,
    bytes: &[u8],
) -> Result<Fitted, CliError> {
    check_system(cfg, &ds.system, "the dataset")?;
    let (entries, report) = fit_variant(mcfg.variant, dcfg, mcfg, tcfg, ds, None)?;
    let checkpoint = Checkpoint {
        system: ds.system.clone(),
        dt: ds.dt,
        variant: mcfg.variant.label().to_string(),
        provenance: provenance(&cfg.to_toml()?, bytes),
        entries,
    };
    Ok(Fitted { checkpoint, report })
}

fn save_fit(fitted: &Fitted, out: &Path) -> Result<(), CliError> {
    let mut w = create(out)?;
    io::write_checkpoint(&mut w, &fitted.checkpoint)?;
    w.flush()?;
    io::write_loss_csv(create(&with_suffix(out, ".loss.csv"))?, &fitted.report, false)?;
    io::write_loss_csv(create(&with_suffix(out, ".timing.csv"))?, &fitted.report, true)?;
    Ok(())
}

pub fn train(config: &Path, seed: Option<u64>, data: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config, seed)?;
    let (ds, bytes) = read_dataset(data)?;
    let (dcfg, mcfg, tcfg) = cfg.seeded();
    let fitted = fit(&cfg, &dcfg, &mcfg, &tcfg, &ds, &bytes)?;
    save_fit(&fitted, out)?;
    let r = &fitted.report;
    println!(
        "{}: {} model(s), {} epoch(s), final train loss {:e}, best epoch {:?}",
        fitted.checkpoint.variant,
        fitted.checkpoint.entries.len(),
        r.train_loss.len(),
        r.train_loss.last().copied().unwrap_or(f64::NAN),
        r.best_epoch
    );
    Ok(())
}

fn predictor(ckpt: &Checkpoint, nearest_neighbour: bool, path: &Path) -> Result<Predictor, CliError> {
    let p = predictor_of(&ckpt.entries)?;
    match (&p, nearest_neighbour) {
        (Predictor::NearestNeighbour { .. }, false) => Err(CliError::Config(format!(
            "{} holds one model per training parameter; pass --nearest-neighbour",
            path.display()
        ))),
        (Predictor::Single { .. }, true) => {
            Err(CliError::Config(format!("{} holds a single model; drop --nearest-neighbour", path.display())))
        }
        _ => Ok(p),
    }
}

fn test_set(cfg: &ExperimentConfig, data: &Path) -> Result<TrajectoryDataset, CliError> {
    let (ds, _) = read_dataset(data)?;
    check_system(cfg, &ds.system, "the test set")?;
    if ds.is_empty() {
        return Err(CliError::Config("empty test set".into()));
    }
    Ok(ds)
}

pub fn predict(
    config: &Path,
    seed: Option<u64>,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    nearest_neighbour: bool,
) -> Result<(), CliError> {
    let cfg = load_config(config, seed)?;
    let ckpt = read_checkpoint(checkpoint)?;
    check_system(&cfg, &ckpt.system, "the checkpoint")?;
    let test = test_set(&cfg, data)?;
    let pred = predictor(&ckpt, nearest_neighbour, checkpoint)?;
    let mut w = create(out)?;
    let (dict0, _) = pred.select(test.param(0, 0))?;
    let n_y = dict0.n_y();
    let mut header = vec!["trajectory".to_string(), "n".to_string(), "t".to_string()];
    header.extend((1..=n_y).map(|i| format!("predicted_{i}")));
    header.extend((1..=n_y).map(|i| format!("true_{i}")));
    writeln!(w, "{}", header.join(","))?;
    for m in 0..test.len() {
        let (dict, model) = pred.select(test.param(m, 0))?;
        let n_steps = test.n_steps(m);
        let params: Vec<&[f64]> = (0..n_steps).map(|n| test.param(m, n)).collect();
        let ys = rollout(dict, model, test.state(m, 0), &params, cfg.evaluation.resubstitute)?;
        for (i, y) in ys.iter().enumerate() {
            let n = i + 1;
            let truth = dict.observable.eval(test.state(m, n));
            let vals: Vec<String> = y.iter().chain(&truth).map(|v| format!("{v:e}")).collect();
            writeln!(w, "{m},{n},{:e},{}", n as f64 * test.dt, vals.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn evaluate(
    config: &Path,
    seed: Option<u64>,
    checkpoints: &[PathBuf],
    data: &Path,
    out: &Path,
    nearest_neighbour: bool,
) -> Result<(), CliError> {
    let cfg = load_config(config, seed)?;
    let test = test_set(&cfg, data)?;
    let mut named = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let ckpt = read_checkpoint(path)?;
        check_system(&cfg, &ckpt.system, "the checkpoint")?;
        let bank = predictor_of(&ckpt.entries)?;
        let p = match bank {
            Predictor::NearestNeighbour { .. } if nearest_neighbour => bank,
            _ => predictor(&ckpt, false, path)?,
        };
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        named.push((format!("{}:{stem}", ckpt.variant), p));
    }
    let rows = evaluate_suite(&named, &test, cfg.evaluation.resubstitute)?;
    io::write_error_csv(create(out)?, &rows, test.dt)?;
    io::write_summary_csv(create(&with_suffix(out, ".summary.csv"))?, &rows, test.dt)?;
    for row in &rows {
        println!("{}: mean E at final step {:.6e}", row.name, row.final_mean());
    }
    Ok(())
}

fn references(ctrl: &ControlBlock) -> Result<Vec<Vec<f64>>, CliError> {
    let len = ctrl.n_steps + 1;
    if let Some(file) = &ctrl.reference_file {
        let text = fs::read_to_string(file).map_err(|e| CliError::Config(format!("{}: {e}", file.display())))?;
        let rows: Vec<Vec<f64>> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                l.split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| CliError::Config(format!("{}:{}: {e}", file.display(), i + 1)))
            })
            .collect::<Result<_, _>>()?;
        if rows.len() < len {
            return Err(CliError::Config(format!("{} has {} rows, need {len}", file.display(), rows.len())));
        }
        return Ok(rows.into_iter().take(len).collect());
    }
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let seg = ctrl.reference.iter().rev().find(|s| s.from <= n).ok_or_else(|| CliError::Config("empty reference".into()))?;
        out.push(seg.value.clone());
    }
    Ok(out)
}

pub fn control(config: &Path, seed: Option<u64>, checkpoint: &Path, out: &Path, timing: bool) -> Result<(), CliError> {
    let cfg = load_config(config, seed)?;
    let ctrl = cfg.control.clone().ok_or_else(|| CliError::Config("the config has no [control] block".into()))?;
    let ckpt = read_checkpoint(checkpoint)?;
    check_system(&cfg, &ckpt.system, "the checkpoint")?;
    let Predictor::Single { dict, model } = predictor(&ckpt, false, checkpoint)? else {
        unreachable!("predictor() rejects banks without --nearest-neighbour")
    };
    let (lower, upper) = cfg.system.param_box();
    let x0 = match (&ctrl.x0, ctrl.initial_weights) {
        (Some(x), _) => x.clone(),
        (None, Some(w)) => kdv_profile(&cfg.system, w),
        (None, None) => initial_state(&cfg.system, cfg.seed),
    };
    let problem = TrackingProblem {
        references: references(&ctrl)?,
        lambda: ctrl.lambda,
        horizon: ctrl.horizon,
        rows: ctrl.rows.clone(),
        lower: ctrl.lower.clone().unwrap_or(lower),
        upper: ctrl.upper.clone().unwrap_or(upper),
        x0,
        n_steps: ctrl.n_steps,
        dt: ckpt.dt,
    };
    problem.validate().map_err(|e| CliError::Config(format!("[control] {e}")))?;
    let mut plant = SimulatorPlant::new(ckpt.system.clone(), ckpt.dt)?;
    let result = match closed_loop(&problem, &dict, &model, &mut plant) {
        Ok(r) => r,
        Err(pkoopman::Error::PlantBlowUp { step, partial }) => {
            io::write_control_csv(create(out)?, &partial, timing)?;
            return Err(CliError::Numerical(format!("plant blew up at step {step}; partial run written")));
        }
        Err(e) => return Err(e.into()),
    };
    io::write_control_csv(create(out)?, &result, timing)?;
    let mae: f64 = result
        .tracked
        .iter()
        .zip(&result.references)
        .skip(1)
        .map(|(y, r)| y.iter().zip(r).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum::<f64>()
        / (result.tracked.len().max(2) - 1) as f64;
    println!("{} steps, mean absolute tracking error {mae:.6e}", result.controls.len());
    Ok(())
}

pub fn controllability(checkpoint: &Path, samples: usize, seed: u64, threshold: f64, out: &Path) -> Result<(), CliError> {
    if samples == 0 {
        return Err(CliError::Config("--samples must be >= 1".into()));
    }
    let ckpt = read_checkpoint(checkpoint)?;
    let [entry] = ckpt.entries.as_slice() else {
        return Err(CliError::Config("controllability needs a single-model checkpoint".into()));
    };
    let (lower, upper) = ckpt.system.param_box();
    let report = rank_test(&entry.model, ckpt.dt, &lower, &upper, samples, seed, threshold)?;
    io::write_spectrum_csv(create(out)?, &report)?;
    println!(
        "rank {} of required {} over {} samples: {}",
        report.rank,
        report.required_rank,
        report.n_samples,
        if report.controllable { "controllable" } else { "not controllable" }
    );
    Ok(())
}

pub fn sweep(config: &Path, seed: Option<u64>, data: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config, seed)?;
    if cfg.sweep.is_none() {
        return Err(CliError::Config("the config has no [sweep] block".into()));
    }
    let (ds, bytes) = read_dataset(data)?;
    fs::create_dir_all(out)?;
    let (dbase, mbase, tbase) = cfg.seeded();
    let mut summary = create(&out.join("summary.csv"))?;
    writeln!(summary, "cell,n_psi,dictionary_hidden,model_hidden,learning_rate,best_val_loss,final_train_loss")?;
    for (i, cell) in cfg.sweep_cells().iter().enumerate() {
        let dcfg = DictionaryConfig { n_psi: cell.n_psi, hidden: cell.dictionary_hidden.clone(), ..dbase.clone() };
        let mcfg = ModelConfig { hidden: cell.model_hidden.clone(), ..mbase.clone() };
        let tcfg = TrainingConfig { learning_rate: cell.learning_rate, ..tbase.clone() };
        let fitted = fit(&cfg, &dcfg, &mcfg, &tcfg, &ds, &bytes)?;
        save_fit(&fitted, &out.join(format!("cell-{i:03}.ckpt")))?;
        let best_val = fitted.report.val_loss.iter().copied().fold(f64::INFINITY, f64::min);
        let widths = |w: &[usize]| w.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        writeln!(
            summary,
            "{i},{},{},{},{:e},{:e},{:e}",
            cell.n_psi,
            widths(&cell.dictionary_hidden),
            widths(&cell.model_hidden),
            cell.learning_rate,
            best_val,
            fitted.report.train_loss.last().copied().unwrap_or(f64::NAN)
        )?;
    }
    summary.flush()?;
    Ok(())
}

pub fn export_csv(data: &Path, out: &Path) -> Result<(), CliError> {
    let (ds, _) = read_dataset(data)?;
    io::write_dataset_csv(create(out)?, &ds)?;
    Ok(())
}
