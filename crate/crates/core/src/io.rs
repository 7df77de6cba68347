//! On-disk formats.
//!
//! Datasets and checkpoints share one layout: a single JSON line describing
//! the contents, followed by raw little-endian `f64` payloads. CSV writers
//! cover loss logs, error curves, control runs and singular-value spectra.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{ControlResult, ControllabilityReport};
use crate::dictionary::{Dictionary, Tail};
use crate::dynamics::{System, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::evaluation::SuiteRow;
use crate::koopman::OperatorModel;
use crate::training::FitReport;

pub const DATASET_FORMAT: &str = "pkoopman-dataset";
pub const CHECKPOINT_FORMAT: &str = "pkoopman-checkpoint";
pub const FORMAT_VERSION: &str = "1.0";

fn check_version(found: &str) -> Result<()> {
    let major = found.split('.').next().unwrap_or("");
    let ours = FORMAT_VERSION.split('.').next().unwrap_or("");
    if major != ours {
        return Err(Error::Format(format!("format version {found} is not supported (expected major {ours})")));
    }
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated payload ({n} values expected): {e}")))?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
}

fn read_header_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(Error::Format("missing header line".into()));
    }
    Ok(line)
}

fn expect_end<R: Read>(r: &mut R) -> Result<()> {
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: String,
    pub system: System,
    pub dt: f64,
    pub seed: u64,
    pub state_dim: usize,
    pub param_dim: usize,
    pub n_trajectories: usize,
    pub n_steps: usize,
}

pub fn write_dataset<W: Write>(w: &mut W, ds: &TrajectoryDataset) -> Result<()> {
    ds.validate()?;
    let n_steps = if ds.is_empty() { 0 } else { ds.n_steps(0) };
    if (0..ds.len()).any(|m| ds.n_steps(m) != n_steps) {
        return Err(Error::Format("dataset files need trajectories of equal length".into()));
    }
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION.into(),
        system: ds.system.clone(),
        dt: ds.dt,
        seed: ds.seed,
        state_dim: ds.state_dim,
        param_dim: ds.param_dim,
        n_trajectories: ds.len(),
        n_steps,
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for t in &ds.trajectories {
        write_f64s(w, &t.states)?;
    }
    for t in &ds.trajectories {
        write_f64s(w, &t.params)?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: &mut R) -> Result<TrajectoryDataset> {
    let header: DatasetHeader = serde_json::from_str(&read_header_line(r)?)?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Format(format!("not a dataset file: {}", header.format)));
    }
    check_version(&header.version)?;
    let states: Vec<Vec<f64>> = (0..header.n_trajectories)
        .map(|_| read_f64s(r, (header.n_steps + 1) * header.state_dim))
        .collect::<Result<_>>()?;
    let params: Vec<Vec<f64>> = (0..header.n_trajectories)
        .map(|_| read_f64s(r, header.n_steps * header.param_dim))
        .collect::<Result<_>>()?;
    expect_end(r)?;
    let ds = TrajectoryDataset {
        system: header.system,
        dt: header.dt,
        seed: header.seed,
        state_dim: header.state_dim,
        param_dim: header.param_dim,
        trajectories: states.into_iter().zip(params).map(|(states, params)| Trajectory { states, params }).collect(),
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(path: &Path, ds: &TrajectoryDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

/// One trained dictionary/operator pair; `param` is set for models fitted at
/// a single parameter value (nearest-neighbour banks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub param: Option<Vec<f64>>,
    pub dict: Dictionary,
    pub model: OperatorModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub system: System,
    pub dt: f64,
    /// Model family label, e.g. `pknn`, `m1-rbf`.
    pub variant: String,
    /// Hash of the training inputs.
    pub provenance: String,
    pub entries: Vec<ModelEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: String,
    /// Payload lengths: dictionary parameters then operator parameters, per entry.
    payload: Vec<(usize, usize)>,
    checkpoint: Checkpoint,
}

fn strip_params(entry: &mut ModelEntry) -> (Vec<f64>, Vec<f64>) {
    let dict_params = match &mut entry.dict.tail {
        Tail::Network { params, .. } => std::mem::take(params),
        _ => Vec::new(),
    };
    (dict_params, std::mem::take(&mut entry.model.theta))
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    let mut stripped = ckpt.clone();
    let payloads: Vec<(Vec<f64>, Vec<f64>)> = stripped.entries.iter_mut().map(strip_params).collect();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: FORMAT_VERSION.into(),
        payload: payloads.iter().map(|(d, k)| (d.len(), k.len())).collect(),
        checkpoint: stripped,
    };
    serde_json::to_writer(&mut *w, &manifest)?;
    w.write_all(b"\n")?;
    for (d, k) in &payloads {
        write_f64s(w, d)?;
        write_f64s(w, k)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(r: &mut R) -> Result<Checkpoint> {
    let line = read_header_line(r)?;
    let probe: serde_json::Value = serde_json::from_str(&line)?;
    if probe.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    check_version(probe.get("version").and_then(|v| v.as_str()).unwrap_or(""))?;
    let mut manifest: CheckpointManifest = serde_json::from_value(probe)?;
    if manifest.payload.len() != manifest.checkpoint.entries.len() {
        return Err(Error::Format("payload table does not match the entries".into()));
    }
    for (entry, &(nd, nk)) in manifest.checkpoint.entries.iter_mut().zip(&manifest.payload) {
        let d = read_f64s(r, nd)?;
        let k = read_f64s(r, nk)?;
        match &mut entry.dict.tail {
            Tail::Network { params, .. } => *params = d,
            _ if d.is_empty() => {}
            _ => return Err(Error::Format("parameters for a fixed dictionary".into())),
        }
        entry.model.theta = k;
        entry.model.validate()?;
        if let Tail::Network { spec, params } = &entry.dict.tail {
            if spec.n_params() != params.len() {
                return Err(Error::Format("dictionary payload length mismatch".into()));
            }
        }
    }
    expect_end(r)?;
    Ok(manifest.checkpoint)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

/// `epoch,train_loss,val_loss[,seconds]`. Timing is omitted when
/// `with_timing` is false so runs can be compared byte for byte.
pub fn write_loss_csv<W: Write>(w: W, report: &FitReport, with_timing: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["epoch", "train_loss", "val_loss"];
    if with_timing {
        header.push("seconds");
    }
    out.write_record(&header).map_err(csv_err)?;
    for (i, t) in report.train_loss.iter().enumerate() {
        let v = report.val_loss.get(i).map(|v| fmt(*v)).unwrap_or_default();
        let mut rec = vec![i.to_string(), fmt(*t), v];
        if with_timing {
            rec.push(report.epoch_seconds.get(i).map(|v| format!("{v:.6}")).unwrap_or_default());
        }
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// `model,trajectory,n,t,E`.
pub fn write_error_csv<W: Write>(w: W, rows: &[SuiteRow], dt: f64) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "trajectory", "n", "t", "E"]).map_err(csv_err)?;
    for row in rows {
        for (m, curve) in row.per_trajectory.iter().enumerate() {
            for (i, e) in curve.iter().enumerate() {
                let n = i + 1;
                out.write_record([row.name.clone(), m.to_string(), n.to_string(), fmt(n as f64 * dt), fmt(*e)])
                    .map_err(csv_err)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// `model,n,t,mean_E,std_E`.
pub fn write_summary_csv<W: Write>(w: W, rows: &[SuiteRow], dt: f64) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "n", "t", "mean_E", "std_E"]).map_err(csv_err)?;
    for row in rows {
        for (i, (m, s)) in row.mean.iter().zip(&row.std).enumerate() {
            let n = i + 1;
            out.write_record([row.name.clone(), n.to_string(), fmt(n as f64 * dt), fmt(*m), fmt(*s)]).map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `n,t,u_1..u_k,tracked_1..,reference_1..,seconds,iterations`. Timing is
/// omitted when `with_timing` is false so runs can be compared byte for byte.
pub fn write_control_csv<W: Write>(w: W, result: &ControlResult, with_timing: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let n_u = result.controls.first().map_or(0, Vec::len);
    let n_y = result.tracked.first().map_or(0, Vec::len);
    let mut header = vec!["n".to_string(), "t".to_string()];
    header.extend((1..=n_u).map(|i| format!("u_{i}")));
    header.extend((1..=n_y).map(|i| format!("tracked_{i}")));
    header.extend((1..=n_y).map(|i| format!("reference_{i}")));
    if with_timing {
        header.push("seconds".into());
    }
    header.push("iterations".into());
    out.write_record(&header).map_err(csv_err)?;
    for n in 0..result.controls.len() {
        let mut rec = vec![n.to_string(), fmt(n as f64 * result.dt)];
        rec.extend(result.controls[n].iter().map(|v| fmt(*v)));
        rec.extend(result.tracked[n].iter().map(|v| fmt(*v)));
        rec.extend(result.references[n].iter().map(|v| fmt(*v)));
        if with_timing {
            rec.push(format!("{:.6}", result.seconds[n]));
        }
        rec.push(result.iterations[n].to_string());
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// `index,singular_value`.
pub fn write_spectrum_csv<W: Write>(w: W, report: &ControllabilityReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["index", "singular_value"]).map_err(csv_err)?;
    for (i, s) in report.singular_values.iter().enumerate() {
        out.write_record([i.to_string(), fmt(*s)]).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// `trajectory,n,kind,values...` with one row per state and parameter.
pub fn write_dataset_csv<W: Write>(w: W, ds: &TrajectoryDataset) -> Result<()> {
    let mut out = csv::WriterBuilder::new().flexible(true).from_writer(w);
    out.write_record(["trajectory", "n", "kind", "values"]).map_err(csv_err)?;
    for m in 0..ds.len() {
        for n in 0..=ds.n_steps(m) {
            let mut rec = vec![m.to_string(), n.to_string(), "x".to_string()];
            rec.extend(ds.state(m, n).iter().map(|v| fmt(*v)));
            out.write_record(&rec).map_err(csv_err)?;
            if n < ds.n_steps(m) {
                let mut rec = vec![m.to_string(), n.to_string(), "u".to_string()];
                rec.extend(ds.param(m, n).iter().map(|v| fmt(*v)));
                out.write_record(&rec).map_err(csv_err)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::Observable;
    use crate::dynamics::{generate, SamplingSpec};

    #[test]
    fn dataset_round_trip() {
        let sys = System::Duffing;
        let ds = generate(&sys, &SamplingSpec::new(&sys, 3, 7, 0.25, 4)).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let back = read_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let mut again = Vec::new();
        write_dataset(&mut again, &back).unwrap();
        assert_eq!(buf, again);
        assert!(read_dataset(&mut &buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dict = Dictionary::trainable(2, Observable::Identity, 6, vec![8, 8], 1).unwrap();
        let model = OperatorModel::network(6, 1, vec![10], true, 2).unwrap();
        let rbf = Dictionary::rbf(2, Observable::Identity, vec![vec![0.0, 1.0]], 0.5).unwrap();
        let ckpt = Checkpoint {
            system: System::Vdpm { mu: 1.0 },
            dt: 0.01,
            variant: "pknn".into(),
            provenance: "abc".into(),
            entries: vec![
                ModelEntry { param: None, dict: dict.clone(), model: model.clone() },
                ModelEntry { param: Some(vec![0.5]), dict: rbf, model: OperatorModel::identity(4) },
            ],
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let psi = back.entries[0].dict.evaluate(&[0.3, 0.1]).unwrap();
        assert_eq!(psi, dict.evaluate(&[0.3, 0.1]).unwrap());
    }

    #[test]
    fn unknown_major_rejected() {
        let ckpt = Checkpoint { system: System::Duffing, dt: 0.25, variant: "m0".into(), provenance: String::new(), entries: vec![] };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        let text = String::from_utf8(buf).unwrap().replace("\"version\":\"1.0\"", "\"version\":\"2.0\"");
        let err = read_checkpoint(&mut text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn loss_csv_layout() {
        let r = FitReport { train_loss: vec![1.0, 0.5], val_loss: vec![2.0, 1.0], epoch_seconds: vec![0.1, 0.1], ..FitReport::default() };
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &r, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("epoch,train_loss,val_loss,seconds"));
        assert_eq!(text.lines().count(), 3);
        let mut plain = Vec::new();
        write_loss_csv(&mut plain, &r, false).unwrap();
        assert_eq!(String::from_utf8(plain).unwrap().lines().nth(1), Some("0,1e0,2e0"));
    }
}
