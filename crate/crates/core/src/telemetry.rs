//! Telemetry and metrics serialization.
//!
//! CSV files carry one header row whose column names embed the unit, then
//! one row per sample. JSON-lines files start with a metadata object and
//! then hold one record per line. Floats are written in shortest
//! round-trip form, so reading a file back reproduces the records exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ScenarioConfig;
use crate::dynamics::{BodyState, ControlInput, Wrench};
use crate::estimation::{AugmentedState, Measurement};
use crate::quat::{UnitQuaternion, Vec3};
use crate::simulation::{EstimateRecord, MetricsReport, TelemetryRecord};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error("no telemetry records to write")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TelemetryFormat {
    #[default]
    Csv,
    Jsonl,
}

impl TelemetryFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TelemetryFormat::Csv => "csv",
            TelemetryFormat::Jsonl => "jsonl",
        }
    }
}

impl FromStr for TelemetryFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TelemetryFormat::Csv),
            "jsonl" => Ok(TelemetryFormat::Jsonl),
            other => Err(format!("unknown telemetry format '{other}' (expected csv or jsonl)")),
        }
    }
}

fn quat_cols(prefix: &str) -> Vec<String> {
    ["qw", "qx", "qy", "qz"].iter().map(|c| format!("{prefix}_{c}")).collect()
}

fn vec_cols(prefix: &str, names: [&str; 3], unit: &str) -> Vec<String> {
    names.iter().map(|c| format!("{prefix}_{c}_{unit}")).collect()
}

const XYZ: [&str; 3] = ["x", "y", "z"];
const VXYZ: [&str; 3] = ["vx", "vy", "vz"];
const PQR: [&str; 3] = ["p", "q", "r"];
const FXYZ: [&str; 3] = ["Fx", "Fy", "Fz"];
const MXYZ: [&str; 3] = ["Mx", "My", "Mz"];

fn estimate_cols(prefix: &str) -> Vec<String> {
    let mut c = quat_cols(prefix);
    c.extend(vec_cols(prefix, XYZ, "m"));
    c.extend(vec_cols(prefix, VXYZ, "m_s"));
    c.extend(vec_cols(prefix, PQR, "rad_s"));
    c.extend(vec_cols(prefix, ["ups_Fx", "ups_Fy", "ups_Fz"], "N"));
    c.extend(vec_cols(prefix, ["ups_Mx", "ups_My", "ups_Mz"], "Nm"));
    c.extend(vec_cols(prefix, FXYZ, "N"));
    c.extend(vec_cols(prefix, MXYZ, "Nm"));
    c.push(format!("{prefix}_nis"));
    c
}

/// Column names in file order for the given estimator selection.
pub fn csv_columns(qukf: bool, ekf: bool) -> Vec<String> {
    let mut c = vec!["t_s".to_string()];
    c.extend(quat_cols("truth"));
    c.extend(vec_cols("truth", XYZ, "m"));
    c.extend(vec_cols("truth", VXYZ, "m_s"));
    c.extend(vec_cols("truth", PQR, "rad_s"));
    c.extend(vec_cols("human", FXYZ, "N"));
    c.extend(vec_cols("human", MXYZ, "Nm"));
    c.extend(quat_cols("meas"));
    c.extend(vec_cols("meas", XYZ, "m"));
    c.extend(vec_cols("meas", PQR, "rad_s"));
    if qukf {
        c.extend(estimate_cols("qukf"));
    }
    if ekf {
        c.extend(estimate_cols("ekf"));
    }
    c.push("u_thrust_N".to_string());
    c.extend(vec_cols("u", MXYZ, "Nm"));
    for v in 1..=2 {
        c.push(format!("uav{v}_thrust_N"));
        c.extend(vec_cols(&format!("uav{v}"), MXYZ, "Nm"));
    }
    c
}

fn push_quat(out: &mut Vec<f64>, q: &UnitQuaternion) {
    out.extend([q.w, q.v.x, q.v.y, q.v.z]);
}

fn push_vec(out: &mut Vec<f64>, v: &Vec3) {
    out.extend(v.iter().copied());
}

fn flatten(r: &TelemetryRecord) -> Vec<f64> {
    let mut out = vec![r.t];
    push_quat(&mut out, &r.truth.q);
    for v in [&r.truth.r, &r.truth.v, &r.truth.omega, &r.truth_wrench.force, &r.truth_wrench.torque] {
        push_vec(&mut out, v);
    }
    push_quat(&mut out, &r.measurement.q);
    push_vec(&mut out, &r.measurement.r);
    push_vec(&mut out, &r.measurement.omega);
    for e in [&r.qukf, &r.ekf].into_iter().flatten() {
        push_quat(&mut out, &e.state.q);
        for v in [&e.state.r, &e.state.v, &e.state.omega] {
            push_vec(&mut out, v);
        }
        out.extend(e.state.upsilon.iter().copied());
        push_vec(&mut out, &e.wrench.force);
        push_vec(&mut out, &e.wrench.torque);
        out.push(e.nis);
    }
    out.push(r.control.thrust);
    push_vec(&mut out, &r.control.moments);
    out.extend(r.rotor_commands);
    out
}

struct Cursor<'a> {
    values: &'a [f64],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> f64 {
        let v = self.values[self.at];
        self.at += 1;
        v
    }

    fn vec3(&mut self) -> Vec3 {
        Vec3::new(self.take(), self.take(), self.take())
    }

    fn quat(&mut self) -> UnitQuaternion {
        let (w, x, y, z) = (self.take(), self.take(), self.take(), self.take());
        UnitQuaternion { w, v: Vec3::new(x, y, z) }
    }

    fn estimate(&mut self) -> EstimateRecord {
        let q = self.quat();
        let (r, v, omega) = (self.vec3(), self.vec3(), self.vec3());
        let upsilon = nalgebra::Vector6::from_iterator((0..6).map(|_| self.take()));
        let wrench = Wrench::new(self.vec3(), self.vec3());
        let nis = self.take();
        EstimateRecord { state: AugmentedState { q, r, v, omega, upsilon, padding: Vec::new() }, wrench, nis }
    }
}

fn unflatten(values: &[f64], qukf: bool, ekf: bool) -> TelemetryRecord {
    let mut c = Cursor { values, at: 0 };
    let t = c.take();
    let truth = BodyState { q: c.quat(), r: c.vec3(), v: c.vec3(), omega: c.vec3() };
    let truth_wrench = Wrench::new(c.vec3(), c.vec3());
    let measurement = Measurement { q: c.quat(), r: c.vec3(), omega: c.vec3() };
    let qukf = qukf.then(|| c.estimate());
    let ekf = ekf.then(|| c.estimate());
    let control = ControlInput::new(c.take(), c.vec3());
    let rotor_commands = std::array::from_fn(|_| c.take());
    TelemetryRecord { t, truth, truth_wrench, measurement, qukf, ekf, control, rotor_commands }
}

/// Metadata line leading a JSON-lines telemetry file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryMetadata {
    pub kind: String,
    pub version: String,
    pub config_digest: Option<String>,
    pub units: Vec<(String, String)>,
}

impl TelemetryMetadata {
    pub fn new(config_digest: Option<String>) -> Self {
        let units = [
            ("t", "s"),
            ("q", "unit quaternion, scalar first"),
            ("r", "m"),
            ("v", "m/s"),
            ("omega", "rad/s"),
            ("force", "N"),
            ("torque", "N.m"),
            ("thrust", "N"),
            ("moments", "N.m"),
            ("rotor_commands", "per vehicle [thrust N, moments N.m]"),
        ];
        Self {
            kind: "metadata".to_string(),
            version: CODE_VERSION.to_string(),
            config_digest,
            units: units.iter().map(|(k, u)| (k.to_string(), u.to_string())).collect(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TelemetryError + '_ {
    move |source| TelemetryError::Io { path: path.to_path_buf(), source }
}

/// Writes `records` to `path`. `config_digest` goes into the JSON-lines metadata line.
pub fn write_telemetry(
    records: &[TelemetryRecord],
    path: &Path,
    format: TelemetryFormat,
    config_digest: Option<&str>,
) -> Result<(), TelemetryError> {
    let first = records.first().ok_or(TelemetryError::Empty)?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let result = match format {
        TelemetryFormat::Csv => {
            let (qukf, ekf) = (first.qukf.is_some(), first.ekf.is_some());
            let mut res = writeln!(w, "{}", csv_columns(qukf, ekf).join(","));
            for r in records {
                if res.is_err() {
                    break;
                }
                if r.qukf.is_some() != qukf || r.ekf.is_some() != ekf {
                    return Err(TelemetryError::Format {
                        path: path.to_path_buf(),
                        line: 0,
                        message: "records disagree on which estimators are present".to_string(),
                    });
                }
                let row: Vec<String> = flatten(r).iter().map(|x| x.to_string()).collect();
                res = writeln!(w, "{}", row.join(","));
            }
            res
        }
        TelemetryFormat::Jsonl => {
            let meta = TelemetryMetadata::new(config_digest.map(str::to_string));
            let mut res = writeln!(w, "{}", serde_json::to_string(&meta).expect("metadata serializes"));
            for r in records {
                if res.is_err() {
                    break;
                }
                res = writeln!(w, "{}", serde_json::to_string(r).expect("records serialize"));
            }
            res
        }
    };
    result.and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn read_telemetry(path: &Path, format: TelemetryFormat) -> Result<Vec<TelemetryRecord>, TelemetryError> {
    let file = File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let fmt_err = |line: usize, message: String| TelemetryError::Format { path: path.to_path_buf(), line, message };
    let mut records = Vec::new();
    match format {
        TelemetryFormat::Csv => {
            let mut lines = reader.lines().enumerate();
            let header = match lines.next() {
                Some((_, l)) => l.map_err(io_err(path))?,
                None => return Err(fmt_err(1, "missing header".to_string())),
            };
            let names: Vec<&str> = header.split(',').collect();
            let qukf = names.contains(&"qukf_qw");
            let ekf = names.contains(&"ekf_qw");
            let expected = csv_columns(qukf, ekf);
            if names != expected {
                return Err(fmt_err(1, "header does not match the telemetry column layout".to_string()));
            }
            for (i, line) in lines {
                let line = line.map_err(io_err(path))?;
                if line.is_empty() {
                    continue;
                }
                let values = line
                    .split(',')
                    .map(|v| v.parse::<f64>().map_err(|e| fmt_err(i + 1, format!("'{v}': {e}"))))
                    .collect::<Result<Vec<_>, _>>()?;
                if values.len() != expected.len() {
                    return Err(fmt_err(i + 1, format!("expected {} fields, found {}", expected.len(), values.len())));
                }
                records.push(unflatten(&values, qukf, ekf));
            }
        }
        TelemetryFormat::Jsonl => {
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err(path))?;
                if line.is_empty() {
                    continue;
                }
                if i == 0 && line.contains("\"kind\":\"metadata\"") {
                    continue;
                }
                records.push(serde_json::from_str(&line).map_err(|e| fmt_err(i + 1, e.to_string()))?);
            }
        }
    }
    Ok(records)
}

/// Metrics of one run plus what is needed to reproduce it.
///
/// Wall-clock timings are left out so identical runs give identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub version: String,
    pub config_digest: String,
    pub seed: u64,
    pub duration_s: f64,
    pub metrics: MetricsReport,
}

impl MetricsDocument {
    pub fn new(config: &ScenarioConfig, metrics: MetricsReport) -> Self {
        Self {
            version: CODE_VERSION.to_string(),
            config_digest: config.digest(),
            seed: config.run.seed,
            duration_s: config.run.duration,
            metrics,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn write(&self, path: &Path) -> Result<(), TelemetryError> {
        std::fs::write(path, self.to_json() + "\n").map_err(io_err(path))
    }
}

/// Text table comparing the two estimators channel by channel.
pub fn comparison_table(report: &MetricsReport) -> String {
    let fmt = |x: Option<f64>, prec: usize| x.map_or("-".to_string(), |v| format!("{v:.prec$}"));
    let mut s = format!(
        "{:<10} {:<7} {:>12} {:>12} {:>12} {:>10} {:>10}\n",
        "channel", "unit", "EKF RMSE", "QUKF RMSE", "improvement", "t_c EKF", "t_c QUKF"
    );
    for c in &report.channels {
        s += &format!(
            "{:<10} {:<7} {:>12} {:>12} {:>11}% {:>10} {:>10}\n",
            c.channel.label(),
            c.channel.unit(),
            fmt(c.ekf_rmse, 6),
            fmt(c.qukf_rmse, 6),
            fmt(c.improvement_pct, 2),
            fmt(c.ekf_convergence_s, 2),
            fmt(c.qukf_convergence_s, 2),
        );
    }
    s += &format!(
        "mean NIS: EKF {} / QUKF {} over {} samples from t = {} s\n",
        fmt(report.ekf_mean_nis, 3),
        fmt(report.qukf_mean_nis, 3),
        report.samples,
        report.window_start_s
    );
    s
}
