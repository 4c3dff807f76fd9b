//! Scenario configuration: TOML parsing, defaults, validation and digest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::SystemParams;
use crate::estimation::FilterConfig;
use crate::quat::Vec3;
use crate::simulation::{AdmittanceParams, ForceProfile, TrackingGains};

/// Keyword accepted in place of a path to select the built-in defaults.
pub const DEFAULT_KEYWORD: &str = "default";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Qukf,
    Ekf,
}

impl EstimatorKind {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Qukf => "qukf",
            EstimatorKind::Ekf => "ekf",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "qukf" => Ok(EstimatorKind::Qukf),
            "ekf" => Ok(EstimatorKind::Ekf),
            other => Err(format!("unknown estimator '{other}' (expected qukf or ekf)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Sample period, s.
    pub dt: f64,
    /// Scenario length, s.
    pub duration: f64,
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    /// Samples before this time are excluded from the metrics, s.
    pub metric_window_start: f64,
    /// Hover position at t = 0, m.
    pub initial_position: Vec3,
    /// Multiplier on the injected sensor-noise variances. The filter keeps
    /// its configured `R`; zero gives exact measurements.
    pub noise_scale: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            duration: 70.0,
            seed: 42,
            estimators: vec![EstimatorKind::Qukf, EstimatorKind::Ekf],
            metric_window_start: 1.0,
            initial_position: Vec3::zeros(),
            noise_scale: 1.0,
        }
    }
}

impl RunConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            out.push(format!("run.dt must be positive, got {}", self.dt));
        }
        if !(self.duration >= self.dt && self.duration.is_finite()) {
            out.push(format!("run.duration must be at least one step, got {}", self.duration));
        }
        if !(self.metric_window_start >= 0.0 && self.metric_window_start < self.duration) {
            out.push(format!(
                "run.metric_window_start must lie in [0, duration), got {}",
                self.metric_window_start
            ));
        }
        if self.estimators.is_empty() {
            out.push("run.estimators must name at least one of qukf, ekf".to_string());
        }
        for (i, e) in self.estimators.iter().enumerate() {
            if self.estimators[..i].contains(e) {
                out.push(format!("run.estimators lists {} twice", e.label()));
            }
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            out.push(format!("run.noise_scale must be non-negative, got {}", self.noise_scale));
        }
        if self.initial_position.iter().any(|x| !x.is_finite()) {
            out.push("run.initial_position must be finite".to_string());
        }
        out
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

/// Everything needed to reproduce one closed-loop run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub system: SystemParams,
    pub filter: FilterConfig,
    pub admittance: AdmittanceParams,
    pub controller: TrackingGains,
    pub run: RunConfig,
    pub profile: ForceProfile,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.chars().count(), |i| before[i + 1..].chars().count()) + 1;
    (line, column)
}

impl ScenarioConfig {
    /// Parses and validates TOML text. Missing keys take their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
            ConfigError::Parse { line, column, message: e.message().trim().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when `path` is `"default"`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        if path.as_os_str() == DEFAULT_KEYWORD {
            return Ok(Self::default());
        }
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = self.system_params().violations();
        out.extend(self.filter.violations());
        out.extend(self.admittance.violations());
        out.extend(self.controller.violations());
        out.extend(self.run.violations());
        out.extend(self.profile.violations());
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Validation(v))
        }
    }

    /// Physical parameters with the observer gain taken from the filter section.
    pub fn system_params(&self) -> SystemParams {
        SystemParams { delta: self.filter.delta, ..self.system.clone() }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config always serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_toml_string().as_bytes());
        hash.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}
