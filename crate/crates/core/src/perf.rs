//! Per-update latency measurement and state-dimension scaling sweep.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{EstimatorKind, ScenarioConfig};
use crate::dynamics::{ControlInput, TransitionModel};
use crate::estimation::{Estimator, Measurement, Qukf, TANGENT_DIM};
use crate::simulation::{run_scenario, SimulationError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub iterations: usize,
    pub mean_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: &mut [f64]) -> Self {
        samples_ms.sort_by(f64::total_cmp);
        let n = samples_ms.len();
        let mean = samples_ms.iter().sum::<f64>() / n.max(1) as f64;
        let p99 = if n == 0 { 0.0 } else { samples_ms[((0.99 * n as f64).ceil() as usize).clamp(1, n) - 1] };
        Self { iterations: n, mean_ms: mean, p99_ms: p99, max_ms: samples_ms.last().copied().unwrap_or(0.0) }
    }
}

/// Inputs and measurements recorded from a closed-loop run, replayed to
/// time the filter in isolation.
#[derive(Debug, Clone)]
pub struct RecordedInputs {
    pub first: Measurement,
    pub steps: Vec<(ControlInput, Measurement)>,
}

pub fn record_inputs(config: &ScenarioConfig, steps: usize) -> Result<RecordedInputs, SimulationError> {
    let mut cfg = config.clone();
    cfg.run.estimators = vec![EstimatorKind::Qukf];
    cfg.run.duration = steps as f64 * cfg.run.dt;
    let records = run_scenario(&cfg)?.records;
    // The input applied during step k is the one logged at sample k − 1.
    let steps = records.windows(2).map(|w| (w[0].control, w[1].measurement)).collect();
    Ok(RecordedInputs { first: records[0].measurement, steps })
}

/// Times every `qukf_step` over the recorded sequence, repeating it as
/// needed to reach `iterations` updates.
pub fn qukf_latency(
    config: &ScenarioConfig,
    inputs: &RecordedInputs,
    iterations: usize,
    padding: usize,
) -> Result<LatencyStats, SimulationError> {
    let mut filter_cfg = config.filter.clone();
    filter_cfg.padding = padding;
    let model = TransitionModel::new(config.system_params(), config.run.dt, filter_cfg.discretization)?;
    let new_filter = || {
        Qukf::new(model.clone(), &filter_cfg, &inputs.first)
            .map_err(|source| SimulationError::Estimation { estimator: "qukf", t: 0.0, source })
    };
    let mut filter = new_filter()?;
    let mut samples = Vec::with_capacity(iterations);
    let mut k = 0;
    while samples.len() < iterations {
        if k == inputs.steps.len() {
            filter = new_filter()?;
            k = 0;
        }
        let (u, y) = &inputs.steps[k];
        let start = Instant::now();
        filter
            .step(u, y)
            .map_err(|source| SimulationError::Estimation { estimator: "qukf", t: k as f64 * config.run.dt, source })?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
        k += 1;
    }
    Ok(LatencyStats::from_samples(&mut samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    /// Tangent dimension of the filter state.
    pub dimension: usize,
    pub mean_ms: f64,
}

/// Least-squares fit `t(N) = a + b N³`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicFit {
    pub intercept_ms: f64,
    pub cubic_ms: f64,
    pub r_squared: f64,
    /// Slope of `log t` against `log N`, for reference.
    pub loglog_slope: f64,
}

pub fn fit_cubic(points: &[ScalingPoint]) -> CubicFit {
    let n = points.len();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (points[i].dimension as f64).powi(3) });
    let y = DVector::from_iterator(n, points.iter().map(|p| p.mean_ms));
    let coef = (x.transpose() * &x)
        .try_inverse()
        .map(|inv| inv * x.transpose() * &y)
        .unwrap_or_else(|| DVector::zeros(2));
    let fitted = &x * &coef;
    let mean = y.mean();
    let ss_res = (&y - fitted).norm_squared();
    let ss_tot = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };

    let lx: Vec<f64> = points.iter().map(|p| (p.dimension as f64).ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.mean_ms.max(f64::MIN_POSITIVE).ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / n as f64, ly.iter().sum::<f64>() / n as f64);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    CubicFit { intercept_ms: coef[0], cubic_ms: coef[1], r_squared, loglog_slope: if var > 0.0 { cov / var } else { 0.0 } }
}

pub const DEFAULT_PADDINGS: [usize; 6] = [0, 21, 41, 61, 81, 101];

/// Mean update time for each padded state size.
pub fn scaling_sweep(
    config: &ScenarioConfig,
    inputs: &RecordedInputs,
    paddings: &[usize],
    iterations: usize,
) -> Result<Vec<ScalingPoint>, SimulationError> {
    paddings
        .iter()
        .map(|&p| {
            let stats = qukf_latency(config, inputs, iterations, p)?;
            Ok(ScalingPoint { dimension: TANGENT_DIM + p, mean_ms: stats.mean_ms })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub version: String,
    pub latency: LatencyStats,
    pub sweep: Vec<ScalingPoint>,
    pub fit: CubicFit,
}
