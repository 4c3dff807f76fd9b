//! Closed-loop scenario engine: truth integration, human wrench profile,
//! admittance reference, tracking control, sensor noise and metrics.

use std::time::Instant;

use nalgebra::{DMatrix, SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{EstimatorKind, ScenarioConfig};
use crate::dynamics::{
    allocate, integrate_rk4, saturate_allocation, BodyState, ControlInput, DynamicsError, SystemParams, TransitionModel,
    Vector8, Wrench,
};
use crate::estimation::{AugmentedState, Ekf, EstimationError, Estimator, MeasurementBlocks, Measurement, Qukf};
use crate::linalg::{self, LinalgError};
use crate::quat::{oplus, quat_diff, rot_to_quat, Mat3, RotationVector, UnitQuaternion, Vec3, E_Z};

const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("{estimator} estimate diverged at t = {t:.3} s (norm {norm:e})")]
    DivergenceDetected { estimator: &'static str, t: f64, norm: f64 },
    #[error("{estimator} failed at t = {t:.3} s: {source}")]
    Estimation { estimator: &'static str, t: f64, source: EstimationError },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("scenario selects no estimator")]
    NoEstimator,
}

/// One pulse of the human wrench. The wrench ramps in over `ramp` seconds
/// after `start` and out over the `ramp` seconds before `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceSegment {
    pub start: f64,
    pub end: f64,
    #[serde(default)]
    pub force: Vec3,
    #[serde(default)]
    pub torque: Vec3,
    #[serde(default)]
    pub ramp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceProfile {
    #[serde(default)]
    pub segments: Vec<ForceSegment>,
}

impl Default for ForceProfile {
    fn default() -> Self {
        let seg = |start: f64, end: f64, force: Vec3, torque: Vec3| ForceSegment { start, end, force, torque, ramp: 1.0 };
        Self {
            segments: vec![
                seg(5.0, 15.0, Vec3::new(2.0, 0.0, 0.0), Vec3::zeros()),
                seg(20.0, 30.0, Vec3::new(0.0, 2.0, 0.0), Vec3::zeros()),
                seg(35.0, 45.0, Vec3::new(0.0, 0.0, 2.0), Vec3::zeros()),
                seg(50.0, 58.0, Vec3::zeros(), Vec3::new(0.0, 0.0, 0.5)),
            ],
        }
    }
}

/// `3s² − 2s³` on `[0, 1]`.
pub fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

impl ForceProfile {
    pub fn none() -> Self {
        Self { segments: Vec::new() }
    }

    pub fn step(start: f64, end: f64, force: Vec3) -> Self {
        Self { segments: vec![ForceSegment { start, end, force, torque: Vec3::zeros(), ramp: 0.0 }] }
    }

    pub fn eval(&self, t: f64) -> Wrench {
        let mut w = Wrench::zero();
        for s in &self.segments {
            if t < s.start || t >= s.end {
                continue;
            }
            let gain = if s.ramp > 0.0 {
                smoothstep((t - s.start) / s.ramp).min(smoothstep((s.end - t) / s.ramp))
            } else {
                1.0
            };
            w.force += s.force * gain;
            w.torque += s.torque * gain;
        }
        w
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut sorted: Vec<&ForceSegment> = self.segments.iter().collect();
        sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.start >= 0.0 && s.end > s.start) {
                out.push(format!("profile.segments[{i}] needs 0 <= start < end, got [{}, {}]", s.start, s.end));
            }
            if !(s.ramp >= 0.0) || 2.0 * s.ramp > s.end - s.start {
                out.push(format!("profile.segments[{i}].ramp must be >= 0 and fit twice in the segment, got {}", s.ramp));
            }
            if s.force.iter().chain(s.torque.iter()).any(|x| !x.is_finite()) {
                out.push(format!("profile.segments[{i}] has non-finite wrench entries"));
            }
        }
        for pair in sorted.windows(2) {
            if pair[1].start < pair[0].end {
                out.push(format!("profile segments [{}, {}] and [{}, {}] overlap", pair[0].start, pair[0].end, pair[1].start, pair[1].end));
            }
        }
        out
    }
}

/// Virtual dynamics `M_v r̈ + C_v ṙ + K_v r = F̂_h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmittanceParams {
    #[serde(with = "crate::quat::mat3_rows")]
    pub mass: Mat3,
    #[serde(with = "crate::quat::mat3_rows")]
    pub damping: Mat3,
    #[serde(with = "crate::quat::mat3_rows")]
    pub stiffness: Mat3,
}

impl Default for AdmittanceParams {
    fn default() -> Self {
        Self { mass: Mat3::identity(), damping: Mat3::identity() * 1.59, stiffness: Mat3::zeros() }
    }
}

impl AdmittanceParams {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let check = |m: &Mat3, name: &str, strict: bool, out: &mut Vec<String>| {
            let sym = (m - m.transpose()).norm() <= 1e-12;
            let eig = nalgebra::SymmetricEigen::new(*m);
            let ok = eig.eigenvalues.iter().all(|x| if strict { *x > 0.0 } else { *x >= 0.0 });
            if !sym || !ok {
                let kind = if strict { "positive definite" } else { "positive semidefinite" };
                out.push(format!("admittance.{name} must be symmetric {kind}"));
            }
        };
        check(&self.mass, "mass", true, &mut out);
        check(&self.damping, "damping", false, &mut out);
        check(&self.stiffness, "stiffness", false, &mut out);
        out
    }
}

/// Reference produced by the admittance layer, relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Reference {
    pub position: Vec3,
    pub velocity: Vec3,
    pub yaw: f64,
}

type Matrix9 = SMatrix<f64, 9, 9>;

/// Admittance integrator with the zero-order-hold transition of the
/// augmented system `[r, ṙ, F]` precomputed.
#[derive(Debug, Clone)]
pub struct Admittance {
    phi: Matrix9,
}

impl Admittance {
    pub fn new(params: AdmittanceParams, dt: f64) -> Result<Self, SimulationError> {
        let mass_inv = params.mass.try_inverse().ok_or(LinalgError::FactorizationFailure)?;
        let mut a = DMatrix::<f64>::zeros(9, 9);
        a.view_mut((0, 3), (3, 3)).copy_from(&Mat3::identity());
        a.view_mut((3, 0), (3, 3)).copy_from(&(-mass_inv * params.stiffness));
        a.view_mut((3, 3), (3, 3)).copy_from(&(-mass_inv * params.damping));
        a.view_mut((3, 6), (3, 3)).copy_from(&mass_inv);
        let phi = linalg::expm(&(a * dt))?;
        Ok(Self { phi: Matrix9::from_column_slice(phi.as_slice()) })
    }

    pub fn step(&self, reference: &Reference, force: &Vec3) -> Reference {
        let z = SVector::<f64, 9>::from_iterator(
            reference.position.iter().chain(reference.velocity.iter()).chain(force.iter()).copied(),
        );
        let next = self.phi * z;
        Reference {
            position: Vec3::new(next[0], next[1], next[2]),
            velocity: Vec3::new(next[3], next[4], next[5]),
            yaw: reference.yaw,
        }
    }
}

/// One step of the admittance dynamics from scratch.
pub fn admittance_reference(
    tau_hat: &Wrench,
    reference: &Reference,
    params: &AdmittanceParams,
    dt: f64,
) -> Result<Reference, SimulationError> {
    Ok(Admittance::new(*params, dt)?.step(reference, &tau_hat.force))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingGains {
    /// Position stiffness, 1/s².
    pub position_p: f64,
    /// Position damping, 1/s.
    pub position_d: f64,
    /// Roll and pitch stiffness, 1/s² (scaled by the inertia).
    pub attitude_p: f64,
    /// Roll and pitch damping, 1/s (scaled by the inertia).
    pub attitude_d: f64,
    /// Yaw stiffness, 1/s². Kept low because rotor drag gives little yaw authority.
    pub yaw_p: f64,
    /// Yaw damping, 1/s.
    pub yaw_d: f64,
}

impl Default for TrackingGains {
    fn default() -> Self {
        Self { position_p: 4.0, position_d: 4.0, attitude_p: 100.0, attitude_d: 20.0, yaw_p: 4.0, yaw_d: 4.0 }
    }
}

impl TrackingGains {
    pub fn violations(&self) -> Vec<String> {
        [
            ("position_p", self.position_p),
            ("position_d", self.position_d),
            ("attitude_p", self.attitude_p),
            ("attitude_d", self.attitude_d),
            ("yaw_p", self.yaw_p),
            ("yaw_d", self.yaw_d),
        ]
        .iter()
        .filter(|(_, v)| !(*v >= 0.0 && v.is_finite()))
        .map(|(k, v)| format!("controller.{k} must be non-negative, got {v}"))
        .collect()
    }
}

const YAW_AUTHORITY_MARGIN: f64 = 0.9;

/// Attitude whose body z axis is `z_b` with the given heading.
fn desired_attitude(z_b: &Vec3, yaw: f64) -> UnitQuaternion {
    let heading = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
    let mut y_b = z_b.cross(&heading);
    if y_b.norm() < 1e-9 {
        y_b = z_b.cross(&Vec3::x());
    }
    let y_b = y_b.normalize();
    let x_b = y_b.cross(z_b);
    let r = Mat3::from_columns(&[x_b, y_b, *z_b]);
    rot_to_quat(&r).unwrap_or_default()
}

/// PD position loop feeding a quaternion-error PD attitude loop.
pub fn tracking_controller(s: &BodyState, reference: &Reference, gains: &TrackingGains, p: &SystemParams) -> ControlInput {
    let accel = (reference.position - s.r) * gains.position_p
        + (reference.velocity - s.v) * gains.position_d
        + E_Z * p.gravity;
    let z_b = if accel.norm() > 1e-9 { accel.normalize() } else { E_Z };
    let thrust = (p.mass * accel.dot(&s.q.rotate(&E_Z))).clamp(0.0, 2.0 * p.u_max);

    let q_d = desired_attitude(&z_b, reference.yaw);
    let q_e = q_d.inverse().mul(&s.q);
    let sign = if q_e.w < 0.0 { -1.0 } else { 1.0 };
    let err = q_e.v * (2.0 * sign);
    let kp = Vec3::new(gains.attitude_p, gains.attitude_p, gains.yaw_p);
    let kd = Vec3::new(gains.attitude_d, gains.attitude_d, gains.yaw_d);
    let alpha = -err.component_mul(&kp) - s.omega.component_mul(&kd);
    let mut moments = p.inertia * alpha + s.omega.cross(&(p.inertia * s.omega));
    // Yaw comes only from rotor drag; keep the demand inside what the
    // rotors can deliver at this thrust so clipping never costs roll/pitch.
    let yaw_limit = YAW_AUTHORITY_MARGIN * p.rotor.nu() * thrust.min(2.0 * p.u_max - thrust).max(0.0);
    moments.z = moments.z.clamp(-yaw_limit, yaw_limit);
    ControlInput::new(thrust, moments)
}

/// Independent normal streams for the rotation, position and rate channels.
#[derive(Debug, Clone)]
pub struct NoiseStreams {
    rotation: ChaCha20Rng,
    position: ChaCha20Rng,
    angular_velocity: ChaCha20Rng,
}

impl NoiseStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |id: u64| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        Self { rotation: stream(1), position: stream(2), angular_velocity: stream(3) }
    }
}

fn normal3(rng: &mut ChaCha20Rng, variance: f64) -> Vec3 {
    let sd = variance.sqrt();
    let mut draw = || rng.sample::<f64, _>(StandardNormal) * sd;
    Vec3::new(draw(), draw(), draw())
}

/// `r_m = r + n_r`, `ω_m = ω + n_ω`, `q_m = q ⊕ n_q`.
pub fn inject_noise(truth: &BodyState, r: &MeasurementBlocks, streams: &mut NoiseStreams) -> Measurement {
    let n_q = normal3(&mut streams.rotation, r.rotation);
    let n_r = normal3(&mut streams.position, r.position);
    let n_w = normal3(&mut streams.angular_velocity, r.angular_velocity);
    Measurement::new(oplus(&truth.q, &RotationVector(n_q)), truth.r + n_r, truth.omega + n_w)
}

/// Estimator output at one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub state: AugmentedState,
    pub wrench: Wrench,
    pub nis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub t: f64,
    pub truth: BodyState,
    pub truth_wrench: Wrench,
    pub measurement: Measurement,
    pub qukf: Option<EstimateRecord>,
    pub ekf: Option<EstimateRecord>,
    pub control: ControlInput,
    pub rotor_commands: [f64; 8],
}

/// Wall-clock cost of the estimator updates in one run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub qukf_mean_ms: Option<f64>,
    pub ekf_mean_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutput {
    pub records: Vec<TelemetryRecord>,
    pub runtime: RuntimeStats,
}

fn record_of(est: &dyn Estimator, nis: f64) -> EstimateRecord {
    EstimateRecord { state: est.estimate(), wrench: est.wrench(), nis }
}

fn check_divergence(name: &'static str, t: f64, x: &AugmentedState) -> Result<(), SimulationError> {
    let norm = x.norm_bound();
    if !x.is_finite() || norm > DIVERGENCE_LIMIT {
        return Err(SimulationError::DivergenceDetected { estimator: name, t, norm });
    }
    Ok(())
}

/// Runs the closed loop described by `config`.
///
/// Each step: truth RK4 step under the previous input, noise injection,
/// estimator predict/update with the previous input, admittance reference
/// from the wrench estimate, tracking control, allocation and saturation.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioOutput, SimulationError> {
    let params = config.system_params();
    let dt = config.run.dt;
    let steps = (config.run.duration / dt).round() as usize;
    let filter = &config.filter;
    let model = TransitionModel::new(params.clone(), dt, filter.discretization)?;
    let admittance = Admittance::new(config.admittance, dt)?;
    let mut streams = NoiseStreams::new(config.run.seed);
    let r_blocks = filter.noise.measurement.scaled(config.run.noise_scale);

    let mut truth = BodyState::at_rest(config.run.initial_position);
    let y0 = inject_noise(&truth, &r_blocks, &mut streams);
    let wants = |k: EstimatorKind| config.run.estimators.contains(&k);
    let mut qukf = if wants(EstimatorKind::Qukf) {
        Some(Qukf::new(model.clone(), filter, &y0).map_err(|source| SimulationError::Estimation { estimator: "qukf", t: 0.0, source })?)
    } else {
        None
    };
    let mut ekf = if wants(EstimatorKind::Ekf) { Some(Ekf::new(model.clone(), filter, &y0)) } else { None };
    if qukf.is_none() && ekf.is_none() {
        return Err(SimulationError::NoEstimator);
    }

    let mut u = ControlInput::hover(&params);
    let mut commands = saturate_allocation(&allocate(&u, &params)?, &params).commands;
    let mut reference = Reference::default();
    let anchor = config.run.initial_position;
    let mut records = Vec::with_capacity(steps + 1);
    records.push(TelemetryRecord {
        t: 0.0,
        truth,
        truth_wrench: config.profile.eval(0.0),
        measurement: y0,
        qukf: qukf.as_ref().map(|f| record_of(f, 0.0)),
        ekf: ekf.as_ref().map(|f| record_of(f, 0.0)),
        control: u,
        rotor_commands: rotor_array(&commands),
    });
    let (mut qukf_time, mut ekf_time) = (0.0f64, 0.0f64);

    for k in 1..=steps {
        let t_prev = (k - 1) as f64 * dt;
        let t = k as f64 * dt;
        truth = integrate_rk4(&truth, &u, |h| config.profile.eval(t_prev + h), &params, dt);
        let y = inject_noise(&truth, &r_blocks, &mut streams);

        let qukf_rec = match qukf.as_mut() {
            Some(f) => {
                let start = Instant::now();
                let rep = f.step(&u, &y).map_err(|source| SimulationError::Estimation { estimator: "qukf", t, source })?;
                qukf_time += start.elapsed().as_secs_f64();
                check_divergence("qukf", t, f.state())?;
                Some(record_of(f, rep.nis))
            }
            None => None,
        };
        let ekf_rec = match ekf.as_mut() {
            Some(f) => {
                let start = Instant::now();
                let rep = f.step(&u, &y).map_err(|source| SimulationError::Estimation { estimator: "ekf", t, source })?;
                ekf_time += start.elapsed().as_secs_f64();
                let est = f.estimate();
                check_divergence("ekf", t, &est)?;
                Some(record_of(f, rep.nis))
            }
            None => None,
        };

        let lead = qukf_rec.as_ref().or(ekf_rec.as_ref()).expect("at least one estimator");
        reference = admittance.step(&reference, &lead.wrench.force);
        let absolute = Reference { position: reference.position + anchor, ..reference };
        let demand = tracking_controller(&lead.state.body(), &absolute, &config.controller, &params);
        let sat = saturate_allocation(&allocate(&demand, &params)?, &params);
        u = sat.applied;
        commands = sat.commands;

        records.push(TelemetryRecord {
            t,
            truth,
            truth_wrench: config.profile.eval(t),
            measurement: y,
            qukf: qukf_rec,
            ekf: ekf_rec,
            control: u,
            rotor_commands: rotor_array(&commands),
        });
    }

    let per_step = |total: f64, on: bool| on.then(|| total * 1e3 / steps.max(1) as f64);
    Ok(ScenarioOutput {
        records,
        runtime: RuntimeStats { qukf_mean_ms: per_step(qukf_time, qukf.is_some()), ekf_mean_ms: per_step(ekf_time, ekf.is_some()) },
    })
}

fn rotor_array(v: &Vector8) -> [f64; 8] {
    std::array::from_fn(|i| v[i])
}

/// Estimation-error channels reported in the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    X,
    Y,
    Z,
    Vx,
    Vy,
    Vz,
    Attitude,
    P,
    Q,
    R,
    Fx,
    Fy,
    Fz,
    Mx,
    My,
    Mz,
}

impl Channel {
    pub const ALL: [Channel; 16] = [
        Channel::X,
        Channel::Y,
        Channel::Z,
        Channel::Vx,
        Channel::Vy,
        Channel::Vz,
        Channel::Attitude,
        Channel::P,
        Channel::Q,
        Channel::R,
        Channel::Fx,
        Channel::Fy,
        Channel::Fz,
        Channel::Mx,
        Channel::My,
        Channel::Mz,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Channel::X => "x",
            Channel::Y => "y",
            Channel::Z => "z",
            Channel::Vx => "vx",
            Channel::Vy => "vy",
            Channel::Vz => "vz",
            Channel::Attitude => "attitude",
            Channel::P => "p",
            Channel::Q => "q",
            Channel::R => "r",
            Channel::Fx => "F_hx",
            Channel::Fy => "F_hy",
            Channel::Fz => "F_hz",
            Channel::Mx => "M_hx",
            Channel::My => "M_hy",
            Channel::Mz => "M_hz",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Channel::X | Channel::Y | Channel::Z => "m",
            Channel::Vx | Channel::Vy | Channel::Vz => "m/s",
            Channel::Attitude => "rad",
            Channel::P | Channel::Q | Channel::R => "rad/s",
            Channel::Fx | Channel::Fy | Channel::Fz => "N",
            Channel::Mx | Channel::My | Channel::Mz => "N.m",
        }
    }

    /// Signed error (truth minus estimate); the attitude channel is the
    /// rotation angle between the two.
    pub fn error(self, truth: &BodyState, wrench: &Wrench, est: &EstimateRecord) -> f64 {
        let s = &est.state;
        match self {
            Channel::X => truth.r.x - s.r.x,
            Channel::Y => truth.r.y - s.r.y,
            Channel::Z => truth.r.z - s.r.z,
            Channel::Vx => truth.v.x - s.v.x,
            Channel::Vy => truth.v.y - s.v.y,
            Channel::Vz => truth.v.z - s.v.z,
            Channel::Attitude => quat_diff(&truth.q, &s.q).angle(),
            Channel::P => truth.omega.x - s.omega.x,
            Channel::Q => truth.omega.y - s.omega.y,
            Channel::R => truth.omega.z - s.omega.z,
            Channel::Fx => wrench.force.x - est.wrench.force.x,
            Channel::Fy => wrench.force.y - est.wrench.force.y,
            Channel::Fz => wrench.force.z - est.wrench.force.z,
            Channel::Mx => wrench.torque.x - est.wrench.torque.x,
            Channel::My => wrench.torque.y - est.wrench.torque.y,
            Channel::Mz => wrench.torque.z - est.wrench.torque.z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub channel: Channel,
    pub qukf_rmse: Option<f64>,
    pub ekf_rmse: Option<f64>,
    /// `(EKF − QUKF) / EKF × 100`.
    pub improvement_pct: Option<f64>,
    pub qukf_convergence_s: Option<f64>,
    pub ekf_convergence_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub window_start_s: f64,
    pub samples: usize,
    pub channels: Vec<ChannelMetrics>,
    pub qukf_mean_nis: Option<f64>,
    pub ekf_mean_nis: Option<f64>,
}

impl MetricsReport {
    pub fn channel(&self, c: Channel) -> Option<&ChannelMetrics> {
        self.channels.iter().find(|m| m.channel == c)
    }
}

pub fn rmse(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

pub fn improvement_pct(ekf: f64, qukf: f64) -> f64 {
    (ekf - qukf) / ekf * 100.0
}

/// Time from the error peak until `|e|` enters and stays inside
/// `band × peak`. `None` when the series is empty or identically zero.
pub fn convergence_time(times: &[f64], errors: &[f64], band: f64) -> Option<f64> {
    let (peak_idx, peak) = errors
        .iter()
        .map(|e| e.abs())
        .enumerate()
        .fold((0usize, 0.0f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    if peak == 0.0 || times.len() != errors.len() {
        return None;
    }
    let limit = band * peak;
    let mut settle = errors.len();
    for i in (peak_idx..errors.len()).rev() {
        if errors[i].abs() > limit {
            break;
        }
        settle = i;
    }
    (settle < errors.len()).then(|| times[settle] - times[peak_idx])
}

pub const CONVERGENCE_BAND: f64 = 0.05;

/// RMSE, improvement and convergence per channel over samples with
/// `t ≥ window_start`.
pub fn compute_metrics(records: &[TelemetryRecord], window_start: f64) -> MetricsReport {
    let window: Vec<&TelemetryRecord> = records.iter().filter(|r| r.t >= window_start).collect();
    let times: Vec<f64> = window.iter().map(|r| r.t).collect();
    let series = |c: Channel, pick: fn(&TelemetryRecord) -> Option<&EstimateRecord>| -> Option<Vec<f64>> {
        window.iter().map(|r| pick(r).map(|e| c.error(&r.truth, &r.truth_wrench, e))).collect()
    };
    let channels = Channel::ALL
        .iter()
        .map(|&c| {
            let q = series(c, |r| r.qukf.as_ref());
            let e = series(c, |r| r.ekf.as_ref());
            let qr = q.as_deref().map(rmse);
            let er = e.as_deref().map(rmse);
            ChannelMetrics {
                channel: c,
                qukf_rmse: qr,
                ekf_rmse: er,
                improvement_pct: match (er, qr) {
                    (Some(a), Some(b)) if a > 0.0 => Some(improvement_pct(a, b)),
                    _ => None,
                },
                qukf_convergence_s: q.as_deref().and_then(|s| convergence_time(&times, s, CONVERGENCE_BAND)),
                ekf_convergence_s: e.as_deref().and_then(|s| convergence_time(&times, s, CONVERGENCE_BAND)),
            }
        })
        .collect();
    let mean_nis = |pick: fn(&TelemetryRecord) -> Option<&EstimateRecord>| -> Option<f64> {
        let v: Option<Vec<f64>> = window.iter().map(|r| pick(r).map(|e| e.nis)).collect();
        v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    MetricsReport {
        window_start_s: window_start,
        samples: window.len(),
        channels,
        qukf_mean_nis: mean_nis(|r| r.qukf.as_ref()),
        ekf_mean_nis: mean_nis(|r| r.ekf.as_ref()),
    }
}
