//! Quaternion unscented Kalman filter over the navigation state and the
//! observer memory, plus an additive-quaternion EKF used as a baseline.
//!
//! The error (tangent) coordinates are ordered
//! `[rotation vector (3), r (3), v (3), ω (3), Υ (6), dummy (1), padding…]`.

use nalgebra::{DMatrix, DVector, SMatrix, SVector, SymmetricEigen, Vector4, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, BodyState, ControlInput, Discretization, DynamicsError, ObserverState, TransitionModel, Wrench};
use crate::linalg::{self, LinalgError};
use crate::quat::{oplus, quat_diff, weighted_quat_average, RotationVector, UnitQuaternion, Vec3};

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Vector9 = SVector<f64, 9>;

/// Tangent dimension without padding.
pub const TANGENT_DIM: usize = 19;
/// Tangent dimension of a measurement.
pub const MEAS_DIM: usize = 9;

/// Offsets into the tangent coordinates.
pub mod tangent {
    pub const ROT: usize = 0;
    pub const R: usize = 3;
    pub const V: usize = 6;
    pub const OMEGA: usize = 9;
    pub const UPSILON: usize = 12;
    pub const DUMMY: usize = 18;
    pub const PAD: usize = 19;
}

const INNOVATION_CONDITION_LIMIT: f64 = 1e12;
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimationError {
    #[error("unscented scaling is degenerate: n + eta = {0}")]
    DegenerateScaling(f64),
    #[error("covariance square root failed: {0}")]
    FactorizationFailure(LinalgError),
    #[error("innovation covariance is ill-conditioned (condition number {condition:e})")]
    SingularInnovation { condition: f64 },
    #[error("configured eta {configured} disagrees with derived value {derived}")]
    EtaMismatch { configured: f64, derived: f64 },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// How quaternion perturbations, differences and means are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuatArithmetic {
    /// `⊕`/`⊖` on the manifold and the eigenvector mean.
    #[default]
    Manifold,
    /// Component-wise 4-vector arithmetic followed by renormalization.
    Naive,
}

impl QuatArithmetic {
    fn retract(self, q: &UnitQuaternion, d: &Vec3) -> UnitQuaternion {
        match self {
            Self::Manifold => oplus(q, &RotationVector(*d)),
            Self::Naive => UnitQuaternion::from_vector4(&(q.as_vector4() + Vector4::new(0.0, d.x, d.y, d.z) * 0.5)),
        }
    }

    fn local(self, q: &UnitQuaternion, base: &UnitQuaternion) -> Vec3 {
        match self {
            Self::Manifold => quat_diff(q, base).0,
            Self::Naive => {
                let aligned = if q.as_vector4().dot(&base.as_vector4()) < 0.0 { q.negated() } else { *q };
                (aligned.v - base.v) * 2.0
            }
        }
    }

    fn mean(self, quats: &[UnitQuaternion], weights: &[f64], fallback: &UnitQuaternion) -> UnitQuaternion {
        match self {
            Self::Manifold => weighted_quat_average(quats, weights).unwrap_or(*fallback),
            Self::Naive => {
                let reference = fallback.as_vector4();
                let sum = quats.iter().zip(weights).fold(Vector4::zeros(), |acc, (q, w)| {
                    let c = q.as_vector4();
                    acc + if c.dot(&reference) < 0.0 { -c } else { c } * *w
                });
                UnitQuaternion::from_vector4(&sum)
            }
        }
    }
}

/// Which sigma points feed the observation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationPoints {
    /// The propagated prediction points, reused as they are. The output
    /// statistics then leave out the process noise added to `P⁻`.
    #[default]
    Propagated,
    /// Fresh points drawn from the predicted mean and `P⁻`.
    Redrawn,
}

/// Filter state `[q, r, v, ω, Υ, 1]`; the trailing constant is implicit.
/// `padding` holds inert entries used only to scale the state dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub q: UnitQuaternion,
    pub r: Vec3,
    pub v: Vec3,
    pub omega: Vec3,
    pub upsilon: Vector6<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub padding: Vec<f64>,
}

impl Default for AugmentedState {
    fn default() -> Self {
        Self::from_parts(&BodyState::default(), &ObserverState::zero())
    }
}

impl AugmentedState {
    pub fn from_parts(body: &BodyState, obs: &ObserverState) -> Self {
        Self { q: body.q, r: body.r, v: body.v, omega: body.omega, upsilon: obs.upsilon, padding: Vec::new() }
    }

    pub fn body(&self) -> BodyState {
        BodyState { q: self.q, r: self.r, v: self.v, omega: self.omega }
    }

    pub fn observer(&self) -> ObserverState {
        ObserverState { upsilon: self.upsilon }
    }

    pub fn tangent_dim(&self) -> usize {
        TANGENT_DIM + self.padding.len()
    }

    /// `τ̂_h = Υ̂ + δ [v̂; ω̂]`.
    pub fn wrench(&self, delta: f64) -> Wrench {
        let gv = Vector6::new(self.v.x, self.v.y, self.v.z, self.omega.x, self.omega.y, self.omega.z);
        Wrench::from_vector(&(self.upsilon + gv * delta))
    }

    /// `self ⊕ d` with the rotation-vector rows applied to `q`.
    pub fn retract(&self, d: &DVector<f64>, arith: QuatArithmetic) -> Self {
        use tangent::*;
        let v3 = |i: usize| Vec3::new(d[i], d[i + 1], d[i + 2]);
        Self {
            q: arith.retract(&self.q, &v3(ROT)),
            r: self.r + v3(R),
            v: self.v + v3(V),
            omega: self.omega + v3(OMEGA),
            upsilon: self.upsilon + Vector6::from_iterator(d.rows(UPSILON, 6).iter().copied()),
            padding: self.padding.iter().enumerate().map(|(i, x)| x + d[PAD + i]).collect(),
        }
    }

    /// `self ⊖ base` in tangent coordinates; the dummy entry is zero.
    pub fn local(&self, base: &Self, arith: QuatArithmetic) -> DVector<f64> {
        use tangent::*;
        let mut d = DVector::zeros(self.tangent_dim());
        d.fixed_rows_mut::<3>(ROT).copy_from(&arith.local(&self.q, &base.q));
        d.fixed_rows_mut::<3>(R).copy_from(&(self.r - base.r));
        d.fixed_rows_mut::<3>(V).copy_from(&(self.v - base.v));
        d.fixed_rows_mut::<3>(OMEGA).copy_from(&(self.omega - base.omega));
        d.fixed_rows_mut::<6>(UPSILON).copy_from(&(self.upsilon - base.upsilon));
        for (i, (a, b)) in self.padding.iter().zip(&base.padding).enumerate() {
            d[PAD + i] = a - b;
        }
        d
    }

    pub fn norm_bound(&self) -> f64 {
        let pad = self.padding.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        self.r.norm().max(self.v.norm()).max(self.omega.norm()).max(self.upsilon.norm()).max(pad)
    }

    pub fn is_finite(&self) -> bool {
        self.q.as_vector4().iter().chain(self.r.iter()).chain(self.v.iter()).chain(self.omega.iter()).all(|x| x.is_finite())
            && self.upsilon.iter().chain(self.padding.iter()).all(|x| x.is_finite())
    }
}

/// Symmetric PSD covariance over the tangent coordinates with the dummy
/// row and column held at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCovariance(DMatrix<f64>);

impl ErrorCovariance {
    /// Wraps `p` after symmetrizing it and zeroing the dummy row/column.
    pub fn new(mut p: DMatrix<f64>) -> Self {
        linalg::symmetrize(&mut p);
        p.row_mut(tangent::DUMMY).fill(0.0);
        p.column_mut(tangent::DUMMY).fill(0.0);
        Self(p)
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn asymmetry(&self) -> f64 {
        (&self.0 - self.0.transpose()).norm()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.0.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Unscented transform weights.
#[derive(Debug, Clone, PartialEq)]
pub struct UtWeights {
    pub n: usize,
    pub eta: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl UtWeights {
    /// Sigma-point spread factor `√(n + η)`.
    pub fn spread(&self) -> f64 {
        (self.n as f64 + self.eta).sqrt()
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

pub fn ut_weights(n: usize, phi: f64, gamma: f64, sigma: f64) -> Result<UtWeights, EstimationError> {
    let nf = n as f64;
    let eta = phi * phi * (nf + sigma) - nf;
    if n == 0 || !(nf + eta > 0.0) {
        return Err(EstimationError::DegenerateScaling(nf + eta));
    }
    let m0 = eta / (nf + eta);
    let c0 = m0 + 1.0 - phi * phi + gamma;
    let mi = 1.0 / (2.0 * (nf + eta));
    let mut mean = vec![mi; 2 * n + 1];
    let mut cov = mean.clone();
    mean[0] = m0;
    cov[0] = c0;
    Ok(UtWeights { n, eta, mean, cov })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPointSet {
    pub points: Vec<AugmentedState>,
}

pub fn generate_sigma_points(
    x: &AugmentedState,
    p: &ErrorCovariance,
    w: &UtWeights,
    arith: QuatArithmetic,
) -> Result<SigmaPointSet, EstimationError> {
    let n = x.tangent_dim();
    let (sqrt, _) = linalg::psd_sqrt(p.matrix()).map_err(EstimationError::FactorizationFailure)?;
    let scale = w.spread();
    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(x.clone());
    for sign in [1.0, -1.0] {
        for j in 0..n {
            let c: DVector<f64> = sqrt.column(j) * (scale * sign);
            points.push(x.retract(&c, arith));
        }
    }
    Ok(SigmaPointSet { points })
}

fn weighted_state_mean(points: &[AugmentedState], w: &[f64], arith: QuatArithmetic, fallback: &UnitQuaternion) -> AugmentedState {
    let quats: Vec<UnitQuaternion> = points.iter().map(|s| s.q).collect();
    let mut mean = AugmentedState {
        q: arith.mean(&quats, w, fallback),
        r: Vec3::zeros(),
        v: Vec3::zeros(),
        omega: Vec3::zeros(),
        upsilon: Vector6::zeros(),
        padding: vec![0.0; points[0].padding.len()],
    };
    for (s, wi) in points.iter().zip(w) {
        mean.r += s.r * *wi;
        mean.v += s.v * *wi;
        mean.omega += s.omega * *wi;
        mean.upsilon += s.upsilon * *wi;
        for (m, x) in mean.padding.iter_mut().zip(&s.padding) {
            *m += x * wi;
        }
    }
    mean
}

/// Process model shared by both filters: the lifted transition with
/// padding entries held constant.
fn propagate_state(model: &TransitionModel, x: &AugmentedState, u: &ControlInput) -> Result<AugmentedState, DynamicsError> {
    let (body, obs) = model.propagate(&x.body(), &x.observer(), u)?;
    let mut next = AugmentedState::from_parts(&body, &obs);
    next.padding = x.padding.clone();
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub mean: AugmentedState,
    pub cov: ErrorCovariance,
    pub points: SigmaPointSet,
}

pub fn predict(
    x: &AugmentedState,
    p: &ErrorCovariance,
    u: &ControlInput,
    noise: &NoiseConfig,
    model: &TransitionModel,
    w: &UtWeights,
    arith: QuatArithmetic,
) -> Result<Prediction, EstimationError> {
    let sigma = generate_sigma_points(x, p, w, arith)?;
    let propagated = sigma
        .points
        .iter()
        .map(|s| propagate_state(model, s, u))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = weighted_state_mean(&propagated, &w.mean, arith, &propagated[0].q);
    let n = x.tangent_dim();
    let mut cov = noise.process_matrix(model.dt(), n - TANGENT_DIM);
    for (s, wc) in propagated.iter().zip(&w.cov) {
        let e = s.local(&mean, arith);
        cov.ger(*wc, &e, &e, 1.0);
    }
    Ok(Prediction { mean, cov: ErrorCovariance::new(cov), points: SigmaPointSet { points: propagated } })
}

/// Noisy pose and rate measurement `y = (q, r, ω)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub q: UnitQuaternion,
    pub r: Vec3,
    pub omega: Vec3,
}

impl Measurement {
    pub fn new(q: UnitQuaternion, r: Vec3, omega: Vec3) -> Self {
        Self { q: q.renormalized(), r, omega }
    }

    pub fn of_state(x: &AugmentedState) -> Self {
        Self { q: x.q, r: x.r, omega: x.omega }
    }

    pub fn of_body(s: &BodyState) -> Self {
        Self { q: s.q, r: s.r, omega: s.omega }
    }

    /// `self ⊖ base` as a 9-vector.
    pub fn local(&self, base: &Self, arith: QuatArithmetic) -> Vector9 {
        let dq = arith.local(&self.q, &base.q);
        let dr = self.r - base.r;
        let dw = self.omega - base.omega;
        Vector9::from_iterator(dq.iter().chain(dr.iter()).chain(dw.iter()).copied())
    }
}

#[derive(Debug, Clone)]
pub struct ObservationPrediction {
    pub mean: Measurement,
    pub p_yy: Matrix9,
    pub p_xy: DMatrix<f64>,
}

pub fn observe(
    points: &SigmaPointSet,
    state_mean: &AugmentedState,
    w: &UtWeights,
    noise: &NoiseConfig,
    arith: QuatArithmetic,
) -> ObservationPrediction {
    let ys: Vec<Measurement> = points.points.iter().map(Measurement::of_state).collect();
    let quats: Vec<UnitQuaternion> = ys.iter().map(|y| y.q).collect();
    let mut mean = Measurement {
        q: arith.mean(&quats, &w.mean, &state_mean.q),
        r: Vec3::zeros(),
        omega: Vec3::zeros(),
    };
    for (y, wi) in ys.iter().zip(&w.mean) {
        mean.r += y.r * *wi;
        mean.omega += y.omega * *wi;
    }
    let mut p_yy = noise.measurement_matrix();
    let mut p_xy = DMatrix::zeros(state_mean.tangent_dim(), MEAS_DIM);
    for ((x, y), wc) in points.points.iter().zip(&ys).zip(&w.cov) {
        let ey = y.local(&mean, arith);
        let ex = x.local(state_mean, arith);
        p_yy += ey * ey.transpose() * *wc;
        p_xy += ex * ey.transpose() * *wc;
    }
    ObservationPrediction { mean, p_yy: (p_yy + p_yy.transpose()) * 0.5, p_xy }
}

#[derive(Debug, Clone)]
pub struct Correction {
    pub state: AugmentedState,
    pub cov: ErrorCovariance,
    pub innovation: Vector9,
    /// Normalized innovation squared `νᵀ P_yy⁻¹ ν`.
    pub nis: f64,
}

fn check_condition(p_yy: &Matrix9) -> Result<(), EstimationError> {
    let eig = SymmetricEigen::new(*p_yy);
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= INNOVATION_CONDITION_LIMIT) {
        return Err(EstimationError::SingularInnovation { condition });
    }
    Ok(())
}

pub fn update(
    prior: &AugmentedState,
    prior_cov: &ErrorCovariance,
    obs: &ObservationPrediction,
    y: &Measurement,
    arith: QuatArithmetic,
) -> Result<Correction, EstimationError> {
    check_condition(&obs.p_yy)?;
    let chol = obs.p_yy.cholesky().ok_or(EstimationError::SingularInnovation { condition: f64::INFINITY })?;
    // K = P_xy P_yy⁻¹, solved as P_yy Kᵀ = P_xyᵀ.
    let pxy_t = obs.p_xy.transpose();
    let mut k_t = DMatrix::zeros(MEAS_DIM, pxy_t.ncols());
    for j in 0..pxy_t.ncols() {
        let col = Vector9::from_iterator(pxy_t.column(j).iter().copied());
        k_t.column_mut(j).copy_from(&chol.solve(&col));
    }
    let k = k_t.transpose();
    let innovation = y.local(&obs.mean, arith);
    let nis = innovation.dot(&chol.solve(&innovation));
    let nu = DVector::from_column_slice(innovation.as_slice());
    let mut dx = &k * nu;
    dx[tangent::DUMMY] = 0.0;
    let state = prior.retract(&dx, arith);
    let p_yy = DMatrix::from_column_slice(MEAS_DIM, MEAS_DIM, obs.p_yy.as_slice());
    let mut cov = prior_cov.matrix() - &k * p_yy * k.transpose();
    linalg::enforce_psd(&mut cov);
    Ok(Correction { state, cov: ErrorCovariance::new(cov), innovation, nis })
}

/// Isotropic variances per block of the tangent coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateBlocks {
    pub rotation: f64,
    pub position: f64,
    pub velocity: f64,
    pub angular_velocity: f64,
    pub wrench: f64,
    pub dummy: f64,
}

impl StateBlocks {
    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = Vec::with_capacity(TANGENT_DIM);
        d.extend([self.rotation; 3]);
        d.extend([self.position; 3]);
        d.extend([self.velocity; 3]);
        d.extend([self.angular_velocity; 3]);
        d.extend([self.wrench; 6]);
        d.push(self.dummy);
        d
    }

    fn entries(&self) -> [(&'static str, f64); 6] {
        [
            ("rotation", self.rotation),
            ("position", self.position),
            ("velocity", self.velocity),
            ("angular_velocity", self.angular_velocity),
            ("wrench", self.wrench),
            ("dummy", self.dummy),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementBlocks {
    pub rotation: f64,
    pub position: f64,
    pub angular_velocity: f64,
}

impl MeasurementBlocks {
    pub fn diagonal(&self) -> [f64; MEAS_DIM] {
        let (a, b, c) = (self.rotation, self.position, self.angular_velocity);
        [a, a, a, b, b, b, c, c, c]
    }

    pub fn zero() -> Self {
        Self { rotation: 0.0, position: 0.0, angular_velocity: 0.0 }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { rotation: self.rotation * k, position: self.position * k, angular_velocity: self.angular_velocity * k }
    }
}

/// Continuous process covariance `Q_c` and measurement covariance `R`.
/// The per-step process covariance is `Q_c T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub process: StateBlocks,
    pub measurement: MeasurementBlocks,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            process: StateBlocks {
                rotation: 1e-4,
                position: 1e-4,
                velocity: 1e-1,
                angular_velocity: 1e-3,
                wrench: 1e-2,
                dummy: 0.0,
            },
            measurement: MeasurementBlocks { rotation: 1e-4, position: 1e-4, angular_velocity: 1e-3 },
        }
    }
}

impl NoiseConfig {
    /// `Q_k = Q_c T`, padded with zeros.
    pub fn process_matrix(&self, dt: f64, padding: usize) -> DMatrix<f64> {
        let mut d = self.process.diagonal();
        d[tangent::DUMMY] = 0.0;
        d.resize(TANGENT_DIM + padding, 0.0);
        DMatrix::from_diagonal(&DVector::from_vec(d)) * dt
    }

    pub fn measurement_matrix(&self) -> Matrix9 {
        Matrix9::from_diagonal(&Vector9::from_column_slice(&self.measurement.diagonal()))
    }
}

/// Tuning shared by both filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Observer gain δ.
    pub delta: f64,
    pub noise: NoiseConfig,
    pub initial_covariance: StateBlocks,
    pub phi: f64,
    pub gamma: f64,
    pub sigma: f64,
    /// Optional cross-check; `η` is always derived from `φ`, `σ` and `n`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    pub discretization: Discretization,
    pub quaternion_arithmetic: QuatArithmetic,
    pub observation_points: ObservationPoints,
    /// Number of inert padding states appended to the filter state.
    #[serde(skip)]
    pub padding: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            delta: 72.0,
            noise: NoiseConfig::default(),
            initial_covariance: StateBlocks {
                rotation: 1e-4,
                position: 1e-2,
                velocity: 1e-2,
                angular_velocity: 1e-2,
                wrench: 1.0,
                dummy: 0.0,
            },
            phi: 1.0,
            gamma: 2.0,
            sigma: 0.0,
            eta: None,
            discretization: Discretization::Structured,
            quaternion_arithmetic: QuatArithmetic::Manifold,
            observation_points: ObservationPoints::Propagated,
            padding: 0,
        }
    }
}

pub const PADDING_VARIANCE: f64 = 1e-2;

impl FilterConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (section, blocks) in [
            ("filter.noise.process", self.noise.process.entries()),
            ("filter.initial_covariance", self.initial_covariance.entries()),
        ] {
            for (name, v) in blocks {
                if !(v >= 0.0 && v.is_finite()) {
                    out.push(format!("{section}.{name} must be a non-negative variance, got {v}"));
                }
            }
        }
        for (name, v) in [
            ("rotation", self.noise.measurement.rotation),
            ("position", self.noise.measurement.position),
            ("angular_velocity", self.noise.measurement.angular_velocity),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("filter.noise.measurement.{name} must be a non-negative variance, got {v}"));
            }
        }
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            out.push(format!("filter.phi must be positive, got {}", self.phi));
        }
        if !self.gamma.is_finite() || !self.sigma.is_finite() {
            out.push("filter.gamma and filter.sigma must be finite".to_string());
        }
        let n = (TANGENT_DIM + self.padding) as f64;
        let derived = self.phi * self.phi * (n + self.sigma) - n;
        if !(n + derived > 0.0) {
            out.push(format!("filter scaling gives n + eta = {} which must be positive", n + derived));
        }
        if let Some(eta) = self.eta {
            if (eta - derived).abs() > 1e-9 * derived.abs().max(1.0) {
                out.push(format!("filter.eta = {eta} disagrees with the derived value {derived}"));
            }
        }
        out
    }

    pub fn initial_matrix(&self) -> ErrorCovariance {
        let mut d = self.initial_covariance.diagonal();
        d[tangent::DUMMY] = 0.0;
        d.resize(TANGENT_DIM + self.padding, PADDING_VARIANCE);
        ErrorCovariance::from_diagonal(&d)
    }

    pub fn weights(&self) -> Result<UtWeights, EstimationError> {
        let w = ut_weights(TANGENT_DIM + self.padding, self.phi, self.gamma, self.sigma)?;
        if let Some(eta) = self.eta {
            if self.padding == 0 && (eta - w.eta).abs() > 1e-9 * w.eta.abs().max(1.0) {
                return Err(EstimationError::EtaMismatch { configured: eta, derived: w.eta });
            }
        }
        Ok(w)
    }

    /// Initial estimate: the first measurement at rest with zero observer memory.
    pub fn initial_state(&self, y: &Measurement) -> AugmentedState {
        AugmentedState {
            q: y.q,
            r: y.r,
            v: Vec3::zeros(),
            omega: y.omega,
            upsilon: Vector6::zeros(),
            padding: vec![0.0; self.padding],
        }
    }
}

/// Outcome of one predict/update cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub nis: f64,
}

/// Common interface of the estimators driven by the scenario loop.
pub trait Estimator {
    fn name(&self) -> &'static str;
    fn step(&mut self, u: &ControlInput, y: &Measurement) -> Result<StepReport, EstimationError>;
    fn estimate(&self) -> AugmentedState;
    fn wrench(&self) -> Wrench;
    /// Covariance in tangent coordinates (19×19 plus padding).
    fn covariance(&self) -> DMatrix<f64>;
}

#[derive(Debug, Clone)]
pub struct Qukf {
    model: TransitionModel,
    weights: UtWeights,
    noise: NoiseConfig,
    arith: QuatArithmetic,
    observation_points: ObservationPoints,
    state: AugmentedState,
    cov: ErrorCovariance,
    last: Option<Correction>,
}

impl Qukf {
    pub fn new(model: TransitionModel, config: &FilterConfig, first: &Measurement) -> Result<Self, EstimationError> {
        Ok(Self {
            weights: config.weights()?,
            noise: config.noise,
            arith: config.quaternion_arithmetic,
            observation_points: config.observation_points,
            state: config.initial_state(first),
            cov: config.initial_matrix(),
            model,
            last: None,
        })
    }

    pub fn with_state(
        model: TransitionModel,
        config: &FilterConfig,
        state: AugmentedState,
        cov: ErrorCovariance,
    ) -> Result<Self, EstimationError> {
        Ok(Self {
            weights: config.weights()?,
            noise: config.noise,
            arith: config.quaternion_arithmetic,
            observation_points: config.observation_points,
            state,
            cov,
            model,
            last: None,
        })
    }

    pub fn state(&self) -> &AugmentedState {
        &self.state
    }

    pub fn error_covariance(&self) -> &ErrorCovariance {
        &self.cov
    }

    pub fn weights(&self) -> &UtWeights {
        &self.weights
    }

    pub fn last_correction(&self) -> Option<&Correction> {
        self.last.as_ref()
    }

    /// One cycle of the filter: sigma points, propagation, quaternion mean,
    /// predicted covariance, predicted output, gain and correction.
    pub fn qukf_step(&mut self, u: &ControlInput, y: &Measurement) -> Result<&Correction, EstimationError> {
        let pred = predict(&self.state, &self.cov, u, &self.noise, &self.model, &self.weights, self.arith)?;
        let points = match self.observation_points {
            ObservationPoints::Redrawn => generate_sigma_points(&pred.mean, &pred.cov, &self.weights, self.arith)?,
            ObservationPoints::Propagated => pred.points,
        };
        let obs = observe(&points, &pred.mean, &self.weights, &self.noise, self.arith);
        let corr = update(&pred.mean, &pred.cov, &obs, y, self.arith)?;
        self.state = corr.state.clone();
        self.cov = corr.cov.clone();
        Ok(self.last.insert(corr))
    }
}

impl Estimator for Qukf {
    fn name(&self) -> &'static str {
        "qukf"
    }

    fn step(&mut self, u: &ControlInput, y: &Measurement) -> Result<StepReport, EstimationError> {
        let nis = self.qukf_step(u, y)?.nis;
        Ok(StepReport { nis })
    }

    fn estimate(&self) -> AugmentedState {
        self.state.clone()
    }

    fn wrench(&self) -> Wrench {
        self.state.wrench(self.model.params().delta)
    }

    fn covariance(&self) -> DMatrix<f64> {
        self.cov.matrix().clone()
    }
}

/// Dimension of the additive EKF state `[q (4), r, v, ω, Υ, 1]`.
pub const EKF_DIM: usize = dynamics::layout::DIM;
const EKF_MEAS_DIM: usize = 10;

/// Extended Kalman filter treating the quaternion as an unconstrained
/// 4-vector, with finite-difference Jacobians of the same discrete model.
#[derive(Debug, Clone)]
pub struct Ekf {
    model: TransitionModel,
    q_k: DMatrix<f64>,
    r: SMatrix<f64, EKF_MEAS_DIM, EKF_MEAS_DIM>,
    x: DVector<f64>,
    p: DMatrix<f64>,
    last_nis: f64,
}

/// Expands a tangent-block diagonal to the 20-entry EKF layout; a
/// rotation-vector variance `s` becomes `s/4` on each quaternion entry.
fn ekf_diagonal(blocks: &StateBlocks) -> Vec<f64> {
    let mut d = vec![blocks.rotation / 4.0; 4];
    d.extend([blocks.position; 3]);
    d.extend([blocks.velocity; 3]);
    d.extend([blocks.angular_velocity; 3]);
    d.extend([blocks.wrench; 6]);
    d.push(0.0);
    d
}

impl Ekf {
    pub fn new(model: TransitionModel, config: &FilterConfig, first: &Measurement) -> Self {
        let x0 = config.initial_state(first);
        let dt = model.dt();
        let m = &config.noise.measurement;
        let mut r_diag = vec![m.rotation / 4.0; 4];
        r_diag.extend([m.position; 3]);
        r_diag.extend([m.angular_velocity; 3]);
        Self {
            q_k: DMatrix::from_diagonal(&DVector::from_vec(ekf_diagonal(&config.noise.process))) * dt,
            r: SMatrix::from_diagonal(&SVector::from_column_slice(&r_diag)),
            x: dynamics::lift(&x0.body(), &x0.observer()),
            p: DMatrix::from_diagonal(&DVector::from_vec(ekf_diagonal(&config.initial_covariance))),
            model,
            last_nis: 0.0,
        }
    }

    pub fn with_state(model: TransitionModel, config: &FilterConfig, x: &AugmentedState, p: DMatrix<f64>) -> Self {
        let mut ekf = Self::new(model, config, &Measurement::of_state(x));
        ekf.x = dynamics::lift(&x.body(), &x.observer());
        ekf.p = p;
        ekf
    }

    pub fn lifted_state(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn lifted_covariance(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Discrete transition on the raw 20-vector. The quaternion output
    /// scales with the input norm so the map stays homogeneous in `q`.
    fn transition(&self, x: &DVector<f64>, u: &ControlInput) -> Result<DVector<f64>, DynamicsError> {
        let scale = x.rows(0, 4).norm();
        let (body, obs) = dynamics::unlift(x);
        let (body, obs) = self.model.propagate(&body, &obs, u)?;
        let mut next = dynamics::lift(&body, &obs);
        next.rows_mut(0, 4).scale_mut(scale);
        Ok(next)
    }

    fn jacobian(&self, x: &DVector<f64>, u: &ControlInput) -> Result<DMatrix<f64>, DynamicsError> {
        let mut f = DMatrix::zeros(EKF_DIM, EKF_DIM);
        for j in 0..EKF_DIM - 1 {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[j] += FD_STEP;
            minus[j] -= FD_STEP;
            let col = (self.transition(&plus, u)? - self.transition(&minus, u)?) / (2.0 * FD_STEP);
            f.column_mut(j).copy_from(&col);
        }
        Ok(f)
    }

    pub fn ekf_step(&mut self, u: &ControlInput, y: &Measurement) -> Result<StepReport, EstimationError> {
        let f = self.jacobian(&self.x, u)?;
        let x_pred = self.transition(&self.x, u)?;
        let mut p_pred = &f * &self.p * f.transpose() + &self.q_k;
        linalg::symmetrize(&mut p_pred);

        let mut h = SMatrix::<f64, EKF_MEAS_DIM, EKF_DIM>::zeros();
        for i in 0..7 {
            h[(i, i)] = 1.0;
        }
        for i in 0..3 {
            h[(7 + i, dynamics::layout::OMEGA + i)] = 1.0;
        }
        let mut yq = y.q.as_vector4();
        if yq.dot(&x_pred.fixed_rows::<4>(0)) < 0.0 {
            yq = -yq;
        }
        let y_vec = SVector::<f64, EKF_MEAS_DIM>::from_iterator(yq.iter().chain(y.r.iter()).chain(y.omega.iter()).copied());
        let y_pred = SVector::<f64, EKF_MEAS_DIM>::from_iterator(
            x_pred.rows(0, 7).iter().chain(x_pred.rows(dynamics::layout::OMEGA, 3).iter()).copied(),
        );
        let innovation = y_vec - y_pred;

        let h_dyn = DMatrix::from_column_slice(EKF_MEAS_DIM, EKF_DIM, h.as_slice());
        let ph_t = &p_pred * h_dyn.transpose();
        let s_dyn = &h_dyn * &ph_t + DMatrix::from_column_slice(EKF_MEAS_DIM, EKF_MEAS_DIM, self.r.as_slice());
        let s = SMatrix::<f64, EKF_MEAS_DIM, EKF_MEAS_DIM>::from_column_slice(s_dyn.as_slice());
        let s = (s + s.transpose()) * 0.5;
        let chol = s.cholesky().ok_or(EstimationError::SingularInnovation { condition: f64::INFINITY })?;
        let mut k_t = DMatrix::zeros(EKF_MEAS_DIM, EKF_DIM);
        for j in 0..EKF_DIM {
            let col = SVector::<f64, EKF_MEAS_DIM>::from_iterator(ph_t.row(j).iter().copied());
            k_t.column_mut(j).copy_from(&chol.solve(&col));
        }
        let k = k_t.transpose();
        self.last_nis = innovation.dot(&chol.solve(&innovation));
        let nu = DVector::from_column_slice(innovation.as_slice());
        let mut x = x_pred + &k * nu;
        x[dynamics::layout::ONE] = 1.0;
        let qn = x.rows(0, 4).norm();
        x.rows_mut(0, 4).unscale_mut(qn);
        let mut p = p_pred - &k * s_dyn * k.transpose();
        p.row_mut(dynamics::layout::ONE).fill(0.0);
        p.column_mut(dynamics::layout::ONE).fill(0.0);
        linalg::enforce_psd(&mut p);
        self.x = x;
        self.p = p;
        Ok(StepReport { nis: self.last_nis })
    }
}

impl Estimator for Ekf {
    fn name(&self) -> &'static str {
        "ekf"
    }

    fn step(&mut self, u: &ControlInput, y: &Measurement) -> Result<StepReport, EstimationError> {
        self.ekf_step(u, y)
    }

    fn estimate(&self) -> AugmentedState {
        let (body, obs) = dynamics::unlift(&self.x);
        AugmentedState::from_parts(&body, &obs)
    }

    fn wrench(&self) -> Wrench {
        self.estimate().wrench(self.model.params().delta)
    }

    /// Maps the quaternion block to rotation-vector coordinates through
    /// `δθ ≈ 2 Im(δq ⊗ q⁻¹)`.
    fn covariance(&self) -> DMatrix<f64> {
        let (body, _) = dynamics::unlift(&self.x);
        let g = quaternion_to_tangent_jacobian(&body.q);
        &g * &self.p * g.transpose()
    }
}

/// Linear map from the 20-entry EKF layout to tangent coordinates at `q`.
fn quaternion_to_tangent_jacobian(q: &UnitQuaternion) -> DMatrix<f64> {
    let (w, x, y, z) = (q.w, q.v.x, q.v.y, q.v.z);
    let rows = [[-x, w, -z, y], [-y, z, w, -x], [-z, -y, x, w]];
    let mut g = DMatrix::zeros(TANGENT_DIM, EKF_DIM);
    for (i, row) in rows.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            g[(i, j)] = 2.0 * c;
        }
    }
    for i in 3..TANGENT_DIM {
        g[(i, i + 1)] = 1.0;
    }
    g
}
