//! Rigid-body model of the two-quadrotor/payload assembly, control
//! allocation, and the acceleration-free external wrench observer.
//!
//! Frames: positions, velocities and the human force live in the inertial
//! frame (z up); angular velocity, control moments and the human torque
//! live in the body frame.

use nalgebra::{DMatrix, DVector, Matrix4, Matrix6, SMatrix, SVector, SymmetricEigen, Vector4, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::quat::{quat_to_rot, skew, Mat3, UnitQuaternion, Vec3, E_Z};

pub type Matrix4x8 = SMatrix<f64, 4, 8>;
pub type Matrix6x4 = SMatrix<f64, 6, 4>;
pub type Vector8 = SVector<f64, 8>;

/// Row offsets of the lifted 20-entry state `[q, r, v, ω, Υ, 1]`.
pub mod layout {
    pub const Q: usize = 0;
    pub const R: usize = 4;
    pub const V: usize = 7;
    pub const OMEGA: usize = 10;
    pub const UPSILON: usize = 13;
    pub const ONE: usize = 19;
    pub const DIM: usize = 20;
}

const ALLOCATION_CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("allocation Gram matrix is ill-conditioned (condition number {condition:e})")]
    SingularAllocation { condition: f64 },
    #[error("sampling interval must be positive, got {0}")]
    InvalidStep(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotorParams {
    /// Thrust per squared rotor speed, N·s².
    pub thrust_constant: f64,
    /// Drag moment per squared rotor speed, N·m·s².
    pub drag_constant: f64,
    /// Rotor axis distance from the vehicle centre, m.
    pub arm_length: f64,
}

impl Default for RotorParams {
    fn default() -> Self {
        Self { thrust_constant: 1.0e-5, drag_constant: 2.0e-7, arm_length: 0.2 }
    }
}

impl RotorParams {
    /// Moment-to-thrust ratio ν = k_m / k_t.
    pub fn nu(&self) -> f64 {
        self.drag_constant / self.thrust_constant
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemParams {
    /// Total mass of both vehicles and the payload, kg.
    pub mass: f64,
    /// Total inertia about the system centre of mass, kg·m².
    #[serde(with = "crate::quat::mat3_rows")]
    pub inertia: Mat3,
    pub gravity: f64,
    pub payload_length: f64,
    /// Vehicle attachment points relative to the centre of mass (body frame), m.
    pub attach_offsets: [Vec3; 2],
    /// Per-vehicle thrust cap, N.
    pub u_max: f64,
    /// Observer gain δ; configured with the filter tuning.
    #[serde(skip, default = "default_delta")]
    pub delta: f64,
    pub rotor: RotorParams,
    /// Allocation cost coefficients κ_ij, vehicle-major.
    pub lambda_weights: [f64; 8],
}

fn default_delta() -> f64 {
    72.0
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            mass: 3.49,
            inertia: Mat3::from_diagonal(&Vec3::new(3.227, 0.061, 3.277)),
            gravity: 9.81,
            payload_length: 2.0,
            // The small pitch inertia puts the beam along body y.
            attach_offsets: [Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, -1.0, 0.0)],
            u_max: 35.0,
            delta: default_delta(),
            rotor: RotorParams::default(),
            lambda_weights: [1.0; 8],
        }
    }
}

impl SystemParams {
    /// Lists every violated invariant; empty when the parameters are valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            out.push(format!("system.mass must be positive, got {}", self.mass));
        }
        let asym = (self.inertia - self.inertia.transpose()).norm();
        let eig = SymmetricEigen::new(self.inertia);
        if asym > 1e-12 || eig.eigenvalues.iter().any(|x| !(*x > 0.0)) {
            out.push("system.inertia must be symmetric positive definite".to_string());
        }
        if !(self.gravity >= 0.0 && self.gravity.is_finite()) {
            out.push(format!("system.gravity must be non-negative, got {}", self.gravity));
        }
        if !(self.payload_length > 0.0) {
            out.push(format!("system.payload_length must be positive, got {}", self.payload_length));
        }
        if !(self.u_max > 0.0) {
            out.push(format!("system.u_max must be positive, got {}", self.u_max));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            out.push(format!("filter.delta must be positive, got {}", self.delta));
        }
        if !(self.rotor.thrust_constant > 0.0) || !(self.rotor.drag_constant > 0.0) || !(self.rotor.arm_length > 0.0) {
            out.push("system.rotor constants must be positive".to_string());
        }
        if self.lambda_weights.iter().any(|k| !(*k > 0.0)) {
            out.push("system.lambda_weights must all be positive".to_string());
        }
        out
    }

    pub fn inertia_inverse(&self) -> Mat3 {
        self.inertia.try_inverse().unwrap_or_else(Mat3::zeros)
    }

    /// Generalized inertia `blkdiag(m_s I₃, 𝒥)`.
    pub fn mass_matrix(&self) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Mat3::identity() * self.mass));
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.inertia);
        m
    }

    /// Observer gain matrix `A = δ M⁻¹`.
    pub fn observer_gain(&self) -> Matrix6<f64> {
        let mut a = Matrix6::zeros();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Mat3::identity() * (self.delta / self.mass)));
        a.fixed_view_mut::<3, 3>(3, 3).copy_from(&(self.inertia_inverse() * self.delta));
        a
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyState {
    pub q: UnitQuaternion,
    pub r: Vec3,
    pub v: Vec3,
    pub omega: Vec3,
}

impl Default for BodyState {
    fn default() -> Self {
        Self { q: UnitQuaternion::identity(), r: Vec3::zeros(), v: Vec3::zeros(), omega: Vec3::zeros() }
    }
}

impl BodyState {
    pub fn at_rest(r: Vec3) -> Self {
        Self { r, ..Self::default() }
    }

    /// Generalized velocity `[v; ω]`.
    pub fn generalized_velocity(&self) -> Vector6<f64> {
        Vector6::new(self.v.x, self.v.y, self.v.z, self.omega.x, self.omega.y, self.omega.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Wrench {
    /// Inertial-frame force, N.
    pub force: Vec3,
    /// Body-frame torque, N·m.
    pub torque: Vec3,
}

impl Wrench {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(force: Vec3, torque: Vec3) -> Self {
        Self { force, torque }
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(self.force.x, self.force.y, self.force.z, self.torque.x, self.torque.y, self.torque.z)
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Self { force: Vec3::new(x[0], x[1], x[2]), torque: Vec3::new(x[3], x[4], x[5]) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// Total collective thrust along body z, N.
    pub thrust: f64,
    /// Body moments, N·m.
    pub moments: Vec3,
}

impl ControlInput {
    pub fn new(thrust: f64, moments: Vec3) -> Self {
        Self { thrust, moments }
    }

    pub fn hover(p: &SystemParams) -> Self {
        Self { thrust: p.hover_thrust(), moments: Vec3::zeros() }
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.thrust, self.moments.x, self.moments.y, self.moments.z)
    }

    pub fn from_vector(x: &Vector4<f64>) -> Self {
        Self { thrust: x[0], moments: Vec3::new(x[1], x[2], x[3]) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObserverState {
    pub upsilon: Vector6<f64>,
}

impl ObserverState {
    pub fn zero() -> Self {
        Self::default()
    }

    /// `Γ(χ̇) = δ [v; ω]`.
    pub fn gamma(s: &BodyState, p: &SystemParams) -> Vector6<f64> {
        s.generalized_velocity() * p.delta
    }
}

/// Time derivative of [`BodyState`]; `q_dot` is scalar-first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyRates {
    pub q_dot: Vector4<f64>,
    pub r_dot: Vec3,
    pub v_dot: Vec3,
    pub omega_dot: Vec3,
}

/// `Ξ(ω) = [[0, −ωᵀ], [ω, −[ω]×]]`, so that `q̇ = ½ Ξ(ω) q`.
pub fn xi_matrix(omega: &Vec3) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    let s = skew(omega);
    for i in 0..3 {
        m[(0, i + 1)] = -omega[i];
        m[(i + 1, 0)] = omega[i];
        for j in 0..3 {
            m[(i + 1, j + 1)] = -s[(i, j)];
        }
    }
    m
}

/// Combined rigid-body dynamics with the human wrench.
pub fn system_derivative(s: &BodyState, u: &ControlInput, tau_h: &Wrench, p: &SystemParams) -> BodyRates {
    let q_dot = xi_matrix(&s.omega) * s.q.as_vector4() * 0.5;
    let thrust_dir = s.q.rotate(&E_Z);
    let v_dot = thrust_dir * (u.thrust / p.mass) - E_Z * p.gravity + tau_h.force / p.mass;
    let gyro = s.omega.cross(&(p.inertia * s.omega));
    let omega_dot = p.inertia_inverse() * (u.moments - gyro + tau_h.torque);
    BodyRates { q_dot, r_dot: s.v, v_dot, omega_dot }
}

/// Classical fourth-order Runge-Kutta step of [`system_derivative`] with the
/// wrench sampled at the step start, midpoint and end. The quaternion is
/// renormalized after the step.
pub fn integrate_rk4(
    s: &BodyState,
    u: &ControlInput,
    wrench_at: impl Fn(f64) -> Wrench,
    p: &SystemParams,
    dt: f64,
) -> BodyState {
    let shift = |base: &BodyState, k: &BodyRates, h: f64| BodyState {
        q: UnitQuaternion { w: base.q.w + h * k.q_dot[0], v: base.q.v + Vec3::new(k.q_dot[1], k.q_dot[2], k.q_dot[3]) * h },
        r: base.r + k.r_dot * h,
        v: base.v + k.v_dot * h,
        omega: base.omega + k.omega_dot * h,
    };
    let k1 = system_derivative(s, u, &wrench_at(0.0), p);
    let k2 = system_derivative(&shift(s, &k1, dt / 2.0), u, &wrench_at(dt / 2.0), p);
    let k3 = system_derivative(&shift(s, &k2, dt / 2.0), u, &wrench_at(dt / 2.0), p);
    let k4 = system_derivative(&shift(s, &k3, dt), u, &wrench_at(dt), p);
    let q = s.q.as_vector4() + (k1.q_dot + k2.q_dot * 2.0 + k3.q_dot * 2.0 + k4.q_dot) * (dt / 6.0);
    BodyState {
        q: UnitQuaternion::from_vector4(&q),
        r: s.r + (k1.r_dot + k2.r_dot * 2.0 + k3.r_dot * 2.0 + k4.r_dot) * (dt / 6.0),
        v: s.v + (k1.v_dot + k2.v_dot * 2.0 + k3.v_dot * 2.0 + k4.v_dot) * (dt / 6.0),
        omega: s.omega + (k1.omega_dot + k2.omega_dot * 2.0 + k3.omega_dot * 2.0 + k4.omega_dot) * (dt / 6.0),
    }
}

/// Per-vehicle and payload models, kept for cross-checking the combined
/// model. Coupling forces `𝔉ᵢ` are inertial-frame forces the payload receives
/// from vehicle `i`; coupling torques `𝔗ᵢ` are body-frame.
pub mod components {
    use super::*;

    pub fn quadrotor_derivative(
        q: &UnitQuaternion,
        omega: &Vec3,
        thrust: f64,
        moments: &Vec3,
        coupling_force: &Vec3,
        coupling_torque: &Vec3,
        mass: f64,
        inertia: &Mat3,
        gravity: f64,
    ) -> (Vec3, Vec3) {
        let v_dot = q.rotate(&E_Z) * (thrust / mass) - E_Z * gravity - coupling_force / mass;
        let omega_dot = inertia.try_inverse().unwrap_or_else(Mat3::zeros)
            * (moments - omega.cross(&(inertia * omega)) - coupling_torque);
        (v_dot, omega_dot)
    }

    /// Payload dynamics; the human wrench acts on the payload. Moment arms
    /// are body-frame, so inertial forces are rotated into the body frame.
    pub fn payload_derivative(
        q: &UnitQuaternion,
        omega: &Vec3,
        coupling_forces: &[Vec3; 2],
        coupling_torques: &[Vec3; 2],
        offsets: &[Vec3; 2],
        mass: f64,
        inertia: &Mat3,
        gravity: f64,
        human: &Wrench,
    ) -> (Vec3, Vec3) {
        let v_dot = (coupling_forces[0] + coupling_forces[1] + human.force) / mass - E_Z * gravity;
        let to_body = |f: &Vec3| q.inverse().rotate(f);
        let moment = coupling_torques[0] + coupling_torques[1] - omega.cross(&(inertia * omega))
            + offsets[0].cross(&to_body(&coupling_forces[0]))
            + offsets[1].cross(&to_body(&coupling_forces[1]))
            + human.torque;
        let omega_dot = inertia.try_inverse().unwrap_or_else(Mat3::zeros) * moment;
        (v_dot, omega_dot)
    }
}

/// Per-vehicle rotor mixing matrix: rotor thrusts → `[u₁, roll, pitch, yaw]`.
pub fn rotor_mixing_matrix(p: &SystemParams) -> Matrix4<f64> {
    let i = p.rotor.arm_length;
    let nu = p.rotor.nu();
    Matrix4::new(1.0, 1.0, 1.0, 1.0, 0.0, i, 0.0, -i, -i, 0.0, i, 0.0, nu, -nu, nu, -nu)
}

pub fn rotor_mix(rotor_thrusts: &[f64; 4], p: &SystemParams) -> (f64, Vec3) {
    let out = rotor_mixing_matrix(p) * Vector4::from_column_slice(rotor_thrusts);
    (out[0], Vec3::new(out[1], out[2], out[3]))
}

/// Configuration matrix ℂ mapping `u_c = [u₁₁..u₁₄, u₂₁..u₂₄]` to `[F_th, 𝒰_τ]`.
pub fn build_config_matrix(p: &SystemParams) -> Matrix4x8 {
    let mut c = Matrix4x8::zeros();
    for (k, l) in p.attach_offsets.iter().enumerate() {
        let col = 4 * k;
        c[(0, col)] = 1.0;
        c[(1, col)] = l.y;
        c[(2, col)] = -l.x;
        c[(1, col + 1)] = 1.0;
        c[(2, col + 2)] = 1.0;
        c[(3, col + 3)] = 1.0;
    }
    c
}

/// Cost-weighted minimum-norm allocation
/// `u_c* = Λ⁻² ℂᵀ (ℂ Λ⁻² ℂᵀ)⁻¹ [F_th, 𝒰_τ]`.
pub fn allocate(u: &ControlInput, p: &SystemParams) -> Result<Vector8, DynamicsError> {
    let c = build_config_matrix(p);
    let inv_sq = Vector8::from_iterator(p.lambda_weights.iter().map(|k| 1.0 / k));
    let c_w = c * nalgebra::SMatrix::<f64, 8, 8>::from_diagonal(&inv_sq);
    let gram = c_w * c.transpose();
    let eig = SymmetricEigen::new(gram);
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= ALLOCATION_CONDITION_LIMIT) {
        return Err(DynamicsError::SingularAllocation { condition });
    }
    let lambda = gram
        .cholesky()
        .ok_or(DynamicsError::SingularAllocation { condition })?
        .solve(&u.as_vector());
    Ok(c_w.transpose() * lambda)
}

/// Result of pushing an allocation through per-rotor thrust limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturatedAllocation {
    /// Achieved per-vehicle commands after clipping.
    pub commands: Vector8,
    /// Achieved system-level input `ℂ u_c`.
    pub applied: ControlInput,
    pub saturated: bool,
}

/// Clips each rotor of each vehicle to `[0, u_max / 4]` and re-mixes.
pub fn saturate_allocation(u_c: &Vector8, p: &SystemParams) -> SaturatedAllocation {
    let mix = rotor_mixing_matrix(p);
    let unmix = mix.try_inverse().unwrap_or_else(Matrix4::zeros);
    let cap = p.u_max / 4.0;
    let mut commands = *u_c;
    let mut saturated = false;
    for k in 0..2 {
        let demand = Vector4::new(u_c[4 * k], u_c[4 * k + 1], u_c[4 * k + 2], u_c[4 * k + 3]);
        let mut rotors = unmix * demand;
        for f in rotors.iter_mut() {
            let clipped = f.clamp(0.0, cap);
            if (clipped - *f).abs() > 1e-12 {
                saturated = true;
            }
            *f = clipped;
        }
        let achieved = mix * rotors;
        commands.fixed_rows_mut::<4>(4 * k).copy_from(&achieved);
    }
    let applied = ControlInput::from_vector(&(build_config_matrix(p) * commands));
    SaturatedAllocation { commands, applied, saturated }
}

/// Matrices of `τ_h = M χ̈ + G(χ̇) + W(χ) u`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactModel {
    pub m: Matrix6<f64>,
    pub g: Vector6<f64>,
    pub w: Matrix6x4,
}

pub fn compact_matrices(s: &BodyState, p: &SystemParams) -> CompactModel {
    let gyro = s.omega.cross(&(p.inertia * s.omega));
    let weight = E_Z * (p.mass * p.gravity);
    let g = Vector6::new(weight.x, weight.y, weight.z, gyro.x, gyro.y, gyro.z);
    let mut w = Matrix6x4::zeros();
    let thrust_dir = s.q.rotate(&E_Z);
    for i in 0..3 {
        w[(i, 0)] = -thrust_dir[i];
        w[(3 + i, 1 + i)] = -1.0;
    }
    CompactModel { m: p.mass_matrix(), g, w }
}

/// Observer drive term `G + W u − Γ`.
fn observer_drive(s: &BodyState, u: &ControlInput, p: &SystemParams) -> Vector6<f64> {
    let cm = compact_matrices(s, p);
    cm.g + cm.w * u.as_vector() - ObserverState::gamma(s, p)
}

/// `Υ̇ = −A Υ + A (G + W u − Γ)`.
pub fn observer_derivative(obs: &ObserverState, s: &BodyState, u: &ControlInput, p: &SystemParams) -> Vector6<f64> {
    let a = p.observer_gain();
    a * (observer_drive(s, u, p) - obs.upsilon)
}

/// `τ̂_h = Υ + Γ(χ̇)`.
pub fn wrench_estimate(obs: &ObserverState, s: &BodyState, p: &SystemParams) -> Wrench {
    Wrench::from_vector(&(obs.upsilon + ObserverState::gamma(s, p)))
}

/// Lifted continuous-time matrix `f^c` acting on `[q, r, v, ω, Υ, 1]`.
///
/// `−A` sits on the Υ diagonal block and `A (G + W u − Γ)` in the affine
/// column, so the exponential reproduces the exact first-order decay of
/// the observer memory at any step size.
pub fn build_fc(s: &BodyState, u: &ControlInput, p: &SystemParams) -> DMatrix<f64> {
    use layout::*;
    let mut f = DMatrix::<f64>::zeros(DIM, DIM);
    f.view_mut((Q, Q), (4, 4)).copy_from(&(xi_matrix(&s.omega) * 0.5));
    f.view_mut((R, V), (3, 3)).copy_from(&Mat3::identity());
    let (accel, ang_accel) = model_accelerations(s, u, p);
    f.view_mut((V, ONE), (3, 1)).copy_from(&accel);
    f.view_mut((OMEGA, ONE), (3, 1)).copy_from(&ang_accel);
    let a = p.observer_gain();
    f.view_mut((UPSILON, UPSILON), (6, 6)).copy_from(&(-a));
    f.view_mut((UPSILON, ONE), (6, 1)).copy_from(&(a * observer_drive(s, u, p)));
    f
}

/// Wrench-free accelerations used by the estimator's process model.
fn model_accelerations(s: &BodyState, u: &ControlInput, p: &SystemParams) -> (Vec3, Vec3) {
    let accel = quat_to_rot(&s.q) * E_Z * (u.thrust / p.mass) - E_Z * p.gravity;
    let ang_accel = p.inertia_inverse() * (u.moments - s.omega.cross(&(p.inertia * s.omega)));
    (accel, ang_accel)
}

pub fn lift(s: &BodyState, obs: &ObserverState) -> DVector<f64> {
    use layout::*;
    let mut x = DVector::<f64>::zeros(DIM);
    x.rows_mut(Q, 4).copy_from(&s.q.as_vector4());
    x.rows_mut(R, 3).copy_from(&s.r);
    x.rows_mut(V, 3).copy_from(&s.v);
    x.rows_mut(OMEGA, 3).copy_from(&s.omega);
    x.rows_mut(UPSILON, 6).copy_from(&obs.upsilon);
    x[ONE] = 1.0;
    x
}

pub fn unlift(x: &DVector<f64>) -> (BodyState, ObserverState) {
    use layout::*;
    let q = UnitQuaternion::from_vector4(&Vector4::new(x[Q], x[Q + 1], x[Q + 2], x[Q + 3]));
    let v3 = |i: usize| Vec3::new(x[i], x[i + 1], x[i + 2]);
    let body = BodyState { q, r: v3(R), v: v3(V), omega: v3(OMEGA) };
    let obs = ObserverState { upsilon: Vector6::from_iterator(x.rows(UPSILON, 6).iter().copied()) };
    (body, obs)
}

/// `x_k = exp(f^c_{k−1} T) x_{k−1}` through the general matrix exponential.
pub fn discrete_transition(
    s: &BodyState,
    obs: &ObserverState,
    u: &ControlInput,
    p: &SystemParams,
    dt: f64,
) -> Result<(BodyState, ObserverState), DynamicsError> {
    if !(dt > 0.0) {
        return Err(DynamicsError::InvalidStep(dt));
    }
    let phi = linalg::expm(&(build_fc(s, u, p) * dt))?;
    let mut x = phi * lift(s, obs);
    x[layout::ONE] = 1.0;
    Ok(unlift(&x))
}

/// Which route evaluates the discrete transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discretization {
    /// Closed-form exponential of each block of `f^c`.
    #[default]
    Structured,
    /// Padé scaling-and-squaring of the full lifted matrix.
    Expm,
}

/// Discrete transition with the block exponentials of `f^c` precomputed
/// where they do not depend on the state.
///
/// The lifted matrix splits into the rotation block `½ Ξ(ω)` (with
/// `Ξ² = −|ω|² I`), a nilpotent position/velocity chain driven by constant
/// affine terms, and the observer block `[−A, b; 0, 0]`, whose exponential is
/// `[e^{−AT}, A⁻¹(I − e^{−AT}) b]`.
#[derive(Debug, Clone)]
pub struct TransitionModel {
    params: SystemParams,
    dt: f64,
    method: Discretization,
    upsilon_decay: Matrix6<f64>,
    upsilon_input: Matrix6<f64>,
}

impl TransitionModel {
    pub fn new(params: SystemParams, dt: f64, method: Discretization) -> Result<Self, DynamicsError> {
        if !(dt > 0.0) {
            return Err(DynamicsError::InvalidStep(dt));
        }
        let a = params.observer_gain();
        let decay_dyn = linalg::expm(&DMatrix::from_column_slice(6, 6, (-a * dt).as_slice()))?;
        let upsilon_decay = Matrix6::from_column_slice(decay_dyn.as_slice());
        let a_inv = a.try_inverse().ok_or(LinalgError::SingularPade)?;
        let upsilon_input = a_inv * (Matrix6::identity() - upsilon_decay);
        Ok(Self { params, dt, method, upsilon_decay, upsilon_input })
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn method(&self) -> Discretization {
        self.method
    }

    pub fn propagate(
        &self,
        s: &BodyState,
        obs: &ObserverState,
        u: &ControlInput,
    ) -> Result<(BodyState, ObserverState), DynamicsError> {
        match self.method {
            Discretization::Expm => discrete_transition(s, obs, u, &self.params, self.dt),
            Discretization::Structured => Ok(self.propagate_structured(s, obs, u)),
        }
    }

    pub fn propagate_structured(&self, s: &BodyState, obs: &ObserverState, u: &ControlInput) -> (BodyState, ObserverState) {
        let p = &self.params;
        let t = self.dt;
        let (accel, ang_accel) = model_accelerations(s, u, p);

        let rate = s.omega.norm();
        let half = 0.5 * rate * t;
        // exp(½ Ξ T) = cos(θ) I + sin(θ)/|ω| Ξ with θ = |ω| T / 2.
        let sinc = if rate * t < 1e-8 { 0.5 * t * (1.0 - half * half / 6.0) } else { half.sin() / rate };
        let q_next = xi_matrix(&s.omega) * s.q.as_vector4() * sinc + s.q.as_vector4() * half.cos();

        let drive = p.observer_gain() * observer_drive(s, u, p);
        let upsilon = self.upsilon_decay * obs.upsilon + self.upsilon_input * drive;

        (
            BodyState {
                q: UnitQuaternion::from_vector4(&q_next),
                r: s.r + s.v * t + accel * (0.5 * t * t),
                v: s.v + accel * t,
                omega: s.omega + ang_accel * t,
            },
            ObserverState { upsilon },
        )
    }
}
