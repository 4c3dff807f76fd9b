//! Quaternion and SO(3) algebra.
//!
//! Quaternions are stored scalar-first, `[w, x, y, z]`, and represent the
//! active rotation from the body frame into the inertial frame, so that
//! `R(q) v_body = v_inertial` and `R(q1 ⊗ q2) = R(q1) R(q2)`.
//!
//! Perturbations are applied on the left (inertial side):
//! `q ⊕ P = q(P) ⊗ q`, `q ⊖ P = q(P)⁻¹ ⊗ q` and `q1 ⊖ q2 = P(q1 ⊗ q2⁻¹)`.

use std::fmt;

use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Unit vector along the inertial z axis (up).
pub const E_Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

const SKEW_TOL: f64 = 1e-9;
const ROTATION_TOL: f64 = 1e-6;
const SHEPPERD_SWITCH: f64 = 1e-6;
const SMALL_ANGLE: f64 = 1e-6;
const SPECTRAL_GAP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuatError {
    #[error("matrix is not skew-symmetric (|M + Mᵀ| = {residual:e})")]
    NotSkewSymmetric { residual: f64 },
    #[error("matrix is not a rotation (|R Rᵀ - I| = {orthogonality:e}, det = {determinant})")]
    NotRotation { orthogonality: f64, determinant: f64 },
    #[error("quaternion average is ambiguous: top eigenvalues {top} and {second} coincide")]
    DegenerateSpectrum { top: f64, second: f64 },
    #[error("quaternion average needs at least one quaternion")]
    EmptyInput,
    #[error("got {quats} quaternions but {weights} weights")]
    LengthMismatch { quats: usize, weights: usize },
}

/// Skew-symmetric matrix `[p]×` such that `[p]× q = p × q`.
pub fn skew(p: &Vec3) -> Mat3 {
    Mat3::new(0.0, -p.z, p.y, p.z, 0.0, -p.x, -p.y, p.x, 0.0)
}

/// Inverse of [`skew`].
pub fn vex(m: &Mat3) -> Result<Vec3, QuatError> {
    let residual = (m + m.transpose()).norm();
    if residual > SKEW_TOL {
        return Err(QuatError::NotSkewSymmetric { residual });
    }
    Ok(Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]))
}

/// Anti-symmetric projection `(B - Bᵀ) / 2`.
pub fn antisym_project(b: &Mat3) -> Mat3 {
    (b - b.transpose()) * 0.5
}

/// A rotation vector `α b` (angle in radians times unit axis).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RotationVector(pub Vec3);

impl RotationVector {
    pub fn zero() -> Self {
        Self(Vec3::zeros())
    }

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vec3::new(x, y, z))
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    /// Wraps the angle into `[0, π]`, flipping the axis when needed.
    /// Exactly-π results get their axis sign fixed by the first nonzero
    /// component being positive.
    pub fn canonical(&self) -> Self {
        let alpha = self.0.norm();
        if alpha <= std::f64::consts::PI {
            if alpha == std::f64::consts::PI {
                return Self(canonical_axis_sign(self.0));
            }
            return *self;
        }
        let axis = self.0 / alpha;
        let two_pi = 2.0 * std::f64::consts::PI;
        let wrapped = alpha.rem_euclid(two_pi);
        if wrapped > std::f64::consts::PI {
            Self(-axis * (two_pi - wrapped))
        } else if wrapped == std::f64::consts::PI {
            Self(canonical_axis_sign(axis * wrapped))
        } else {
            Self(axis * wrapped)
        }
    }
}

fn canonical_axis_sign(v: Vec3) -> Vec3 {
    match v.iter().find(|c| **c != 0.0) {
        Some(c) if *c < 0.0 => -v,
        _ => v,
    }
}

/// Orientation on S³, scalar first.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct UnitQuaternion {
    pub w: f64,
    pub v: Vec3,
}

impl fmt::Debug for UnitQuaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.w, self.v.x, self.v.y, self.v.z)
    }
}

impl From<UnitQuaternion> for [f64; 4] {
    fn from(q: UnitQuaternion) -> Self {
        [q.w, q.v.x, q.v.y, q.v.z]
    }
}

/// Components already unit to within rounding are kept bit-for-bit so
/// serialized quaternions read back exactly.
impl From<[f64; 4]> for UnitQuaternion {
    fn from(c: [f64; 4]) -> Self {
        let q = UnitQuaternion { w: c[0], v: Vec3::new(c[1], c[2], c[3]) };
        if (q.norm() - 1.0).abs() <= 4.0 * f64::EPSILON {
            q
        } else {
            q.renormalized()
        }
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl UnitQuaternion {
    /// Builds a quaternion from raw components and normalizes it. A zero
    /// input yields the identity.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::from_vector4(&Vector4::new(w, x, y, z))
    }

    pub fn identity() -> Self {
        Self { w: 1.0, v: Vec3::zeros() }
    }

    pub fn from_vector4(c: &Vector4<f64>) -> Self {
        let n = c.norm();
        if n == 0.0 || !n.is_finite() {
            return Self::identity();
        }
        Self { w: c[0] / n, v: Vec3::new(c[1] / n, c[2] / n, c[3] / n) }
    }

    pub fn as_vector4(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.v.x, self.v.y, self.v.z)
    }

    pub fn norm(&self) -> f64 {
        self.as_vector4().norm()
    }

    pub fn renormalized(&self) -> Self {
        Self::from_vector4(&self.as_vector4())
    }

    /// Sign representative with `w ≥ 0`; for `w = 0` the first nonzero
    /// vector component is made positive.
    pub fn canonical(&self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else {
            matches!(self.v.iter().find(|c| **c != 0.0), Some(c) if *c < 0.0)
        };
        if flip {
            self.negated()
        } else {
            *self
        }
    }

    pub fn negated(&self) -> Self {
        Self { w: -self.w, v: -self.v }
    }

    pub fn conjugate(&self) -> Self {
        Self { w: self.w, v: -self.v }
    }

    /// Inverse of a unit quaternion (its conjugate).
    pub fn inverse(&self) -> Self {
        self.conjugate()
    }

    /// Hamilton product `self ⊗ rhs`, renormalized.
    pub fn mul(&self, rhs: &Self) -> Self {
        let w = self.w * rhs.w - self.v.dot(&rhs.v);
        let v = rhs.v * self.w + self.v * rhs.w + self.v.cross(&rhs.v);
        Self::from_vector4(&Vector4::new(w, v.x, v.y, v.z))
    }

    pub fn to_rotation(&self) -> Mat3 {
        quat_to_rot(self)
    }

    /// Rotates a vector from the body frame into the inertial frame.
    pub fn rotate(&self, x: &Vec3) -> Vec3 {
        let t = self.v.cross(x) * 2.0;
        x + t * self.w + self.v.cross(&t)
    }

    pub fn to_rotvec(&self) -> RotationVector {
        quat_to_rotvec(self)
    }

    pub fn distance_to(&self, other: &Self) -> f64 {
        let w = self.w * other.w + self.v.dot(&other.v);
        let v = other.v * self.w - self.v * other.w - self.v.cross(&other.v);
        2.0 * v.norm().atan2(w.abs())
    }
}

pub fn quat_mul(q1: &UnitQuaternion, q2: &UnitQuaternion) -> UnitQuaternion {
    q1.mul(q2)
}

pub fn conjugate(q: &UnitQuaternion) -> UnitQuaternion {
    q.conjugate()
}

pub fn inverse(q: &UnitQuaternion) -> UnitQuaternion {
    q.inverse()
}

/// `R(q) = I + 2 w [v]× + 2 [v]×²`.
pub fn quat_to_rot(q: &UnitQuaternion) -> Mat3 {
    let s = skew(&q.v);
    Mat3::identity() + s * (2.0 * q.w) + s * s * 2.0
}

/// Inverse of [`quat_to_rot`], returning the `w ≥ 0` representative.
///
/// Uses the trace formula while `1 + tr(R)` is comfortably positive and the
/// largest-diagonal (Shepperd) branch near half-turn rotations.
pub fn rot_to_quat(r: &Mat3) -> Result<UnitQuaternion, QuatError> {
    let orthogonality = (r * r.transpose() - Mat3::identity()).norm();
    let determinant = r.determinant();
    if !(orthogonality <= ROTATION_TOL && (determinant - 1.0).abs() <= ROTATION_TOL) {
        return Err(QuatError::NotRotation { orthogonality, determinant });
    }
    let trace = r.trace();
    let q = if 1.0 + trace >= SHEPPERD_SWITCH {
        let w = 0.5 * (1.0 + trace).sqrt();
        let k = 0.25 / w;
        UnitQuaternion::new(
            w,
            (r[(2, 1)] - r[(1, 2)]) * k,
            (r[(0, 2)] - r[(2, 0)]) * k,
            (r[(1, 0)] - r[(0, 1)]) * k,
        )
    } else if r[(0, 0)] >= r[(1, 1)] && r[(0, 0)] >= r[(2, 2)] {
        let x = 0.5 * (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).max(0.0).sqrt();
        let k = 0.25 / x;
        UnitQuaternion::new(
            (r[(2, 1)] - r[(1, 2)]) * k,
            x,
            (r[(0, 1)] + r[(1, 0)]) * k,
            (r[(0, 2)] + r[(2, 0)]) * k,
        )
    } else if r[(1, 1)] >= r[(2, 2)] {
        let y = 0.5 * (1.0 - r[(0, 0)] + r[(1, 1)] - r[(2, 2)]).max(0.0).sqrt();
        let k = 0.25 / y;
        UnitQuaternion::new(
            (r[(0, 2)] - r[(2, 0)]) * k,
            (r[(0, 1)] + r[(1, 0)]) * k,
            y,
            (r[(1, 2)] + r[(2, 1)]) * k,
        )
    } else {
        let z = 0.5 * (1.0 - r[(0, 0)] - r[(1, 1)] + r[(2, 2)]).max(0.0).sqrt();
        let k = 0.25 / z;
        UnitQuaternion::new(
            (r[(1, 0)] - r[(0, 1)]) * k,
            (r[(0, 2)] + r[(2, 0)]) * k,
            (r[(1, 2)] + r[(2, 1)]) * k,
            z,
        )
    };
    Ok(q.canonical())
}

/// Angle-axis extraction from a rotation matrix via the trace and the
/// anti-symmetric part. Singular at α ∈ {0, π}; returns `None` there.
pub fn rot_to_angle_axis(r: &Mat3) -> Option<(f64, Vec3)> {
    let alpha = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
    let s = alpha.sin();
    if s.abs() < 1e-12 {
        return None;
    }
    let axis = vex(&antisym_project(r)).ok()? / s;
    Some((alpha, axis))
}

/// Logarithm map to a rotation vector with angle in `[0, π]`.
pub fn quat_to_rotvec(q: &UnitQuaternion) -> RotationVector {
    let q = q.canonical();
    let s = q.v.norm();
    if s == 0.0 {
        return RotationVector::zero();
    }
    // atan2(s, w) / s stays accurate as s → 0, no series needed here.
    let alpha = 2.0 * s.atan2(q.w);
    RotationVector(q.v * (alpha / s)).canonical()
}

/// Exponential map `[cos(α/2); b sin(α/2)]`.
pub fn rotvec_to_quat(p: &RotationVector) -> UnitQuaternion {
    let alpha = p.0.norm();
    let half_sinc = if alpha < SMALL_ANGLE {
        0.5 - alpha * alpha / 48.0
    } else {
        (alpha / 2.0).sin() / alpha
    };
    let v = p.0 * half_sinc;
    UnitQuaternion::new((alpha / 2.0).cos(), v.x, v.y, v.z)
}

/// `q ⊕ P = q(P) ⊗ q`.
pub fn oplus(q: &UnitQuaternion, p: &RotationVector) -> UnitQuaternion {
    rotvec_to_quat(p).mul(q)
}

/// `q ⊖ P = q(P)⁻¹ ⊗ q`.
pub fn ominus_vec(q: &UnitQuaternion, p: &RotationVector) -> UnitQuaternion {
    rotvec_to_quat(p).inverse().mul(q)
}

/// `q1 ⊖ q2 = P(q1 ⊗ q2⁻¹)`, the inertial-frame orientation error.
pub fn quat_diff(q1: &UnitQuaternion, q2: &UnitQuaternion) -> RotationVector {
    quat_to_rotvec(&q1.mul(&q2.inverse()))
}

/// Weighted quaternion mean: the unit eigenvector of `Σ wᵢ qᵢ qᵢᵀ` for its
/// largest eigenvalue. Weights may be negative.
pub fn weighted_quat_average(
    quats: &[UnitQuaternion],
    weights: &[f64],
) -> Result<UnitQuaternion, QuatError> {
    if quats.is_empty() {
        return Err(QuatError::EmptyInput);
    }
    if quats.len() != weights.len() {
        return Err(QuatError::LengthMismatch { quats: quats.len(), weights: weights.len() });
    }
    let mut acc = Matrix4::<f64>::zeros();
    for (q, w) in quats.iter().zip(weights) {
        let c = q.as_vector4();
        acc += c * c.transpose() * *w;
    }
    principal_eigenvector(&acc)
}

fn principal_eigenvector(acc: &Matrix4<f64>) -> Result<UnitQuaternion, QuatError> {
    let eig = SymmetricEigen::new(*acc);
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let top = eig.eigenvalues[order[0]];
    let second = eig.eigenvalues[order[1]];
    if top - second <= SPECTRAL_GAP_TOL * top.abs().max(1.0) {
        return Err(QuatError::DegenerateSpectrum { top, second });
    }
    let col = eig.eigenvectors.column(order[0]);
    Ok(UnitQuaternion::from_vector4(&Vector4::new(col[0], col[1], col[2], col[3])).canonical())
}

/// Serde adapter writing a [`Mat3`] as three rows.
pub mod mat3_rows {
    use super::Mat3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat3, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat3, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Mat3::from_fn(|i, j| rows[i][j]))
    }
}
