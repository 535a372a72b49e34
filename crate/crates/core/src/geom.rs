//! Rigid poses, Euler conversions and covariance transport.
//!
//! Orientation is stored as a unit quaternion. Euler triples `(alpha, beta, gamma)`
//! only appear at API and serialization boundaries, using the yaw-pitch-roll
//! convention `R = Rz(gamma) * Ry(beta) * Rx(alpha)`.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Matrix6, Point3, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Largest valid marker id (ids are 10-bit).
pub const MAX_MARKER_ID: u16 = 1023;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Quaternion for `Rz(gamma) * Ry(beta) * Rx(alpha)`.
pub fn euler_to_quat(alpha: f64, beta: f64, gamma: f64) -> UnitQuaternion<f64> {
    let qx = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), alpha);
    let qy = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), beta);
    let qz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), gamma);
    qz * qy * qx
}

/// Inverse of [`euler_to_quat`]. All three angles are wrapped to `(-pi, pi]`.
///
/// At `|beta| = pi/2` only `gamma - alpha` (or `gamma + alpha`) is observable;
/// the canonical solution with `alpha = 0` is returned.
pub fn quat_to_euler(q: &UnitQuaternion<f64>) -> [f64; 3] {
    rotation_to_euler(q.to_rotation_matrix().matrix())
}

pub fn rotation_to_euler(r: &Matrix3<f64>) -> [f64; 3] {
    let cos_beta = (r[(0, 0)] * r[(0, 0)] + r[(1, 0)] * r[(1, 0)]).sqrt();
    let beta = (-r[(2, 0)]).atan2(cos_beta);
    if cos_beta < 1e-12 {
        let gamma = (-r[(0, 1)]).atan2(r[(1, 1)]);
        return [0.0, wrap_angle(beta), wrap_angle(gamma)];
    }
    let alpha = r[(2, 1)].atan2(r[(2, 2)]);
    let gamma = r[(1, 0)].atan2(r[(0, 0)]);
    [wrap_angle(alpha), wrap_angle(beta), wrap_angle(gamma)]
}

/// Rotation matrix for an Euler triple.
pub fn euler_to_rotation(e: [f64; 3]) -> Matrix3<f64> {
    euler_to_quat(e[0], e[1], e[2])
        .to_rotation_matrix()
        .into_inner()
}

/// Partial derivatives of `Rz(gamma) Ry(beta) Rx(alpha)` with respect to
/// `alpha`, `beta` and `gamma`.
pub fn euler_rotation_partials(e: [f64; 3]) -> [Matrix3<f64>; 3] {
    let (sa, ca) = e[0].sin_cos();
    let (sb, cb) = e[1].sin_cos();
    let (sg, cg) = e[2].sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, ca, -sa, 0.0, sa, ca);
    let ry = Matrix3::new(cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb);
    let rz = Matrix3::new(cg, -sg, 0.0, sg, cg, 0.0, 0.0, 0.0, 1.0);
    let drx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sa, -ca, 0.0, ca, -sa);
    let dry = Matrix3::new(-sb, 0.0, cb, 0.0, 0.0, 0.0, -cb, 0.0, -sb);
    let drz = Matrix3::new(-sg, -cg, 0.0, cg, -sg, 0.0, 0.0, 0.0, 0.0);
    [rz * ry * drx, rz * dry * rx, drz * ry * rx]
}

/// Maps Euler-angle rates to body-frame angular velocity.
pub fn euler_rate_matrix(e: [f64; 3]) -> Matrix3<f64> {
    let (sa, ca) = e[0].sin_cos();
    let (sb, cb) = e[1].sin_cos();
    Matrix3::new(1.0, 0.0, -sb, 0.0, ca, sa * cb, 0.0, -sa, ca * cb)
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`]; reads the antisymmetric part.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// A rigid pose: translation in meters plus a unit-quaternion orientation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose6D {
    pub t: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
}

impl Default for Pose6D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose6D {
    pub fn identity() -> Self {
        Self {
            t: Vector3::zeros(),
            q: UnitQuaternion::identity(),
        }
    }

    pub fn new(t: Vector3<f64>, q: UnitQuaternion<f64>) -> Self {
        Self {
            t,
            q: UnitQuaternion::new_normalize(q.into_inner()),
        }
    }

    pub fn from_euler(t: [f64; 3], euler: [f64; 3]) -> Self {
        Self {
            t: Vector3::from(t),
            q: euler_to_quat(euler[0], euler[1], euler[2]),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::from_euler([x, y, z], [0.0; 3])
    }

    /// Builds a pose from a 6-vector `(x, y, z, alpha, beta, gamma)`.
    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::from_euler([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let e = self.euler();
        Vector6::new(self.t.x, self.t.y, self.t.z, e[0], e[1], e[2])
    }

    pub fn euler(&self) -> [f64; 3] {
        quat_to_euler(&self.q)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.q.to_rotation_matrix().into_inner()
    }

    /// `self ∘ other`: `other` expressed in `self`'s frame.
    pub fn compose(&self, other: &Pose6D) -> Pose6D {
        Pose6D::new(self.t + self.q * other.t, self.q * other.q)
    }

    pub fn inverse(&self) -> Pose6D {
        let qi = self.q.inverse();
        Pose6D {
            t: -(qi * self.t),
            q: qi,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.t + self.q * p
    }

    /// Rotation angle of the orientation, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        self.q.angle()
    }

    pub fn is_finite(&self) -> bool {
        self.t.iter().all(|v| v.is_finite()) && self.q.coords.iter().all(|v| v.is_finite())
    }

    /// Translation distance and rotation angle to `other`.
    pub fn distance_to(&self, other: &Pose6D) -> (f64, f64) {
        let d = self.inverse().compose(other);
        ((self.t - other.t).norm(), d.q.angle())
    }
}

impl fmt::Display for Pose6D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = self.euler();
        write!(
            f,
            "t=({:.4}, {:.4}, {:.4}) euler=({:.4}, {:.4}, {:.4})",
            self.t.x, self.t.y, self.t.z, e[0], e[1], e[2]
        )
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    t: [f64; 3],
    euler: [f64; 3],
}

impl Serialize for Pose6D {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        PoseRepr {
            t: [self.t.x, self.t.y, self.t.z],
            euler: self.euler(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose6D {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let r = PoseRepr::deserialize(deserializer)?;
        if r.t.iter().chain(r.euler.iter()).any(|v| !v.is_finite()) {
            return Err(serde::de::Error::custom("pose contains non-finite values"));
        }
        Ok(Pose6D::from_euler(r.t, r.euler))
    }
}

/// 6×6 covariance over `(x, y, z, alpha, beta, gamma)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance6(pub Matrix6<f64>);

impl Default for Covariance6 {
    fn default() -> Self {
        Self::zeros()
    }
}

impl Covariance6 {
    pub fn zeros() -> Self {
        Self(Matrix6::zeros())
    }

    pub fn from_diagonal(d: [f64; 6]) -> Self {
        Self(Matrix6::from_diagonal(&Vector6::from(d)))
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn position_block(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn angle_block(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(3, 3).into_owned()
    }

    pub fn symmetrized(&self) -> Self {
        Self(0.5 * (self.0 + self.0.transpose()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (self.0 - self.0.transpose()).amax() <= tol
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.symmetrized().0.symmetric_eigenvalues().min()
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        self.is_symmetric(tol.max(1e-12) * (1.0 + self.0.amax())) && self.min_eigenvalue() >= -tol
    }

    /// Conjugates both the position and the angle block by `rot`.
    ///
    /// The angle block uses the same rotation as position, which is exact
    /// only for small angular errors.
    pub fn transport(&self, rot: &Matrix3<f64>) -> Self {
        let mut b = Matrix6::zeros();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(rot);
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(rot);
        Self(b * self.0 * b.transpose()).symmetrized()
    }

    pub fn row_major(&self) -> [f64; 36] {
        let mut out = [0.0; 36];
        for r in 0..6 {
            for c in 0..6 {
                out[r * 6 + c] = self.0[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Option<Self> {
        if v.len() != 36 {
            return None;
        }
        Some(Self(Matrix6::from_row_slice(v)))
    }
}

impl std::ops::Add for Covariance6 {
    type Output = Covariance6;
    fn add(self, rhs: Covariance6) -> Covariance6 {
        Covariance6(self.0 + rhs.0)
    }
}

/// Free-standing form of [`Covariance6::transport`].
pub fn transport_covariance(cov: &Covariance6, frame_rot: &Matrix3<f64>) -> Covariance6 {
    cov.transport(frame_rot)
}

impl Serialize for Covariance6 {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.row_major().to_vec().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Covariance6 {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(deserializer)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(serde::de::Error::custom(
                "covariance contains non-finite values",
            ));
        }
        Covariance6::from_row_major(&v).ok_or_else(|| {
            serde::de::Error::custom(format!("expected 36 numbers, got {}", v.len()))
        })
    }
}

/// Identifier of an independent global coordinate frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameId(pub u32);

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DroneId(pub u32);

impl fmt::Display for DroneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "drone{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MarkerId(pub u16);

impl MarkerId {
    pub fn is_valid(self) -> bool {
        self.0 <= MAX_MARKER_ID
    }
}

impl fmt::Display for MarkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// Homogeneous 4×4 matrix of a pose.
pub fn to_homogeneous(p: &Pose6D) -> nalgebra::Matrix4<f64> {
    nalgebra::Isometry3::from_parts(p.t.into(), p.q).to_homogeneous()
}

/// Chordal L2 mean of unit quaternions: principal eigenvector of `Σ q qᵀ`.
pub fn quaternion_mean(qs: &[UnitQuaternion<f64>]) -> Option<UnitQuaternion<f64>> {
    if qs.is_empty() {
        return None;
    }
    let mut m = nalgebra::Matrix4::<f64>::zeros();
    for q in qs {
        let c = q.coords;
        m += c * c.transpose();
    }
    let eig = m.symmetric_eigen();
    let (idx, _) =
        eig.eigenvalues
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            );
    let v = eig.eigenvectors.column(idx);
    let q = Quaternion::new(v[3], v[0], v[1], v[2]);
    Some(UnitQuaternion::new_normalize(q))
}

pub fn point(v: &Vector3<f64>) -> Point3<f64> {
    Point3::from(*v)
}

pub fn rotation_z(angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), angle)
}
