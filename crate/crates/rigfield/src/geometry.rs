//! Rigid-body math: 3-vectors, unit quaternions, rotation matrices, SE(3)
//! poses, the 6D rotation parameterization used during optimization, and the
//! rotation error metric.
//!
//! Poses store rotations as unit quaternions; matrices are materialized only
//! where ray generation or gradient chains need them. All values are
//! immutable after construction and freely shareable across threads.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use thiserror::Error;

/// Below this |a1| (or residual of a2 after projection) the 6D rotation
/// encoding has no well-defined decoding.
const ROT6D_EPS: f64 = 1e-12;

/// Dot-product threshold above which SLERP falls back to normalized LERP.
const SLERP_LERP_THRESHOLD: f64 = 1.0 - 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    /// The 6D rotation inputs cannot be orthonormalized (optimizer diverged).
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(&'static str),
}

// ---------------------------------------------------------------------------
// Vec3

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self / self.norm()
    }

    pub fn lerp(self, o: Vec3, u: f64) -> Vec3 {
        self + (o - self) * u
    }

    pub fn min_elem(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max_elem(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Vec3 {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Linear interpolation `p0 + u * (p1 - p0)`.
pub fn lerp(p0: Vec3, p1: Vec3, u: f64) -> Vec3 {
    p0.lerp(p1, u)
}

// ---------------------------------------------------------------------------
// Mat3 (row-major)

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub fn identity() -> Mat3 {
        Mat3 { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    pub fn zero() -> Mat3 {
        Mat3 { m: [[0.0; 3]; 3] }
    }

    pub fn from_cols(c0: Vec3, c1: Vec3, c2: Vec3) -> Mat3 {
        Mat3 {
            m: [
                [c0.x, c1.x, c2.x],
                [c0.y, c1.y, c2.y],
                [c0.z, c1.z, c2.z],
            ],
        }
    }

    pub fn col(&self, j: usize) -> Vec3 {
        Vec3::new(self.m[0][j], self.m[1][j], self.m[2][j])
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3::new(self.m[i][0], self.m[i][1], self.m[i][2])
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.m;
        Mat3 {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3::new(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = Mat3::zero();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += self.m[i][k] * o.m[k][j];
                }
                r.m[i][j] = s;
            }
        }
        r
    }

    pub fn trace(&self) -> f64 {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Frobenius inner product `<self, other>`.
    pub fn frob_dot(&self, o: &Mat3) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += self.m[i][j] * o.m[i][j];
            }
        }
        s
    }

    pub fn add_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = Mat3::zero();
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = self.m[i][j] + o.m[i][j];
            }
        }
        r
    }

    /// Skew-symmetric cross-product matrix `[v]x` with `[v]x w = v x w`.
    pub fn skew(v: Vec3) -> Mat3 {
        Mat3 {
            m: [
                [0.0, -v.z, v.y],
                [v.z, 0.0, -v.x],
                [-v.y, v.x, 0.0],
            ],
        }
    }

    /// Outer product `a b^T`.
    pub fn outer(a: Vec3, b: Vec3) -> Mat3 {
        Mat3 {
            m: [
                [a.x * b.x, a.x * b.y, a.x * b.z],
                [a.y * b.x, a.y * b.y, a.y * b.z],
                [a.z * b.x, a.z * b.y, a.z * b.z],
            ],
        }
    }
}

/// Geodesic distance between two rotations in degrees:
/// `arccos(clamp((trace(Ra^T Rb) - 1) / 2, -1, 1))`. The clamp absorbs
/// numerical noise at 0 and 180 degrees.
pub fn rotation_geodesic_deg(ra: &Mat3, rb: &Mat3) -> f64 {
    let t = ra.transpose().mul_mat(rb).trace();
    let c = ((t - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

// ---------------------------------------------------------------------------
// Quaternion (w, x, y, z), unit norm by convention

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Quat {
        Quat { w, x, y, z }
    }

    /// Rotation of `angle_rad` about the (not necessarily unit) `axis`.
    pub fn from_axis_angle(axis: Vec3, angle_rad: f64) -> Quat {
        let a = axis.normalized();
        let (s, c) = (angle_rad / 2.0).sin_cos();
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Quat {
        let n = self.norm();
        Quat::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Inverse of a unit quaternion (its conjugate).
    pub fn inverse(self) -> Quat {
        self.conjugate()
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn mul_quat(self, o: Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Rotate a vector: `q v q^-1`.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    pub fn to_mat3(self) -> Mat3 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Mat3 {
            m: [
                [
                    1.0 - 2.0 * (y * y + z * z),
                    2.0 * (x * y - w * z),
                    2.0 * (x * z + w * y),
                ],
                [
                    2.0 * (x * y + w * z),
                    1.0 - 2.0 * (x * x + z * z),
                    2.0 * (y * z - w * x),
                ],
                [
                    2.0 * (x * z - w * y),
                    2.0 * (y * z + w * x),
                    1.0 - 2.0 * (x * x + y * y),
                ],
            ],
        }
    }

    /// Shepperd's method; `r` must be a proper rotation.
    pub fn from_mat3(r: &Mat3) -> Quat {
        let m = &r.m;
        let t = r.trace();
        let q = if t > 0.0 {
            let s = (t + 1.0).sqrt() * 2.0;
            Quat::new(
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Quat::new(
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Quat::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Quat::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            )
        };
        q.normalized()
    }

    /// Rotation-vector logarithm: returns `angle * axis` with angle in
    /// `[0, pi]` (the sign of the quaternion is normalized first).
    pub fn log_rotvec(self) -> Vec3 {
        let q = if self.w < 0.0 {
            Quat::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            self
        };
        let v = Vec3::new(q.x, q.y, q.z);
        let s = v.norm();
        if s < 1e-12 {
            // First-order: q ~ (1, r/2).
            return v * 2.0;
        }
        let angle = 2.0 * s.atan2(q.w);
        v * (angle / s)
    }

    /// Exponential of a rotation vector `angle * axis`.
    pub fn exp_rotvec(r: Vec3) -> Quat {
        let angle = r.norm();
        if angle < 1e-12 {
            return Quat::new(1.0, r.x / 2.0, r.y / 2.0, r.z / 2.0).normalized();
        }
        let (s, c) = (angle / 2.0).sin_cos();
        let a = r / angle;
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 4]) -> Quat {
        Quat::new(a[0], a[1], a[2], a[3])
    }
}

/// Spherical linear interpolation along the shorter arc.
///
/// `q1` is sign-flipped when `dot(q0, q1) < 0`; nearly parallel inputs fall
/// back to normalized linear interpolation.
pub fn slerp(q0: Quat, q1: Quat, u: f64) -> Quat {
    let mut q1 = q1;
    let mut d = q0.dot(q1);
    if d < 0.0 {
        q1 = Quat::new(-q1.w, -q1.x, -q1.y, -q1.z);
        d = -d;
    }
    if d > SLERP_LERP_THRESHOLD {
        let q = Quat::new(
            q0.w + (q1.w - q0.w) * u,
            q0.x + (q1.x - q0.x) * u,
            q0.y + (q1.y - q0.y) * u,
            q0.z + (q1.z - q0.z) * u,
        );
        return q.normalized();
    }
    let theta = d.clamp(-1.0, 1.0).acos();
    let s = theta.sin();
    let a = ((1.0 - u) * theta).sin() / s;
    let b = (u * theta).sin() / s;
    Quat::new(
        a * q0.w + b * q1.w,
        a * q0.x + b * q1.x,
        a * q0.y + b * q1.y,
        a * q0.z + b * q1.z,
    )
    .normalized()
}

/// Geodesic angle between two unit quaternions, in degrees.
pub fn quat_geodesic_deg(qa: Quat, qb: Quat) -> f64 {
    rotation_geodesic_deg(&qa.to_mat3(), &qb.to_mat3())
}

/// Relative rotation angle in radians, computed through `atan2` so it stays
/// well conditioned near zero (unlike the arccos-of-trace metric).
pub fn quat_angle_rad(qa: Quat, qb: Quat) -> f64 {
    let rel = qa.conjugate().mul_quat(qb);
    let s = Vec3::new(rel.x, rel.y, rel.z).norm();
    2.0 * s.atan2(rel.w.abs())
}

/// Sign-aligned normalized mean of unit quaternions (chordal mean).
pub fn quat_chordal_mean(quats: &[Quat]) -> Quat {
    assert!(!quats.is_empty(), "mean of empty quaternion set");
    let first = quats[0];
    let mut acc = [0.0f64; 4];
    for q in quats {
        let s = if q.dot(first) < 0.0 { -1.0 } else { 1.0 };
        acc[0] += s * q.w;
        acc[1] += s * q.x;
        acc[2] += s * q.y;
        acc[3] += s * q.z;
    }
    Quat::new(acc[0], acc[1], acc[2], acc[3]).normalized()
}

// ---------------------------------------------------------------------------
// SE(3)

/// Rigid transform: rotation as a unit quaternion plus a translation in
/// meters. Renormalized after every constructing operation so quaternion
/// drift stays below 1e-9.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl SE3Pose {
    pub fn identity() -> SE3Pose {
        SE3Pose { rotation: Quat::IDENTITY, translation: Vec3::ZERO }
    }

    /// Renormalizes the rotation only when drift exceeds 1e-12, so exact
    /// unit quaternions (e.g. reloaded from files) keep their bits.
    pub fn new(rotation: Quat, translation: Vec3) -> SE3Pose {
        let n2 = rotation.dot(rotation);
        let rotation = if (n2 - 1.0).abs() > 1e-12 { rotation.normalized() } else { rotation };
        SE3Pose { rotation, translation }
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_mat3()
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }
}

/// Composition `a * b` (apply `b` first, then `a`).
pub fn compose(a: &SE3Pose, b: &SE3Pose) -> SE3Pose {
    SE3Pose::new(
        a.rotation.mul_quat(b.rotation),
        a.rotation.rotate(b.translation) + a.translation,
    )
}

pub fn invert(a: &SE3Pose) -> SE3Pose {
    let r_inv = a.rotation.inverse();
    SE3Pose::new(r_inv, -r_inv.rotate(a.translation))
}

// ---------------------------------------------------------------------------
// 6D rotation parameterization

/// First two columns of a rotation matrix, unconstrained during
/// optimization; decoded by Gram-Schmidt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6D {
    pub a1: Vec3,
    pub a2: Vec3,
}

impl Rot6D {
    pub fn identity() -> Rot6D {
        Rot6D { a1: Vec3::new(1.0, 0.0, 0.0), a2: Vec3::new(0.0, 1.0, 0.0) }
    }

    /// Encode a rotation matrix as its first two columns.
    pub fn from_matrix(r: &Mat3) -> Rot6D {
        Rot6D { a1: r.col(0), a2: r.col(1) }
    }

    /// Gram-Schmidt decoding: `b1 = a1/|a1|`, `b2` the normalized rejection
    /// of `a2` from `b1`, `b3 = b1 x b2`.
    pub fn decode(&self) -> Result<Mat3, GeometryError> {
        let n1 = self.a1.norm();
        if n1 < ROT6D_EPS {
            return Err(GeometryError::DegenerateRotation("a1 is zero"));
        }
        let b1 = self.a1 / n1;
        let u2 = self.a2 - b1 * b1.dot(self.a2);
        let n2 = u2.norm();
        if n2 < ROT6D_EPS {
            return Err(GeometryError::DegenerateRotation("a2 parallel to a1"));
        }
        let b2 = u2 / n2;
        let b3 = b1.cross(b2);
        Ok(Mat3::from_cols(b1, b2, b3))
    }

    /// Adjoint of `decode`: maps `dL/dR` back to `(dL/da1, dL/da2)`.
    /// The encoding must decode successfully.
    pub fn decode_backward(&self, d_r: &Mat3) -> (Vec3, Vec3) {
        let n1 = self.a1.norm();
        let b1 = self.a1 / n1;
        let u2 = self.a2 - b1 * b1.dot(self.a2);
        let n2 = u2.norm();
        let b2 = u2 / n2;

        let g1 = d_r.col(0);
        let g2 = d_r.col(1);
        let g3 = d_r.col(2);

        // b3 = b1 x b2
        let mut d_b1 = g1 + b2.cross(g3);
        let d_b2 = g2 + g3.cross(b1);

        // b2 = u2 / |u2|
        let d_u2 = (d_b2 - b2 * b2.dot(d_b2)) / n2;

        // u2 = a2 - (b1 . a2) b1
        let d_a2 = d_u2 - b1 * b1.dot(d_u2);
        d_b1 += -(self.a2 * b1.dot(d_u2) + d_u2 * b1.dot(self.a2));

        // b1 = a1 / |a1|
        let d_a1 = (d_b1 - b1 * b1.dot(d_b1)) / n1;
        (d_a1, d_a2)
    }
}
