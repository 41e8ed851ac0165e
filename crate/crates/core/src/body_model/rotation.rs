//! Rotation representations and the conversions between them.
//!
//! The canonical storage is a 3x3 matrix. Quaternions are handed out in the
//! `w >= 0` hemisphere, and the 6D form is the first two matrix columns,
//! recovered by Gram-Schmidt.

use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use super::BodyModelError;

/// Norm below which a 6D column is treated as collapsed.
pub const DEGENERATE_NORM: f64 = 1e-8;

/// Allowed deviation of a quaternion norm from one.
pub const UNIT_QUATERNION_TOLERANCE: f64 = 1e-6;

/// A proper rotation stored as an orthonormal matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix after checking it is orthonormal with determinant +1
    /// to within `tolerance`.
    pub fn from_matrix(m: Matrix3<f64>, tolerance: f64) -> Result<Self, BodyModelError> {
        let err = orthonormality_error(&m);
        if !err.is_finite() || err > tolerance {
            return Err(BodyModelError::NotOrthonormal { error: err });
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix the caller already knows to be a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn about_axis(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        Self::from_axis_angle(&(axis * (angle / n)))
    }

    pub fn about_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::new(angle, 0.0, 0.0))
    }

    pub fn about_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::new(0.0, angle, 0.0))
    }

    pub fn about_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::new(0.0, 0.0, angle))
    }

    /// Exponential map: rotation by `|v|` radians about `v / |v|`.
    pub fn from_axis_angle(v: &Vector3<f64>) -> Self {
        let phi2 = v.norm_squared();
        let k = skew(v);
        let (s, c) = if phi2 < 1e-8 {
            // sin(phi)/phi and (1 - cos(phi))/phi^2 to fourth order
            (
                1.0 - phi2 / 6.0 + phi2 * phi2 / 120.0,
                0.5 - phi2 / 24.0 + phi2 * phi2 / 720.0,
            )
        } else {
            let phi = phi2.sqrt();
            (phi.sin() / phi, (1.0 - phi.cos()) / phi2)
        };
        Rotation(Matrix3::identity() + k * s + k * k * c)
    }

    /// Logarithm map, returning an axis-angle vector with angle in `[0, pi]`.
    pub fn axis_angle(&self) -> Vector3<f64> {
        let q = self.quaternion();
        let v = q.vector();
        let s = v.norm();
        let w = q.w;
        if s < 1e-12 {
            return v * (2.0 / w);
        }
        let angle = 2.0 * s.atan2(w);
        v * (angle / s)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Rotation(*q.to_rotation_matrix().matrix())
    }

    /// Quaternion form, canonicalized to `w >= 0`.
    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0));
        canonical_quaternion(q)
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Geodesic angle between two rotations, in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        let rel = self.0 * other.0.transpose();
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        // acos loses precision near zero; the axis-angle norm does not.
        if c > 0.99 {
            Rotation(rel).axis_angle().norm()
        } else {
            c.acos()
        }
    }

    /// `|| R^T R - I ||_F + |det R - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.0)
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for &Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

pub fn orthonormality_error(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).norm() + (m.determinant() - 1.0).abs()
}

pub fn canonical_quaternion(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Builds a unit quaternion from `(w, x, y, z)` after checking its norm.
pub fn unit_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<UnitQuaternion<f64>, BodyModelError> {
    let q = Quaternion::new(w, x, y, z);
    let norm = q.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_QUATERNION_TOLERANCE {
        return Err(BodyModelError::NonUnitQuaternion { norm });
    }
    Ok(UnitQuaternion::new_unchecked(q))
}

/// Decodes a 6D rotation (two stacked column vectors) by Gram-Schmidt.
pub fn rot6d_to_matrix(r: &[f64; 6]) -> Result<Rotation, BodyModelError> {
    let a1 = Vector3::new(r[0], r[1], r[2]);
    let a2 = Vector3::new(r[3], r[4], r[5]);
    let n1 = a1.norm();
    if !(n1 > DEGENERATE_NORM) {
        return Err(BodyModelError::DegenerateInput { which: "first column", norm: n1 });
    }
    let b1 = a1 / n1;
    let residual = a2 - b1 * b1.dot(&a2);
    let n2 = residual.norm();
    if !(n2 > DEGENERATE_NORM) {
        return Err(BodyModelError::DegenerateInput { which: "second column", norm: n2 });
    }
    let b2 = residual / n2;
    let b3 = b1.cross(&b2);
    Ok(Rotation(Matrix3::from_columns(&[b1, b2, b3])))
}

/// First two columns of the rotation matrix, concatenated.
pub fn matrix_to_rot6d(r: &Rotation) -> [f64; 6] {
    let m = r.matrix();
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

/// `1 - |q1 . q2|`, in `[0, 1]`, zero exactly when `q1 = +-q2`.
pub fn quat_distance(q1: &Quaternion<f64>, q2: &Quaternion<f64>) -> Result<f64, BodyModelError> {
    for q in [q1, q2] {
        let norm = q.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_QUATERNION_TOLERANCE {
            return Err(BodyModelError::NonUnitQuaternion { norm });
        }
    }
    Ok((1.0 - q1.dot(q2).abs()).clamp(0.0, 1.0))
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

// (1 - cos p)/p^2, (p - sin p)/p^3 and their derivatives divided by p.
fn jacobian_coefficients(phi2: f64) -> (f64, f64, f64, f64) {
    if phi2 < 1e-4 {
        let p4 = phi2 * phi2;
        (
            0.5 - phi2 / 24.0 + p4 / 720.0,
            1.0 / 6.0 - phi2 / 120.0 + p4 / 5040.0,
            -1.0 / 12.0 + phi2 / 180.0 - p4 / 6720.0,
            -1.0 / 60.0 + phi2 / 1260.0 - p4 / 60480.0,
        )
    } else {
        let phi = phi2.sqrt();
        let (s, c) = phi.sin_cos();
        let p3 = phi2 * phi;
        let p4 = phi2 * phi2;
        (
            (1.0 - c) / phi2,
            (phi - s) / p3,
            (phi * s - 2.0 * (1.0 - c)) / p4,
            (phi * (1.0 - c) - 3.0 * (phi - s)) / (p4 * phi),
        )
    }
}

/// Left Jacobian of SO(3): maps the rate of an axis-angle vector to the
/// angular velocity it produces, expressed in the frame the rotation acts from.
pub fn left_jacobian(theta: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _, _) = jacobian_coefficients(theta.norm_squared());
    let k = skew(theta);
    Matrix3::identity() + k * a + k * k * b
}

/// Time derivative of [`left_jacobian`] along `theta_dot`.
pub fn left_jacobian_rate(theta: &Vector3<f64>, theta_dot: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, da, db) = jacobian_coefficients(theta.norm_squared());
    let proj = theta.dot(theta_dot);
    let k = skew(theta);
    let kd = skew(theta_dot);
    k * (da * proj) + kd * a + k * k * (db * proj) + (kd * k + k * kd) * b
}

/// Picks the axis-angle vector for the same rotation as `theta` that lies
/// closest to `reference`, so sequences do not jump across the `pi` boundary.
pub fn unwrap_axis_angle(theta: &Vector3<f64>, reference: &Vector3<f64>) -> Vector3<f64> {
    let phi = theta.norm();
    if phi < 1e-9 {
        return *theta;
    }
    let axis = theta / phi;
    let mut best = *theta;
    let mut best_dist = (theta - reference).norm();
    for k in [-2.0_f64, -1.0, 1.0, 2.0] {
        let candidate = axis * (phi + k * std::f64::consts::TAU);
        let d = (candidate - reference).norm();
        if d < best_dist {
            best = candidate;
            best_dist = d;
        }
    }
    best
}
