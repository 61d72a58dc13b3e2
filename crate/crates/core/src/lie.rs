//! SE(3) pose algebra.
//!
//! Tangent vectors are ordered `[rotation | translation]` everywhere in the
//! crate. Pose increments are applied on the left: `P' = exp(σ^) · P`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Below this rotation angle the exponential map uses its Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Drift in `‖RᵀR − I‖∞` that triggers re-orthonormalization.
pub const REORTHONORMALIZE_TOL: f64 = 1e-7;

/// Largest drift accepted when building a pose from a raw matrix.
pub const ROTATION_ACCEPT_TOL: f64 = 1e-4;

/// Margin to π below which the logarithm is unambiguous.
pub const LOG_PI_MARGIN: f64 = 1e-6;

/// Below this angle the series forms of the Jacobian coefficients are used.
const SERIES_ANGLE: f64 = 1e-3;

/// Element of se(3): axis-angle rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rotation: Vector3::new(v[0], v[1], v[2]),
            translation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation
            .iter()
            .chain(self.translation.iter())
            .all(|x| x.is_finite())
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self::new(self.rotation * factor, self.translation * factor)
    }
}

/// Rigid transform `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Serialized as the 12 row-major entries of `[R | t]`.
impl Serialize for SE3Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major_3x4().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SE3Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let values = <[f64; 12]>::deserialize(deserializer)?;
        SE3Pose::from_row_major_3x4(&values).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for SE3Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.translation;
        write!(
            f,
            "SE3(t: [{:.6}, {:.6}, {:.6}], angle: {:.6} rad)",
            t.x,
            t.y,
            t.z,
            self.rotation_angle()
        )
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from a rotation matrix and translation.
    ///
    /// Rotations that drift from SO(3) by less than [`ROTATION_ACCEPT_TOL`]
    /// are projected back onto it; anything further is rejected.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation
            .iter()
            .chain(translation.iter())
            .all(|x| x.is_finite())
        {
            return Err(Error::InvalidArgument("pose has non-finite entries".into()));
        }
        let drift = orthonormality_error(&rotation);
        if drift > ROTATION_ACCEPT_TOL || rotation.determinant() <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "matrix is not a rotation (‖RᵀR − I‖∞ = {drift:e})"
            )));
        }
        let rotation = if drift > 1e-9 {
            nearest_rotation(&rotation)
        } else {
            rotation
        };
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Row-major `[R | t]`, the layout of KITTI pose files.
    pub fn from_row_major_3x4(values: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9],
            values[10],
        );
        let translation = Vector3::new(values[3], values[7], values[11]);
        Self::from_parts(rotation, translation)
    }

    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn with_translation(&self, translation: Vector3<f64>) -> Self {
        Self {
            rotation: self.rotation,
            translation,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self · other`, re-orthonormalizing the rotation once drift exceeds
    /// [`REORTHONORMALIZE_TOL`].
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        let mut rotation = self.rotation * other.rotation;
        if orthonormality_error(&rotation) > REORTHONORMALIZE_TOL {
            rotation = nearest_rotation(&rotation);
        }
        SE3Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let rt = self.rotation.transpose();
        SE3Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    pub fn exp(twist: &Twist) -> Result<SE3Pose> {
        exp_se3(twist)
    }

    pub fn log(&self) -> Result<Twist> {
        log_se3(self)
    }

    /// Applies a left increment: `exp(σ^) · self`.
    pub fn retract(&self, step: &Twist) -> Result<SE3Pose> {
        Ok(exp_se3(step)?.compose(self))
    }
}

impl Mul for SE3Pose {
    type Output = SE3Pose;

    fn mul(self, rhs: SE3Pose) -> SE3Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a SE3Pose> for &'a SE3Pose {
    type Output = SE3Pose;

    fn mul(self, rhs: &'a SE3Pose) -> SE3Pose {
        self.compose(rhs)
    }
}

/// Skew-symmetric matrix with `hat(a) · b = a × b`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// `‖RᵀR − I‖∞` (max-abs entry).
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

/// Closest rotation in the Frobenius sense (polar factor via SVD).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = 0.5 * (r.trace() - 1.0);
    let sin = 0.5 * vee(&(r - r.transpose())).norm();
    sin.atan2(cos)
}

/// Coefficients `(sinθ/θ, (1−cosθ)/θ², (θ−sinθ)/θ³)` of the Rodrigues
/// formula and the SE(3) left Jacobian.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    if theta < SERIES_ANGLE {
        let a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        let b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
        let c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0;
        (a, b, c)
    } else {
        let half_sin = (0.5 * theta).sin();
        let a = theta.sin() / theta;
        let b = 2.0 * half_sin * half_sin / t2;
        let c = (theta - theta.sin()) / (t2 * theta);
        (a, b, c)
    }
}

/// Exponential map se(3) → SE(3).
pub fn exp_se3(twist: &Twist) -> Result<SE3Pose> {
    if !twist.is_finite() {
        return Err(Error::InvalidArgument(
            "twist has non-finite entries".into(),
        ));
    }
    let w = hat(&twist.rotation);
    let w2 = w * w;
    let theta = twist.rotation.norm();
    let (rotation, left_jacobian) = if theta < SMALL_ANGLE {
        (
            Matrix3::identity() + w + w2 * 0.5,
            Matrix3::identity() + w * 0.5 + w2 / 6.0,
        )
    } else {
        let (a, b, c) = rodrigues_coefficients(theta);
        (
            Matrix3::identity() + w * a + w2 * b,
            Matrix3::identity() + w * b + w2 * c,
        )
    };
    Ok(SE3Pose {
        rotation,
        translation: left_jacobian * twist.translation,
    })
}

/// Logarithm map SE(3) → se(3), rotation angle in `[0, π)`.
pub fn log_se3(pose: &SE3Pose) -> Result<Twist> {
    let r = &pose.rotation;
    let theta = rotation_angle(r);
    if theta > PI - LOG_PI_MARGIN {
        return Err(Error::AmbiguousLogarithm { angle: theta });
    }
    let axis_sin = vee(&(r - r.transpose())) * 0.5;
    let t2 = theta * theta;
    // θ / sinθ
    let scale = if theta < SERIES_ANGLE {
        1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0
    } else {
        theta / theta.sin()
    };
    let rotation = axis_sin * scale;
    let w = hat(&rotation);
    // (1 − A/(2B)) / θ² where A = sinθ/θ, B = (1−cosθ)/θ²
    let d = if theta < SERIES_ANGLE {
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let (a, b, _) = rodrigues_coefficients(theta);
        (1.0 - a / (2.0 * b)) / t2
    };
    let v_inv = Matrix3::identity() - w * 0.5 + w * w * d;
    Ok(Twist {
        rotation,
        translation: v_inv * pose.translation,
    })
}

pub fn compose(a: &SE3Pose, b: &SE3Pose) -> SE3Pose {
    a.compose(b)
}

pub fn inverse(a: &SE3Pose) -> SE3Pose {
    a.inverse()
}
