//! Rigid transforms in SE(3).
//!
//! [`Pose`] is the currency of targets, commands and forward-kinematics
//! results. Quaternions are kept in canonical form (w >= 0) after every
//! operation so that serialized poses and comparisons are deterministic.

use std::ops::Mul;

use nalgebra::{Isometry3, Point3, Quaternion, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// A rigid transform: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let q = q.into_inner();
    let q = if q.w < 0.0 { -q } else { q };
    UnitQuaternion::new_normalize(q)
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Pose {
            position,
            orientation: canonical(orientation),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Pose::new(Vector3::new(x, y, z), UnitQuaternion::identity())
    }

    /// Builds a pose from a raw `(w, x, y, z)` quaternion, normalizing it.
    pub fn from_parts(position: [f64; 3], wxyz: [f64; 4]) -> Self {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        Pose::new(Vector3::from(position), UnitQuaternion::new_normalize(q))
    }

    /// Planar pose: translation `(x, y, z)` and a rotation of `yaw` about +z.
    pub fn planar(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Pose::new(
            Vector3::new(x, y, z),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
        )
    }

    pub fn from_axis_angle(axis: &Unit<Vector3<f64>>, angle: f64) -> Self {
        Pose::new(Vector3::zeros(), UnitQuaternion::from_axis_angle(axis, angle))
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.orientation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.position + self.orientation * other.position,
            self.orientation * other.orientation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.orientation.inverse();
        Pose::new(-(inv * self.position), inv)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.position + self.orientation * p
    }

    /// Rotation vector taking `other`'s orientation to this one, expressed in
    /// the outer frame: `log(R_self * R_other^T)`.
    pub fn rotation_error(&self, other: &Pose) -> Vector3<f64> {
        (self.orientation * other.orientation.inverse()).scaled_axis()
    }

    pub fn angle_to(&self, other: &Pose) -> f64 {
        self.orientation.angle_to(&other.orientation)
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Pose::new(iso.translation.vector, iso.rotation)
    }

    pub fn yaw(&self) -> f64 {
        let (_, _, yaw) = self.orientation.euler_angles();
        yaw
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.orientation.coords.iter().all(|v| v.is_finite())
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

impl From<Isometry3<f64>> for Pose {
    fn from(iso: Isometry3<f64>) -> Self {
        Pose::from_isometry(&iso)
    }
}

impl From<Pose> for Point3<f64> {
    fn from(p: Pose) -> Self {
        Point3::from(p.position)
    }
}

/// JSON form: `{"position": [x, y, z], "orientation": [w, x, y, z]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub position: [f64; 3],
    pub orientation: [f64; 4],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        PoseRecord {
            position: [p.position.x, p.position.y, p.position.z],
            orientation: p.wxyz(),
        }
    }
}

impl From<&PoseRecord> for Pose {
    fn from(r: &PoseRecord) -> Self {
        Pose::from_parts(r.position, r.orientation)
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PoseRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = PoseRecord::deserialize(d)?;
        Ok(Pose::from(&r))
    }
}
