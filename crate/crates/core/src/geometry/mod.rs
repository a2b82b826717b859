//! Spatial primitives shared by every other module.
//!
//! Convention: right-handed, +Y up, cameras look along their local -Z axis.
//! Poses carry a raw quaternion so that malformed client input can be
//! represented and rejected explicitly; everything produced inside the crate
//! is unit-norm.

mod camera;
mod mesh;
mod surface;

pub use camera::{project, unproject, CameraModel, Ray};
pub use mesh::{raycast, EnvironmentMesh, SurfaceHit, Triangle};
pub use surface::correct_pose;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Tolerance used when checking that stored rotations are unit quaternions.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfBounds { u: f64, v: f64, width: u32, height: u32 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("point is behind the camera")]
    BehindCamera,
    #[error("triangle {index} is degenerate")]
    DegenerateTriangle { index: usize },
    #[error("mesh line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("mesh io: {0}")]
    Io(String),
}

/// Rigid placement plus per-axis scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    /// Stored as `[x, y, z, w]`.
    pub rotation: Quaternion<f64>,
    pub scale: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self::from_position(Vec3::zeros())
    }

    pub fn new(position: Vec3, rotation: Quat, scale: Vec3) -> Self {
        Self {
            position,
            rotation: rotation.into_inner(),
            scale,
        }
    }

    pub fn from_position(position: Vec3) -> Self {
        Self::new(position, Quat::identity(), Vec3::new(1.0, 1.0, 1.0))
    }

    pub fn with_rotation(mut self, rotation: Quat) -> Self {
        self.rotation = rotation.into_inner();
        self
    }

    /// Rotation as a unit quaternion. Callers should have checked
    /// [`Pose::is_valid`] for externally supplied poses.
    pub fn unit_rotation(&self) -> Quat {
        UnitQuaternion::from_quaternion(self.rotation)
    }

    pub fn has_unit_rotation(&self) -> bool {
        (self.rotation.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn is_valid(&self) -> bool {
        let finite = self.position.iter().all(|c| c.is_finite())
            && self.rotation.coords.iter().all(|c| c.is_finite())
            && self.scale.iter().all(|c| c.is_finite());
        finite && self.has_unit_rotation() && self.scale.iter().all(|&s| s > 0.0)
    }

    /// The rigid part of this pose (scale dropped).
    pub fn rigid(&self) -> RigidTransform {
        RigidTransform::new(self.unit_rotation(), self.position)
    }
}

/// Rotation followed by translation: `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Quat::identity(), Vec3::zeros())
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Quat::identity(), translation)
    }

    pub fn from_rotation(rotation: Quat) -> Self {
        Self::new(rotation, Vec3::zeros())
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        RigidTransform::new(inv, -(inv * self.translation))
    }

    pub fn apply_to_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_to_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Moves and re-orients a pose; scale is left untouched.
    pub fn apply_to_pose(&self, pose: &Pose) -> Pose {
        Pose {
            position: self.apply_to_point(&pose.position),
            rotation: (self.rotation * pose.unit_rotation()).into_inner(),
            scale: pose.scale,
        }
    }

    /// Largest deviation from `other` over translation and rotation angle (radians).
    pub fn approx_eq(&self, other: &RigidTransform, eps: f64) -> bool {
        (self.translation - other.translation).norm() <= eps
            && self.rotation.angle_to(&other.rotation) <= eps
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

pub fn apply_to_pose(t: &RigidTransform, p: &Pose) -> Pose {
    t.apply_to_pose(p)
}

pub fn apply_to_point(t: &RigidTransform, v: &Vec3) -> Vec3 {
    t.apply_to_point(v)
}

/// Euclidean distance between the positions of two poses, in meters.
pub fn positional_distance(a: &Pose, b: &Pose) -> f64 {
    (a.position - b.position).norm()
}

/// Rotation of `degrees` about the given axis.
pub fn rotation_about(axis: Vec3, degrees: f64) -> Quat {
    Quat::from_axis_angle(&nalgebra::Unit::new_normalize(axis), degrees.to_radians())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Independent oracle: homogeneous 4x4 matrices built from the rotation
    // matrix entries of an axis-angle rotation.
    fn mat_from_axis_angle(axis: [f64; 3], deg: f64, t: [f64; 3]) -> [[f64; 4]; 4] {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
        let (s, c) = deg.to_radians().sin_cos();
        let k = 1.0 - c;
        [
            [c + x * x * k, x * y * k - z * s, x * z * k + y * s, t[0]],
            [y * x * k + z * s, c + y * y * k, y * z * k - x * s, t[1]],
            [z * x * k - y * s, z * y * k + x * s, c + z * z * k, t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    fn mat_apply(m: &[[f64; 4]; 4], p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3];
        }
        out
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let t = RigidTransform::new(rotation_about(Vec3::new(1.0, 2.0, 0.5), 37.0), Vec3::new(0.3, -2.0, 4.0));
        assert!(t.compose(&t.inverse()).approx_eq(&RigidTransform::identity(), 1e-6));
        assert!(t.inverse().compose(&t).approx_eq(&RigidTransform::identity(), 1e-6));
    }

    #[test]
    fn translation_moves_origin() {
        let t = RigidTransform::from_translation(Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(t.apply_to_point(&Vec3::zeros()), Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn rotate_then_translate_matches_matrix_oracle() {
        let t = RigidTransform::new(rotation_about(Vec3::y(), 90.0), Vec3::new(1.0, 0.0, 0.0));
        let got = t.apply_to_point(&Vec3::new(0.0, 0.0, 1.0));
        let m = mat_from_axis_angle([0.0, 1.0, 0.0], 90.0, [1.0, 0.0, 0.0]);
        let want = mat_apply(&m, [0.0, 0.0, 1.0]);
        assert!((got - Vec3::from(want)).norm() < 1e-12);
        assert!((got - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn apply_to_pose_keeps_scale() {
        let t = RigidTransform::new(rotation_about(Vec3::x(), 30.0), Vec3::new(0.0, 1.0, 0.0));
        let p = Pose::new(Vec3::new(1.0, 2.0, 3.0), Quat::identity(), Vec3::new(2.0, 3.0, 4.0));
        let q = t.apply_to_pose(&p);
        assert_eq!(q.scale, p.scale);
        assert!(q.has_unit_rotation());
    }

    #[test]
    fn positional_distance_examples() {
        let o = Pose::identity();
        assert_eq!(positional_distance(&o, &o), 0.0);
        let a = Pose::from_position(Vec3::new(3.0, 4.0, 0.0));
        assert!((positional_distance(&o, &a) - 5.0).abs() < 1e-12);
        let b = Pose::from_position(Vec3::new(0.01, 0.02, 0.02));
        assert!((positional_distance(&b, &o) - 0.03).abs() < 1e-12);
    }

    #[test]
    fn pose_validation() {
        let mut p = Pose::identity();
        assert!(p.is_valid());
        p.rotation = Quaternion::new(0.0, 0.0, 0.0, 0.0);
        assert!(!p.is_valid());
        let mut s = Pose::identity();
        s.scale.x = 0.0;
        assert!(!s.is_valid());
    }

    #[test]
    fn pose_serializes_quaternion_xyzw() {
        let p = Pose::identity();
        let json = serde_json::to_value(p).unwrap();
        assert_eq!(json["rotation"], serde_json::json!([0.0, 0.0, 0.0, 1.0]));
    }

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            -180.0f64..180.0,
            prop::array::uniform3(-10.0f64..10.0),
        )
            .prop_filter("non-zero axis", |(a, _, _)| Vec3::from(*a).norm() > 1e-3)
            .prop_map(|(a, deg, t)| RigidTransform::new(rotation_about(Vec3::from(a), deg), Vec3::from(t)))
    }

    fn arb_point() -> impl Strategy<Value = Vec3> {
        prop::array::uniform3(-10.0f64..10.0).prop_map(Vec3::from)
    }

    proptest! {
        #[test]
        fn compose_is_associative(a in arb_transform(), b in arb_transform(), c in arb_transform()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(l.approx_eq(&r, 1e-6));
        }

        #[test]
        fn inverse_is_two_sided(a in arb_transform()) {
            prop_assert!(a.compose(&a.inverse()).approx_eq(&RigidTransform::identity(), 1e-6));
            prop_assert!(a.inverse().compose(&a).approx_eq(&RigidTransform::identity(), 1e-6));
        }

        #[test]
        fn positional_distance_is_a_metric(a in arb_point(), b in arb_point(), c in arb_point()) {
            let (pa, pb, pc) = (Pose::from_position(a), Pose::from_position(b), Pose::from_position(c));
            let ab = positional_distance(&pa, &pb);
            prop_assert!((ab - positional_distance(&pb, &pa)).abs() < 1e-12);
            prop_assert!(positional_distance(&pa, &pa) == 0.0);
            prop_assert!((ab == 0.0) == (a == b));
            prop_assert!(positional_distance(&pa, &pc) <= ab + positional_distance(&pb, &pc) + 1e-9);
        }
    }
}
