use super::{Pose, Quat, SurfaceHit, Vec3};

/// Places an object on a surface: its local +Y is turned onto the surface
/// normal by the shortest arc, and it is lifted by half its height so that it
/// rests on the surface instead of intersecting it.
///
/// A normal of exactly -Y has no unique shortest arc; that case rotates 180°
/// about +X.
pub fn correct_pose(hit: &SurfaceHit, object_extents: &Vec3) -> Pose {
    let normal = hit.normal.normalize();
    let rotation = Quat::rotation_between(&Vec3::y(), &normal).unwrap_or_else(|| {
        Quat::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI)
    });
    Pose::new(
        hit.point + normal * (object_extents.y / 2.0),
        rotation,
        Vec3::new(1.0, 1.0, 1.0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hit(point: Vec3, normal: Vec3) -> SurfaceHit {
        SurfaceHit {
            point,
            normal,
            distance: 1.0,
        }
    }

    #[test]
    fn up_facing_surface_keeps_identity() {
        let p = correct_pose(&hit(Vec3::zeros(), Vec3::y()), &Vec3::repeat(0.2));
        assert!((p.position - Vec3::new(0.0, 0.1, 0.0)).norm() < 1e-12);
        assert!(p.unit_rotation().angle() < 1e-12);
        assert_eq!(p.scale, Vec3::repeat(1.0));
    }

    #[test]
    fn wall_facing_x() {
        let p = correct_pose(&hit(Vec3::new(1.0, 1.0, 0.0), Vec3::x()), &Vec3::new(0.2, 0.4, 0.2));
        assert!((p.position - Vec3::new(1.2, 1.0, 0.0)).norm() < 1e-12);
        let up = p.unit_rotation() * Vec3::y();
        assert!((up - Vec3::x()).norm() < 1e-12);
        // Shortest arc from +Y to +X is -90° about +Z.
        let expected = Quat::from_axis_angle(&Vec3::z_axis(), -std::f64::consts::FRAC_PI_2);
        assert!(p.unit_rotation().angle_to(&expected) < 1e-12);
    }

    #[test]
    fn ceiling_flips_about_x() {
        let h = hit(Vec3::new(0.0, 2.5, 0.0), -Vec3::y());
        let p = correct_pose(&h, &Vec3::repeat(0.2));
        assert!((p.position - h.point - Vec3::new(0.0, -0.1, 0.0)).norm() < 1e-12);
        assert!((p.unit_rotation() * Vec3::y() + Vec3::y()).norm() < 1e-12);
        let expected = Quat::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI);
        assert!(p.unit_rotation().angle_to(&expected) < 1e-12);
    }

    #[test]
    fn offset_is_half_height_along_normal() {
        let n = Vec3::new(0.3, 0.8, -0.52).normalize();
        let p = correct_pose(&hit(Vec3::new(0.4, 0.1, 2.0), n), &Vec3::new(0.1, 0.7, 0.3));
        let off = p.position - Vec3::new(0.4, 0.1, 2.0);
        assert!((off.norm() - 0.35).abs() < 1e-12);
        assert!((off.normalize() - n).norm() < 1e-12);
    }
}
