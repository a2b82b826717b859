//! Resolves a model's pixel coordinate into a resting pose on the desk.

use std::path::PathBuf;

use sharedspace::geometry::{
    correct_pose, project, raycast, rotation_about, unproject, CameraModel, EnvironmentMesh, Pose, Vec3,
};

fn main() -> anyhow::Result<()> {
    let room = EnvironmentMesh::load(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/flagship/room.mesh"))?;
    let pose = Pose::from_position(Vec3::new(0.0, 1.6, -0.35)).with_rotation(rotation_about(Vec3::x(), -45.0));
    let camera = CameraModel::new(pose, 90.0, 640, 480);
    let extents = Vec3::new(0.1, 0.1, 0.1);
    for (u, v) in [(320.0, 240.0), (200.0, 300.0), (500.0, 460.0), (320.0, 5.0)] {
        let ray = unproject(u, v, &camera)?;
        match raycast(&ray, &room) {
            Some(hit) => {
                let placed = correct_pose(&hit, &extents);
                let (pu, pv) = project(&hit.point, &camera)?;
                println!(
                    "pixel ({u:>5.1}, {v:>5.1}) hits {:.3?} at {:.3} m, normal {:.2?}; object center {:.3?}; reprojects to ({pu:.3}, {pv:.3})",
                    hit.point.as_slice(),
                    hit.distance,
                    hit.normal.as_slice(),
                    placed.position.as_slice()
                );
            }
            None => println!("pixel ({u:>5.1}, {v:>5.1}) sees no surface"),
        }
    }
    Ok(())
}
