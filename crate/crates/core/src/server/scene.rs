use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ServerError;
use crate::colocation::UserId;
use crate::geometry::{correct_pose, raycast, unproject, CameraModel, EnvironmentMesh, Pose, Vec3};
use crate::mllm::Space;
use crate::protocol::SceneObjectView;

/// Server-side record of one virtual object. `pose` is in the reference
/// user's world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SceneObject {
    pub object_id: u32,
    pub name: String,
    pub prefab_name: String,
    pub pose: Pose,
    pub extents: Vec3,
    #[serde(default)]
    pub color: Option<String>,
    pub created_by: UserId,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    objects: BTreeMap<u32, SceneObject>,
    next_id: u32,
}

impl Scene {
    pub fn new() -> Self {
        Self {
            objects: BTreeMap::new(),
            next_id: 1,
        }
    }

    /// Next id from the monotonic counter; never reused.
    pub fn allocate_id(&mut self) -> u32 {
        if self.next_id == 0 {
            self.next_id = 1;
        }
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn peek_next_id(&self) -> u32 {
        self.next_id.max(1)
    }

    /// Stores the object and keeps the id counter past it.
    pub fn insert(&mut self, object: SceneObject) {
        self.next_id = self.next_id.max(object.object_id.saturating_add(1));
        self.objects.insert(object.object_id, object);
    }

    pub fn get(&self, id: u32) -> Option<&SceneObject> {
        self.objects.get(&id)
    }

    pub fn get_mut(&mut self, id: u32) -> Option<&mut SceneObject> {
        self.objects.get_mut(&id)
    }

    pub fn remove(&mut self, id: u32) -> Option<SceneObject> {
        self.objects.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SceneObject> {
        self.objects.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut SceneObject> {
        self.objects.values_mut()
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.objects.values().map(|o| o.name.clone()).collect()
    }

    /// Exact name, then case-insensitive name, then the newest object of
    /// that prefab.
    pub fn find(&self, name: &str) -> Option<u32> {
        let by = |f: &dyn Fn(&SceneObject) -> bool| self.objects.values().rev().find(|o| f(o)).map(|o| o.object_id);
        by(&|o| o.name == name)
            .or_else(|| by(&|o| o.name.eq_ignore_ascii_case(name)))
            .or_else(|| by(&|o| o.prefab_name.eq_ignore_ascii_case(name)))
    }

    pub fn view(&self, id: u32, pose_for_recipient: Pose, owner: Option<UserId>, epoch: u64) -> Option<SceneObjectView> {
        self.objects.get(&id).map(|o| SceneObjectView {
            object_id: o.object_id,
            name: o.name.clone(),
            prefab_name: o.prefab_name.clone(),
            pose: pose_for_recipient,
            extents: o.extents,
            color: o.color.clone(),
            owner,
            epoch,
        })
    }
}

/// What the owner's device knows when a pose must be resolved.
#[derive(Debug, Clone, Copy, Default)]
pub struct OwnerContext<'a> {
    pub camera: Option<&'a CameraModel>,
    pub environment: Option<&'a EnvironmentMesh>,
}

/// Resolves a model-generated position into a pose in the owner's world
/// frame. Pixel positions are raycast into the environment and placed on
/// the hit surface; local positions are offsets from `anchor` (the parent
/// object, or the capture camera when there is no parent).
pub fn resolve_pose(
    space: Space,
    position: [f64; 3],
    extents: &Vec3,
    ctx: &OwnerContext<'_>,
    anchor: Option<&Pose>,
) -> Result<Pose, ServerError> {
    match space {
        Space::World => Ok(Pose::from_position(Vec3::from(position))),
        Space::Local => {
            let base = anchor
                .or(ctx.camera.map(|c| &c.pose))
                .ok_or_else(|| ServerError::Placement("local position without a parent or camera".into()))?;
            let rigid = base.rigid();
            let mut p = Pose::from_position(rigid.apply_to_point(&Vec3::from(position)));
            p.rotation = rigid.rotation.into_inner();
            Ok(p)
        }
        Space::Pixel => {
            let camera = ctx
                .camera
                .ok_or_else(|| ServerError::Placement("pixel position without a capture camera".into()))?;
            let env = ctx
                .environment
                .ok_or_else(|| ServerError::Placement("pixel position without an environment mesh".into()))?;
            let ray = unproject(position[0], position[1], camera).map_err(|e| ServerError::Placement(e.to_string()))?;
            let hit = raycast(&ray, env)
                .ok_or_else(|| ServerError::Placement(format!("no surface under pixel ({}, {})", position[0], position[1])))?;
            Ok(correct_pose(&hit, extents))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, rotation_about};

    fn object(id: u32, name: &str, prefab: &str) -> SceneObject {
        SceneObject {
            object_id: id,
            name: name.into(),
            prefab_name: prefab.into(),
            pose: Pose::identity(),
            extents: Vec3::new(0.1, 0.1, 0.1),
            color: None,
            created_by: UserId::from("a"),
        }
    }

    #[test]
    fn ids_are_monotonic() {
        let mut s = Scene::new();
        let a = s.allocate_id();
        s.insert(object(a, "x", "x"));
        s.remove(a);
        assert!(s.allocate_id() > a);
    }

    #[test]
    fn inserting_a_peeked_id_advances_the_counter() {
        let mut s = Scene::new();
        let a = s.peek_next_id();
        s.insert(object(a, "ball-1", "ball"));
        assert_eq!(s.peek_next_id(), a + 1);
        s.insert(object(9, "ball-9", "ball"));
        assert_eq!(s.allocate_id(), 10);
    }

    #[test]
    fn find_prefers_exact_then_newest_prefab() {
        let mut s = Scene::new();
        s.insert(object(1, "cube-1", "cube"));
        s.insert(object(2, "cube-2", "cube"));
        assert_eq!(s.find("cube-1"), Some(1));
        assert_eq!(s.find("CUBE-1"), Some(1));
        assert_eq!(s.find("cube"), Some(2));
        assert_eq!(s.find("ball"), None);
    }

    #[test]
    fn pixel_placement_lands_on_floor() {
        // Camera 1.6 m up, pitched 60 degrees down, looking at the floor.
        let pose = Pose::new(Vec3::new(0.0, 1.6, 0.0), rotation_about(Vec3::x(), -60.0), Vec3::new(1.0, 1.0, 1.0));
        let cam = CameraModel::new(pose, 90.0, 640, 480);
        let env = EnvironmentMesh::floor(0.0, 20.0);
        let ctx = OwnerContext { camera: Some(&cam), environment: Some(&env) };
        let extents = Vec3::new(0.2, 0.2, 0.2);
        let p = resolve_pose(Space::Pixel, [320.0, 240.0, 0.0], &extents, &ctx, None).unwrap();
        // Center pixel hits the floor at z = -1.6 / tan(60).
        let z = -1.6 / 60f64.to_radians().tan();
        assert!((p.position - Vec3::new(0.0, 0.1, z)).norm() < 1e-9);
        let hit = p.position - Vec3::new(0.0, 0.1, 0.0);
        let (u, v) = project(&hit, &cam).unwrap();
        assert!((u - 320.0).abs() < 1e-6 && (v - 240.0).abs() < 1e-6);
    }

    #[test]
    fn pixel_placement_needs_camera_and_surface() {
        let env = EnvironmentMesh::floor(0.0, 1.0);
        let e = Vec3::new(0.1, 0.1, 0.1);
        let ctx = OwnerContext { camera: None, environment: Some(&env) };
        assert!(resolve_pose(Space::Pixel, [1.0, 1.0, 0.0], &e, &ctx, None).is_err());
        // Looking straight ahead never meets the floor.
        let cam = CameraModel::new(Pose::from_position(Vec3::new(0.0, 1.0, 0.0)), 60.0, 100, 100);
        let ctx = OwnerContext { camera: Some(&cam), environment: Some(&env) };
        assert!(resolve_pose(Space::Pixel, [50.0, 10.0, 0.0], &e, &ctx, None).is_err());
    }

    #[test]
    fn local_placement_composes_with_parent() {
        let parent = Pose::new(Vec3::new(1.0, 0.0, 0.0), rotation_about(Vec3::y(), 90.0), Vec3::new(1.0, 1.0, 1.0));
        let p = resolve_pose(Space::Local, [0.0, 0.0, -1.0], &Vec3::zeros(), &OwnerContext::default(), Some(&parent))
            .unwrap();
        // +90 deg about Y maps -Z to -X.
        assert!((p.position - Vec3::new(0.0, 0.0, 0.0)).norm() < 1e-9);
        assert!(resolve_pose(Space::Local, [0.0; 3], &Vec3::zeros(), &OwnerContext::default(), None).is_err());
    }

    #[test]
    fn world_placement_is_verbatim() {
        let p = resolve_pose(Space::World, [1.0, 0.0, 2.0], &Vec3::zeros(), &OwnerContext::default(), None).unwrap();
        assert_eq!(p.position, Vec3::new(1.0, 0.0, 2.0));
    }
}
