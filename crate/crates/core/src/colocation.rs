//! Tag-based registration and alignment of users' world frames.
//!
//! Each user reports the pose of one fixed fiducial tag in their own world
//! frame. Two records of the same tag give the basis change between the two
//! frames; after that, device tracking keeps frames consistent and the tag no
//! longer needs to be visible.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{positional_distance, Pose, Quat, RigidTransform, Vec3};

/// Opaque user identifier, unique within a session.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl UserId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for UserId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ColocationError {
    #[error("registration failed: {0}")]
    RegistrationFailed(String),
    #[error("cannot align: users registered different tags ({from_tag} vs {to_tag})")]
    TagMismatch { from_tag: u32, to_tag: u32 },
    #[error("user {0} is not registered")]
    NotRegistered(UserId),
    #[error("probe set is empty")]
    EmptyProbeSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TagObservation {
    pub tag_id: u32,
    /// Tag pose in the observer's world frame.
    pub tag_pose: Pose,
    pub tag_size_meters: f64,
    pub observation_distance: f64,
    pub timestamp: f64,
}

impl TagObservation {
    pub fn validate(&self) -> Result<(), ColocationError> {
        if !self.tag_pose.has_unit_rotation() {
            return Err(ColocationError::RegistrationFailed(
                "tag rotation is not a unit quaternion".into(),
            ));
        }
        if !self.tag_pose.position.iter().all(|c| c.is_finite()) {
            return Err(ColocationError::RegistrationFailed("tag position is not finite".into()));
        }
        if !(self.tag_size_meters > 0.0) {
            return Err(ColocationError::RegistrationFailed("tag size must be positive".into()));
        }
        if !(self.observation_distance >= 0.0) {
            return Err(ColocationError::RegistrationFailed(
                "observation distance must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RegistrationRecord {
    pub user_id: UserId,
    pub tag_id: u32,
    pub tag_pose: Pose,
    pub registered_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AlignmentTransform {
    pub from_user: UserId,
    pub to_user: UserId,
    pub transform: RigidTransform,
}

impl AlignmentTransform {
    pub fn identity(user: UserId) -> Self {
        Self {
            from_user: user.clone(),
            to_user: user,
            transform: RigidTransform::identity(),
        }
    }

    pub fn compose(&self, first: &AlignmentTransform) -> AlignmentTransform {
        AlignmentTransform {
            from_user: first.from_user.clone(),
            to_user: self.to_user.clone(),
            transform: self.transform.compose(&first.transform),
        }
    }

    pub fn inverse(&self) -> AlignmentTransform {
        AlignmentTransform {
            from_user: self.to_user.clone(),
            to_user: self.from_user.clone(),
            transform: self.transform.inverse(),
        }
    }
}

/// Validates an observation and builds the record that anchors the user's frame.
pub fn register(
    user: &UserId,
    observation: Option<&TagObservation>,
) -> Result<RegistrationRecord, ColocationError> {
    let obs = observation.ok_or_else(|| ColocationError::RegistrationFailed("no tag detected".into()))?;
    obs.validate()?;
    let mut tag_pose = obs.tag_pose;
    tag_pose.rotation = tag_pose.unit_rotation().into_inner();
    Ok(RegistrationRecord {
        user_id: user.clone(),
        tag_id: obs.tag_id,
        tag_pose,
        registered_at: obs.timestamp,
    })
}

/// One active registration per user; re-registering replaces the old record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRegistry {
    records: BTreeMap<UserId, RegistrationRecord>,
}

impl RegistrationRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        user: &UserId,
        observation: Option<&TagObservation>,
    ) -> Result<RegistrationRecord, ColocationError> {
        let record = register(user, observation)?;
        self.records.insert(user.clone(), record.clone());
        Ok(record)
    }

    pub fn get(&self, user: &UserId) -> Option<&RegistrationRecord> {
        self.records.get(user)
    }

    pub fn contains(&self, user: &UserId) -> bool {
        self.records.contains_key(user)
    }

    pub fn iter(&self) -> impl Iterator<Item = &RegistrationRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn alignment(&self, from: &UserId, to: &UserId) -> Result<AlignmentTransform, ColocationError> {
        let a = self.get(from).ok_or_else(|| ColocationError::NotRegistered(from.clone()))?;
        let b = self.get(to).ok_or_else(|| ColocationError::NotRegistered(to.clone()))?;
        alignment_transform(a, b)
    }
}

/// Maps poses in `from`'s world frame into `to`'s world frame so that the
/// physical tag coincides: `T_to ∘ T_from⁻¹`.
pub fn alignment_transform(
    from: &RegistrationRecord,
    to: &RegistrationRecord,
) -> Result<AlignmentTransform, ColocationError> {
    if from.tag_id != to.tag_id {
        return Err(ColocationError::TagMismatch {
            from_tag: from.tag_id,
            to_tag: to.tag_id,
        });
    }
    Ok(AlignmentTransform {
        from_user: from.user_id.clone(),
        to_user: to.user_id.clone(),
        transform: to.tag_pose.rigid().compose(&from.tag_pose.rigid().inverse()),
    })
}

pub fn transform_pose_between_users(pose: &Pose, alignment: &AlignmentTransform) -> Pose {
    alignment.transform.apply_to_pose(pose)
}

/// Mean distance between where two alignments put the same probe points.
pub fn spatial_inconsistency(
    estimated: &AlignmentTransform,
    truth: &AlignmentTransform,
    probes: &[Vec3],
) -> Result<f64, ColocationError> {
    if probes.is_empty() {
        return Err(ColocationError::EmptyProbeSet);
    }
    let total: f64 = probes
        .iter()
        .map(|p| {
            positional_distance(
                &Pose::from_position(estimated.transform.apply_to_point(p)),
                &Pose::from_position(truth.transform.apply_to_point(p)),
            )
        })
        .sum();
    Ok(total / probes.len() as f64)
}

/// Edge length of the default probe cube, meters.
pub const PROBE_CUBE_EDGE: f64 = 3.0;

/// The 8 corners of a cube of edge [`PROBE_CUBE_EDGE`] centered on `center`.
pub fn default_probes(center: &Vec3) -> Vec<Vec3> {
    let h = PROBE_CUBE_EDGE / 2.0;
    let mut out = Vec::with_capacity(8);
    for sx in [-h, h] {
        for sy in [-h, h] {
            for sz in [-h, h] {
                out.push(center + Vec3::new(sx, sy, sz));
            }
        }
    }
    out
}

/// Simulated tag-detector error.
///
/// Both the position and rotation standard deviations are multiplied by
/// `1 + distance_scaling * distance / tag_size`, so error grows with viewing
/// distance and shrinks with larger tags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct NoiseSpec {
    /// Per-axis position standard deviation, meters.
    pub position_sigma: f64,
    /// Per-axis rotation-vector standard deviation, degrees.
    pub rotation_sigma_deg: f64,
    pub distance_scaling: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            position_sigma: 0.004,
            rotation_sigma_deg: 0.2,
            distance_scaling: 0.02,
            seed: 7,
        }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self {
            position_sigma: 0.0,
            rotation_sigma_deg: 0.0,
            distance_scaling: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn scale_factor(&self, distance: f64, tag_size: f64) -> f64 {
        1.0 + self.distance_scaling * distance / tag_size
    }
}

/// Viewing geometry for one synthetic tag sighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ObservationSetup {
    pub tag_id: u32,
    pub tag_size_meters: f64,
    pub observation_distance: f64,
    pub timestamp: f64,
}

/// Perturbs a true tag pose as a detector would. Deterministic in `noise.seed`.
pub fn synthetic_observation(true_tag_pose: &Pose, setup: &ObservationSetup, noise: &NoiseSpec) -> TagObservation {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let k = noise.scale_factor(setup.observation_distance, setup.tag_size_meters);
    let pos_sigma = (noise.position_sigma * k).max(0.0);
    let rot_sigma = (noise.rotation_sigma_deg * k).to_radians().max(0.0);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw3 = |sigma: f64| {
        let v = Vec3::new(
            std_normal.sample(&mut rng),
            std_normal.sample(&mut rng),
            std_normal.sample(&mut rng),
        );
        v * sigma
    };
    let dp = draw3(pos_sigma);
    let dr = draw3(rot_sigma);
    let noisy = Pose::new(
        true_tag_pose.position + dp,
        Quat::from_scaled_axis(dr) * true_tag_pose.unit_rotation(),
        true_tag_pose.scale,
    );
    TagObservation {
        tag_id: setup.tag_id,
        tag_pose: noisy,
        tag_size_meters: setup.tag_size_meters,
        observation_distance: setup.observation_distance,
        timestamp: setup.timestamp,
    }
}
