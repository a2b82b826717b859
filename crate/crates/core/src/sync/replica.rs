use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::record::{SpecialEvent, SyncRecord};
use crate::colocation::{transform_pose_between_users, AlignmentTransform, UserId};
use crate::geometry::Pose;

/// Records held for objects whose creation has not arrived yet.
pub const PENDING_CAPACITY: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReplicaObject {
    pub prefab_name: String,
    /// In the local user's world frame.
    pub pose: Pose,
    pub owner: Option<UserId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ApplyOutcome {
    Applied(Pose),
    Buffered,
    /// The local user owns the object; its own state is authoritative.
    IgnoredOwned,
    Destroyed,
}

/// One client's mirror of the shared scene.
#[derive(Debug, Clone)]
pub struct Replica {
    local_user: UserId,
    objects: BTreeMap<u32, ReplicaObject>,
    pending: VecDeque<(SyncRecord, AlignmentTransform)>,
    capacity: usize,
    evicted: u64,
}

impl Replica {
    pub fn new(local_user: UserId) -> Self {
        Self::with_capacity(local_user, PENDING_CAPACITY)
    }

    pub fn with_capacity(local_user: UserId, capacity: usize) -> Self {
        Self {
            local_user,
            objects: BTreeMap::new(),
            pending: VecDeque::new(),
            capacity,
            evicted: 0,
        }
    }

    pub fn local_user(&self) -> &UserId {
        &self.local_user
    }

    pub fn get(&self, object_id: u32) -> Option<&ReplicaObject> {
        self.objects.get(&object_id)
    }

    pub fn objects(&self) -> &BTreeMap<u32, ReplicaObject> {
        &self.objects
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn evicted(&self) -> u64 {
        self.evicted
    }

    pub fn is_owned_locally(&self, object_id: u32) -> bool {
        self.objects
            .get(&object_id)
            .is_some_and(|o| o.owner.as_ref() == Some(&self.local_user))
    }

    /// Adds or replaces an object, then applies any updates that were waiting for it.
    pub fn create_object(&mut self, object_id: u32, object: ReplicaObject) -> Vec<ApplyOutcome> {
        self.objects.insert(object_id, object);
        let (ready, rest): (VecDeque<_>, VecDeque<_>) =
            self.pending.drain(..).partition(|(r, _)| r.object_id == object_id);
        self.pending = rest;
        ready
            .into_iter()
            .map(|(r, a)| self.apply_remote_update(&r, &a))
            .collect()
    }

    pub fn set_owner(&mut self, object_id: u32, owner: Option<UserId>) {
        if let Some(o) = self.objects.get_mut(&object_id) {
            o.owner = owner;
        }
    }

    /// Local edit by the owner.
    pub fn set_local_pose(&mut self, object_id: u32, pose: Pose) -> bool {
        match self.objects.get_mut(&object_id) {
            Some(o) => {
                o.pose = pose;
                true
            }
            None => false,
        }
    }

    pub fn remove(&mut self, object_id: u32) -> Option<ReplicaObject> {
        self.objects.remove(&object_id)
    }

    /// Applies a forwarded record that was expressed in the sender's frame.
    pub fn apply_remote_update(&mut self, record: &SyncRecord, alignment: &AlignmentTransform) -> ApplyOutcome {
        let Some(obj) = self.objects.get_mut(&record.object_id) else {
            if self.pending.len() >= self.capacity {
                self.pending.pop_front();
                self.evicted += 1;
            }
            self.pending.push_back((*record, alignment.clone()));
            return ApplyOutcome::Buffered;
        };
        if obj.owner.as_ref() == Some(&self.local_user) {
            return ApplyOutcome::IgnoredOwned;
        }
        if record.has_event(SpecialEvent::Destroyed) {
            self.objects.remove(&record.object_id);
            return ApplyOutcome::Destroyed;
        }
        let pose = transform_pose_between_users(&record.pose(), alignment);
        obj.pose = pose;
        ApplyOutcome::Applied(pose)
    }
}
