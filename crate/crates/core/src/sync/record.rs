use serde::{Deserialize, Serialize};

use super::SyncError;
use crate::geometry::{Pose, Quat, Vec3};
use nalgebra::Quaternion;

/// Encoded size of one record.
pub const RECORD_SIZE: usize = 48;

/// Bit 0.
pub const EVENT_GRABBED: u32 = 1 << 0;
/// Bit 1.
pub const EVENT_RELEASED: u32 = 1 << 1;
/// Bit 2.
pub const EVENT_DESTROYED: u32 = 1 << 2;
pub const EVENT_DEFINED_MASK: u32 = EVENT_GRABBED | EVENT_RELEASED | EVENT_DESTROYED;

/// Tolerance on the float32 quaternion norm.
pub const RECORD_UNIT_TOLERANCE: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SpecialEvent {
    Grabbed,
    Released,
    Destroyed,
}

impl SpecialEvent {
    pub fn bit(self) -> u32 {
        match self {
            SpecialEvent::Grabbed => EVENT_GRABBED,
            SpecialEvent::Released => EVENT_RELEASED,
            SpecialEvent::Destroyed => EVENT_DESTROYED,
        }
    }
}

/// Replication unit for one interactable object.
///
/// Wire layout, little-endian:
///
/// ```text
/// offset  size  field
///      0     4  object id (u32)
///      4    12  position x, y, z (f32)
///     16    16  rotation x, y, z, w (f32)
///     32    12  scale x, y, z (f32)
///     44     4  event bits (u32)
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SyncRecord {
    pub object_id: u32,
    pub position: [f32; 3],
    pub rotation: [f32; 4],
    pub scale: [f32; 3],
    pub events: u32,
}

impl SyncRecord {
    pub fn from_pose(object_id: u32, pose: &Pose, events: u32) -> Self {
        let q = pose.unit_rotation();
        let c = q.coords;
        Self {
            object_id,
            position: [pose.position.x as f32, pose.position.y as f32, pose.position.z as f32],
            rotation: [c.x as f32, c.y as f32, c.z as f32, c.w as f32],
            scale: [pose.scale.x as f32, pose.scale.y as f32, pose.scale.z as f32],
            events,
        }
    }

    pub fn pose(&self) -> Pose {
        let [x, y, z, w] = self.rotation.map(f64::from);
        let q = Quat::from_quaternion(Quaternion::new(w, x, y, z));
        Pose::new(
            Vec3::from(self.position.map(f64::from)),
            q,
            Vec3::from(self.scale.map(f64::from)),
        )
    }

    pub fn validate(&self) -> Result<(), SyncError> {
        let finite = self
            .position
            .iter()
            .chain(&self.rotation)
            .chain(&self.scale)
            .all(|v| v.is_finite());
        if !finite {
            return Err(SyncError::InvalidRecord("non-finite component".into()));
        }
        let norm = self.rotation.iter().map(|v| v * v).sum::<f32>().sqrt();
        if (norm - 1.0).abs() > RECORD_UNIT_TOLERANCE {
            return Err(SyncError::InvalidRecord(format!("rotation norm {norm}")));
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(SyncError::InvalidRecord("scale must be positive".into()));
        }
        if self.events & !EVENT_DEFINED_MASK != 0 {
            return Err(SyncError::InvalidRecord("reserved event bits set".into()));
        }
        Ok(())
    }

    pub fn has_event(&self, event: SpecialEvent) -> bool {
        self.events & event.bit() != 0
    }

    pub fn encode(&self) -> [u8; RECORD_SIZE] {
        let mut out = [0u8; RECORD_SIZE];
        out[0..4].copy_from_slice(&self.object_id.to_le_bytes());
        let floats = self.position.iter().chain(&self.rotation).chain(&self.scale);
        for (i, f) in floats.enumerate() {
            let at = 4 + 4 * i;
            out[at..at + 4].copy_from_slice(&f.to_le_bytes());
        }
        out[44..48].copy_from_slice(&self.events.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SyncError> {
        if bytes.len() != RECORD_SIZE {
            return Err(SyncError::Framing(bytes.len()));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let f32_at = |at: usize| f32::from_bits(u32_at(at));
        let floats: Vec<f32> = (0..10).map(|i| f32_at(4 + 4 * i)).collect();
        Ok(Self {
            object_id: u32_at(0),
            position: [floats[0], floats[1], floats[2]],
            rotation: [floats[3], floats[4], floats[5], floats[6]],
            scale: [floats[7], floats[8], floats[9]],
            events: u32_at(44),
        })
    }
}

pub fn encode_record(record: &SyncRecord) -> [u8; RECORD_SIZE] {
    record.encode()
}

pub fn decode_record(bytes: &[u8]) -> Result<SyncRecord, SyncError> {
    SyncRecord::decode(bytes)
}

/// Concatenated records, exactly `48 * n` bytes.
pub fn encode_batch(records: &[SyncRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * RECORD_SIZE);
    for r in records {
        out.extend_from_slice(&r.encode());
    }
    out
}

pub fn decode_batch(bytes: &[u8]) -> Result<Vec<SyncRecord>, SyncError> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD_SIZE) {
        return Err(SyncError::Framing(bytes.len()));
    }
    bytes.chunks_exact(RECORD_SIZE).map(SyncRecord::decode).collect()
}

/// Defined events carried by a record. Reserved bits are logged and ignored.
pub fn stage_events(record: &SyncRecord) -> Vec<SpecialEvent> {
    if record.events & !EVENT_DEFINED_MASK != 0 {
        tracing::warn!(
            object_id = record.object_id,
            events = record.events,
            "sync record has reserved event bits set"
        );
    }
    [SpecialEvent::Grabbed, SpecialEvent::Released, SpecialEvent::Destroyed]
        .into_iter()
        .filter(|e| record.has_event(*e))
        .collect()
}
