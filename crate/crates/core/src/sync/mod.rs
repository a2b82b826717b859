//! Replication of interactable objects: the 48-byte record, change-driven
//! send policy, ownership ledger and client-side replica.

mod conformance;
mod ledger;
mod policy;
mod record;
mod replica;

pub use conformance::{random_record, run_conformance, Check, ConformanceReport, GoldenFrame, GoldenRecord, GoldenSet};
pub use ledger::{claim_ownership, ClaimOutcome, Ownership, OwnershipLedger};
pub use policy::{should_sync, ChangePolicy, TIME_EPSILON};
pub use record::{
    decode_batch, decode_record, encode_batch, encode_record, stage_events, SpecialEvent, SyncRecord,
    EVENT_DEFINED_MASK, EVENT_DESTROYED, EVENT_GRABBED, EVENT_RELEASED, RECORD_SIZE, RECORD_UNIT_TOLERANCE,
};
pub use replica::{ApplyOutcome, Replica, ReplicaObject, PENDING_CAPACITY};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("sync payload of {0} bytes is not a positive multiple of 48")]
    Framing(usize),
    #[error("object {0} not found")]
    NotFound(u32),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}
