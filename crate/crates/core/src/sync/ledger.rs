use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SyncError;
use crate::colocation::UserId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Ownership {
    pub owner: Option<UserId>,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClaimOutcome {
    pub granted: bool,
    pub previous_owner: Option<UserId>,
    pub epoch: u64,
}

impl ClaimOutcome {
    /// True when ownership actually moved away from another user.
    pub fn is_transfer(&self, claimant: &UserId) -> bool {
        self.previous_owner.as_ref().is_some_and(|p| p != claimant)
    }
}

/// Which user streams each interactable object. Only mutated from the
/// server's serialized event sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnershipLedger {
    entries: BTreeMap<u32, Ownership>,
}

impl OwnershipLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an unowned object at epoch 0. Existing entries are left alone.
    pub fn insert_unowned(&mut self, object_id: u32) {
        self.entries.entry(object_id).or_insert(Ownership {
            owner: None,
            epoch: 0,
        });
    }

    /// Adds an object owned by its creator (epoch 1).
    pub fn insert_owned(&mut self, object_id: u32, owner: UserId) {
        self.entries.insert(
            object_id,
            Ownership {
                owner: Some(owner),
                epoch: 1,
            },
        );
    }

    pub fn remove(&mut self, object_id: u32) -> Option<Ownership> {
        self.entries.remove(&object_id)
    }

    pub fn get(&self, object_id: u32) -> Option<&Ownership> {
        self.entries.get(&object_id)
    }

    pub fn owner_of(&self, object_id: u32) -> Option<&UserId> {
        self.entries.get(&object_id).and_then(|o| o.owner.as_ref())
    }

    pub fn is_owner(&self, user: &UserId, object_id: u32) -> bool {
        self.owner_of(object_id) == Some(user)
    }

    pub fn owned_by<'a>(&'a self, user: &'a UserId) -> impl Iterator<Item = u32> + 'a {
        self.entries
            .iter()
            .filter(move |(_, o)| o.owner.as_ref() == Some(user))
            .map(|(id, _)| *id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &Ownership)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Grants `user` ownership. Reclaiming an object you already own keeps the epoch.
    pub fn claim(&mut self, user: &UserId, object_id: u32) -> Result<ClaimOutcome, SyncError> {
        let entry = self
            .entries
            .get_mut(&object_id)
            .ok_or(SyncError::NotFound(object_id))?;
        let previous_owner = entry.owner.clone();
        if previous_owner.as_ref() != Some(user) {
            entry.owner = Some(user.clone());
            entry.epoch += 1;
        }
        Ok(ClaimOutcome {
            granted: true,
            previous_owner,
            epoch: entry.epoch,
        })
    }

    /// Drops every object owned by `user`, bumping each epoch. Returns the
    /// affected `(object, new epoch)` pairs.
    pub fn release_all(&mut self, user: &UserId) -> Vec<(u32, u64)> {
        let mut released = Vec::new();
        for (id, entry) in self.entries.iter_mut() {
            if entry.owner.as_ref() == Some(user) {
                entry.owner = None;
                entry.epoch += 1;
                released.push((*id, entry.epoch));
            }
        }
        released
    }
}

pub fn claim_ownership(
    ledger: &mut OwnershipLedger,
    user: &UserId,
    object_id: u32,
) -> Result<ClaimOutcome, SyncError> {
    ledger.claim(user, object_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_claim_on_unowned() {
        let mut l = OwnershipLedger::new();
        l.insert_unowned(5);
        let out = l.claim(&"a".into(), 5).unwrap();
        assert_eq!(
            out,
            ClaimOutcome {
                granted: true,
                previous_owner: None,
                epoch: 1
            }
        );
    }

    #[test]
    fn transfer_bumps_epoch_and_reports_previous() {
        let mut l = OwnershipLedger::new();
        l.insert_unowned(5);
        l.claim(&"a".into(), 5).unwrap();
        let out = l.claim(&"b".into(), 5).unwrap();
        assert_eq!(out.previous_owner, Some("a".into()));
        assert_eq!(out.epoch, 2);
        assert!(out.is_transfer(&"b".into()));
        assert!(l.is_owner(&"b".into(), 5));
    }

    #[test]
    fn reclaim_is_noop() {
        let mut l = OwnershipLedger::new();
        l.insert_owned(5, "a".into());
        let out = l.claim(&"a".into(), 5).unwrap();
        assert_eq!(out.previous_owner, Some("a".into()));
        assert_eq!(out.epoch, 1);
        assert!(!out.is_transfer(&"a".into()));
    }

    #[test]
    fn unknown_object() {
        let mut l = OwnershipLedger::new();
        assert_eq!(l.claim(&"a".into(), 1), Err(SyncError::NotFound(1)));
    }

    #[test]
    fn release_all_on_disconnect() {
        let mut l = OwnershipLedger::new();
        l.insert_owned(1, "a".into());
        l.insert_owned(2, "b".into());
        l.insert_owned(3, "a".into());
        assert_eq!(l.release_all(&"a".into()), vec![(1, 2), (3, 2)]);
        assert_eq!(l.owner_of(1), None);
        assert_eq!(l.owner_of(2), Some(&"b".into()));
        assert_eq!(l.owned_by(&"a".into()).count(), 0);
    }
}
