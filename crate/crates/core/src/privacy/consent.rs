use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ImageBuffer, PrivacyError};

/// Default time a user has to answer a crop prompt, seconds.
pub const DEFAULT_CONSENT_TIMEOUT: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "req-{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConsentDecision {
    pub request_id: RequestId,
    pub approved: bool,
    pub decided_at: f64,
    pub shown_detections: Vec<String>,
    /// Rejection produced by the deadline rather than by the user.
    #[serde(default)]
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PendingConsent {
    pub request_id: RequestId,
    pub issued_at: f64,
    pub deadline: f64,
    pub shown_detections: Vec<String>,
}

/// Per-request consent state. Exactly one decision per prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsentRegistry {
    timeout: f64,
    pending: BTreeMap<RequestId, PendingConsent>,
    decisions: BTreeMap<RequestId, ConsentDecision>,
}

impl Default for ConsentRegistry {
    fn default() -> Self {
        Self::new(DEFAULT_CONSENT_TIMEOUT)
    }
}

impl ConsentRegistry {
    pub fn new(timeout: f64) -> Self {
        Self {
            timeout,
            pending: BTreeMap::new(),
            decisions: BTreeMap::new(),
        }
    }

    pub fn timeout(&self) -> f64 {
        self.timeout
    }

    /// Opens a prompt for `request_id` listing the labels visible inside the crop.
    pub fn request_consent(
        &mut self,
        request_id: RequestId,
        labels_inside_crop: Vec<String>,
        now: f64,
    ) -> Result<PendingConsent, PrivacyError> {
        if self.pending.contains_key(&request_id) || self.decisions.contains_key(&request_id) {
            return Err(PrivacyError::Consent(format!("{request_id} already has a consent prompt")));
        }
        let p = PendingConsent {
            request_id,
            issued_at: now,
            deadline: now + self.timeout,
            shown_detections: labels_inside_crop,
        };
        self.pending.insert(request_id, p.clone());
        Ok(p)
    }

    pub fn decide(&mut self, request_id: RequestId, approved: bool, now: f64) -> Result<ConsentDecision, PrivacyError> {
        let p = self
            .pending
            .remove(&request_id)
            .ok_or_else(|| PrivacyError::Consent(format!("no pending prompt for {request_id}")))?;
        // A reply after the deadline counts as a timeout.
        let timed_out = now > p.deadline;
        let d = ConsentDecision {
            request_id,
            approved: approved && !timed_out,
            decided_at: now,
            shown_detections: p.shown_detections,
            timed_out,
        };
        self.decisions.insert(request_id, d.clone());
        Ok(d)
    }

    /// Rejects every prompt whose deadline has passed.
    pub fn expire(&mut self, now: f64) -> Vec<ConsentDecision> {
        let due: Vec<RequestId> = self
            .pending
            .values()
            .filter(|p| p.deadline <= now)
            .map(|p| p.request_id)
            .collect();
        due.into_iter()
            .map(|id| {
                let p = self.pending.remove(&id).expect("listed above");
                let d = ConsentDecision {
                    request_id: id,
                    approved: false,
                    decided_at: now,
                    shown_detections: p.shown_detections,
                    timed_out: true,
                };
                self.decisions.insert(id, d.clone());
                d
            })
            .collect()
    }

    pub fn next_deadline(&self) -> Option<f64> {
        self.pending.values().map(|p| p.deadline).reduce(f64::min)
    }

    pub fn is_pending(&self, request_id: RequestId) -> bool {
        self.pending.contains_key(&request_id)
    }

    pub fn decision(&self, request_id: RequestId) -> Option<&ConsentDecision> {
        self.decisions.get(&request_id)
    }

    pub fn decisions(&self) -> impl Iterator<Item = &ConsentDecision> {
        self.decisions.values()
    }
}

/// A cropped frame the user explicitly approved for upload. This is the
/// only type an image attachment can take on its way to a model backend.
#[derive(Debug, Clone, PartialEq)]
pub struct ApprovedCrop {
    request_id: RequestId,
    image: ImageBuffer,
}

impl ApprovedCrop {
    pub fn new(request_id: RequestId, image: ImageBuffer, decision: &ConsentDecision) -> Result<Self, PrivacyError> {
        if decision.request_id != request_id {
            return Err(PrivacyError::Violation(format!(
                "consent for {} does not cover {request_id}",
                decision.request_id
            )));
        }
        if !decision.approved {
            return Err(PrivacyError::Violation(format!("{request_id} was not approved")));
        }
        Ok(Self { request_id, image })
    }

    pub fn request_id(&self) -> RequestId {
        self.request_id
    }

    pub fn image(&self) -> &ImageBuffer {
        &self.image
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn approve_path() {
        let mut reg = ConsentRegistry::default();
        reg.request_consent(RequestId(1), vec!["book".into()], 0.0).unwrap();
        let d = reg.decide(RequestId(1), true, 2.0).unwrap();
        assert!(d.approved && !d.timed_out);
        let img = ImageBuffer::pattern(4, 4, 3, 0);
        assert!(ApprovedCrop::new(RequestId(1), img, &d).is_ok());
    }

    #[test]
    fn reject_path_blocks_upload() {
        let mut reg = ConsentRegistry::default();
        reg.request_consent(RequestId(1), vec![], 0.0).unwrap();
        let d = reg.decide(RequestId(1), false, 1.0).unwrap();
        assert!(!d.approved);
        assert!(matches!(
            ApprovedCrop::new(RequestId(1), ImageBuffer::pattern(1, 1, 1, 0), &d),
            Err(PrivacyError::Violation(_))
        ));
    }

    #[test]
    fn timeout_rejects() {
        let mut reg = ConsentRegistry::default();
        reg.request_consent(RequestId(3), vec![], 10.0).unwrap();
        assert_eq!(reg.next_deadline(), Some(70.0));
        assert!(reg.expire(69.9).is_empty());
        let out = reg.expire(70.0);
        assert_eq!(out.len(), 1);
        assert!(!out[0].approved && out[0].timed_out);
        assert!(reg.decide(RequestId(3), true, 71.0).is_err());
    }

    #[test]
    fn late_approval_counts_as_timeout() {
        let mut reg = ConsentRegistry::new(5.0);
        reg.request_consent(RequestId(4), vec![], 0.0).unwrap();
        let d = reg.decide(RequestId(4), true, 6.0).unwrap();
        assert!(!d.approved && d.timed_out);
    }

    #[test]
    fn one_decision_per_prompt() {
        let mut reg = ConsentRegistry::default();
        reg.request_consent(RequestId(1), vec![], 0.0).unwrap();
        reg.decide(RequestId(1), true, 1.0).unwrap();
        assert!(reg.decide(RequestId(1), false, 2.0).is_err());
        assert!(reg.request_consent(RequestId(1), vec![], 3.0).is_err());
        assert!(reg.decide(RequestId(9), true, 1.0).is_err());
    }

    #[test]
    fn approval_for_other_request_is_rejected() {
        let mut reg = ConsentRegistry::default();
        reg.request_consent(RequestId(1), vec![], 0.0).unwrap();
        let d = reg.decide(RequestId(1), true, 1.0).unwrap();
        assert!(ApprovedCrop::new(RequestId(2), ImageBuffer::pattern(1, 1, 1, 0), &d).is_err());
    }
}
