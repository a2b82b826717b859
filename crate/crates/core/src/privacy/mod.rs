//! Frame privacy: textual field-of-view descriptions, cropping, the
//! consent gate and audit metrics.

mod audit;
mod consent;
mod corpus;
mod detection;
mod detector;
mod image;

pub use audit::{
    crop_metrics, detections_in_crop, privacy_audit, summarize_audits, AuditSummary, CropMetrics, CropTrial,
    LevelPresence, PrivacyLevel, PrivacyPolicy, CROP_IOU_THRESHOLD,
};
pub use consent::{
    ApprovedCrop, ConsentDecision, ConsentRegistry, PendingConsent, RequestId, DEFAULT_CONSENT_TIMEOUT,
};
pub use corpus::PrivacyCorpus;
pub use detection::{describe_frame, parse_description_line, BBox, Detection, FrameDescription};
pub use detector::{Detector, ExternalProcessDetector, MockDetector, ScriptedFrame};
pub use image::{crop_frame, iou, ImageBuffer, Rect, IMAGE_HEADER_LEN, IMAGE_MAGIC};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("crop rectangle does not intersect the frame")]
    EmptyCrop,
    #[error("consent error: {0}")]
    Consent(String),
    #[error("privacy violation: {0}")]
    Violation(String),
    #[error("detector error: {0}")]
    Detector(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("io error: {0}")]
    Io(String),
}
