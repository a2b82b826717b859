use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Frame, FrameType, ProtocolError};
use crate::colocation::{TagObservation, UserId};
use crate::geometry::{CameraModel, EnvironmentMesh, Pose, RigidTransform, Vec3};
use crate::mllm::RefinedResponse;
use crate::privacy::{Rect, RequestId};

/// Sender id used by the server on every message it emits.
pub const SERVER_SENDER: &str = "server";

/// Common header of every control message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Envelope {
    pub session_id: String,
    pub sender_id: UserId,
    /// Strictly increasing per sender.
    pub seq: u64,
    pub body: ControlBody,
}

impl Envelope {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("control messages always serialize")
    }

    pub fn to_frame(&self) -> Frame {
        Frame::control(self.to_json().into_bytes())
    }

    pub fn from_json(text: &str) -> Result<Self, ProtocolError> {
        serde_json::from_str(text).map_err(|e| ProtocolError::Json(e.to_string()))
    }

    pub fn from_frame(frame: &Frame) -> Result<Self, ProtocolError> {
        if frame.kind != FrameType::Control {
            return Err(ProtocolError::Json("not a control frame".into()));
        }
        let text = std::str::from_utf8(&frame.payload).map_err(|_| ProtocolError::Utf8)?;
        Self::from_json(text)
    }
}

/// A virtual object as seen by one recipient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SceneObjectView {
    pub object_id: u32,
    /// Unique within the session, e.g. `cube-3`.
    pub name: String,
    pub prefab_name: String,
    /// In the recipient's world frame.
    pub pose: Pose,
    pub extents: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<String>,
    pub owner: Option<UserId>,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum SceneEffect {
    Created { object: SceneObjectView },
    Animated { object: SceneObjectView, action: String },
    Answer { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
    /// The stage is not implemented and always reports zero.
    #[serde(default)]
    pub stubbed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum NoticeCode {
    OwnershipLost,
    OwnershipGranted,
    NotFound,
    NotRegistered,
    DegradedContext,
    ConsentTimeout,
    RequestFailed,
    SequenceViolation,
    KeywordReassigned,
    FramingError,
    InvalidMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum ControlBody {
    /// First message on a connection. A pseudo user names the host whose
    /// device it shares and never sends afterwards.
    Hello {
        #[serde(default)]
        keyword: Option<String>,
        #[serde(default)]
        pseudo_for: Option<UserId>,
        /// Collision geometry of the user's surroundings, own world frame.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        environment: Option<EnvironmentMesh>,
    },
    Welcome {
        user_id: UserId,
        keyword: String,
        keyword_reassigned: bool,
    },
    RegisterRequest {
        observation: Option<TagObservation>,
    },
    RegisterResult {
        success: bool,
        #[serde(default)]
        tag_pose: Option<Pose>,
        #[serde(default)]
        message: Option<String>,
        /// Server-side handler time, seconds.
        compute_time: f64,
        #[serde(default)]
        reference_user: Option<UserId>,
    },
    /// For each other registered user, the transform from that user's
    /// world frame into the recipient's.
    Alignments {
        transforms: BTreeMap<UserId, RigidTransform>,
    },
    SceneSnapshot {
        objects: Vec<SceneObjectView>,
    },
    UserText {
        text: String,
        #[serde(default)]
        frame_ref: Option<String>,
        #[serde(default)]
        camera: Option<CameraModel>,
        /// Base64 of the portable image container.
        #[serde(default)]
        frame_image: Option<String>,
    },
    RequestAccepted {
        request_id: RequestId,
        origin_seq: u64,
    },
    ConsentPrompt {
        request_id: RequestId,
        crop: Rect,
        detections: Vec<String>,
        timeout: f64,
        /// Base64 container of the cropped frame, for the user to inspect.
        #[serde(default)]
        crop_image: Option<String>,
    },
    ConsentReply {
        request_id: RequestId,
        approved: bool,
    },
    ResponseBroadcast {
        request_id: RequestId,
        requester: UserId,
        response: RefinedResponse,
        effect: SceneEffect,
    },
    Notice {
        code: NoticeCode,
        message: String,
        #[serde(default)]
        request_id: Option<RequestId>,
        #[serde(default)]
        object_id: Option<u32>,
        #[serde(default)]
        epoch: Option<u64>,
    },
    StageTimings {
        request_id: RequestId,
        rows: Vec<StageTiming>,
    },
    Claim {
        object_id: u32,
    },
    OwnershipChanged {
        object_id: u32,
        owner: Option<UserId>,
        previous_owner: Option<UserId>,
        epoch: u64,
    },
}

impl ControlBody {
    pub fn type_name(&self) -> &'static str {
        match self {
            ControlBody::Hello { .. } => "hello",
            ControlBody::Welcome { .. } => "welcome",
            ControlBody::RegisterRequest { .. } => "registerRequest",
            ControlBody::RegisterResult { .. } => "registerResult",
            ControlBody::Alignments { .. } => "alignments",
            ControlBody::SceneSnapshot { .. } => "sceneSnapshot",
            ControlBody::UserText { .. } => "userText",
            ControlBody::RequestAccepted { .. } => "requestAccepted",
            ControlBody::ConsentPrompt { .. } => "consentPrompt",
            ControlBody::ConsentReply { .. } => "consentReply",
            ControlBody::ResponseBroadcast { .. } => "responseBroadcast",
            ControlBody::Notice { .. } => "notice",
            ControlBody::StageTimings { .. } => "stageTimings",
            ControlBody::Claim { .. } => "claim",
            ControlBody::OwnershipChanged { .. } => "ownershipChanged",
        }
    }

    pub fn notice(code: NoticeCode, message: impl Into<String>) -> Self {
        ControlBody::Notice {
            code,
            message: message.into(),
            request_id: None,
            object_id: None,
            epoch: None,
        }
    }

    /// Whether clients may send this message to the server.
    pub fn is_client_message(&self) -> bool {
        matches!(
            self,
            ControlBody::Hello { .. }
                | ControlBody::RegisterRequest { .. }
                | ControlBody::UserText { .. }
                | ControlBody::ConsentReply { .. }
                | ControlBody::Claim { .. }
        )
    }
}

/// Stamps outgoing messages with one sender's increasing sequence numbers.
#[derive(Debug, Clone)]
pub struct Sequencer {
    session_id: String,
    sender: UserId,
    next: u64,
}

impl Sequencer {
    pub fn new(session_id: impl Into<String>, sender: UserId) -> Self {
        Self {
            session_id: session_id.into(),
            sender,
            next: 1,
        }
    }

    pub fn sender(&self) -> &UserId {
        &self.sender
    }

    pub fn stamp(&mut self, body: ControlBody) -> Envelope {
        let seq = self.next;
        self.next += 1;
        Envelope {
            session_id: self.session_id.clone(),
            sender_id: self.sender.clone(),
            seq,
            body,
        }
    }
}
