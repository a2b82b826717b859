use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::MllmError;
use crate::colocation::UserId;
use crate::geometry::CameraModel;
use crate::privacy::{FrameDescription, Rect, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Category {
    ObjectCreation,
    AnimationCreation,
    SceneQuery,
    Other,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::ObjectCreation,
        Category::AnimationCreation,
        Category::SceneQuery,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::ObjectCreation => "objectCreation",
            Category::AnimationCreation => "animationCreation",
            Category::SceneQuery => "sceneQuery",
            Category::Other => "other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Coordinate space of a model-generated position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Space {
    World,
    Local,
    Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UserRequest {
    pub request_id: RequestId,
    pub user_id: UserId,
    pub text: String,
    pub fov_description: FrameDescription,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_at_capture: Option<CameraModel>,
    pub issued_at: f64,
}

impl UserRequest {
    pub fn validate(&self) -> Result<(), MllmError> {
        if self.text.trim().is_empty() {
            return Err(MllmError::InvalidRequest("empty request text".into()));
        }
        if self.frame_ref.is_some() != self.camera_at_capture.is_some() {
            return Err(MllmError::InvalidRequest(
                "frame reference and capture camera must be given together".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InitialResponse {
    pub category: Category,
    pub crop_area: Option<Rect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ObjectCreation {
    pub prefab_name: String,
    pub space: Space,
    pub position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_object: Option<String>,
}

/// Scalar animation argument, e.g. a color name or an angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl ParamValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Number(n) => Some(*n),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AnimationCreation {
    pub action_type: String,
    pub object_name: String,
    pub space: Space,
    pub position: [f64; 3],
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub parameters: BTreeMap<String, ParamValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SceneQueryAnswer {
    pub answer_text: String,
}

/// Refined-stage output; the variant is fixed by the initial category, so
/// the JSON form carries no tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RefinedResponse {
    ObjectCreation(ObjectCreation),
    AnimationCreation(AnimationCreation),
    SceneQueryAnswer(SceneQueryAnswer),
}

impl RefinedResponse {
    /// Category whose refined schema this variant belongs to. `other`
    /// requests share the answer schema with scene queries.
    pub fn category(&self) -> Category {
        match self {
            RefinedResponse::ObjectCreation(_) => Category::ObjectCreation,
            RefinedResponse::AnimationCreation(_) => Category::AnimationCreation,
            RefinedResponse::SceneQueryAnswer(_) => Category::SceneQuery,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("refined responses always serialize")
    }
}
