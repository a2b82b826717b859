//! Two-stage structured prompting: classification with crop negotiation,
//! then a category-specific refined response.

mod backend;
mod metrics;
mod prompt;
mod schema;
mod types;

pub use backend::{
    encode_png, timed_call, ExternalBackend, ExternalBackendConfig, MockBackend, MockReply, MockRuleSpec,
    MockScript, ModelBackend, RetryPolicy, TimedResponse,
};
pub use metrics::{
    classification_accuracy, evaluate_refined, mean_std, CategoryTrial, ExpectedPlacement, ModelEvaluation,
    ModelScores, PLACEMENT_BOX_SCALE,
};
pub use prompt::{
    build_initial_prompt, build_refined_prompt, build_reprompt, Prompt, Stage, NO_DETECTIONS_MARKER,
    TEMPLATE_VERSION,
};
pub use schema::{
    parse_initial_response, parse_refined_response, ANIMATION_CREATION_SCHEMA, INITIAL_SCHEMA,
    OBJECT_CREATION_SCHEMA, SCENE_QUERY_ANSWER_SCHEMA, SCHEMA_VERSION,
};
pub use types::{
    AnimationCreation, Category, InitialResponse, ObjectCreation, ParamValue, RefinedResponse, SceneQueryAnswer,
    Space, UserRequest,
};

use thiserror::Error;

/// Total tries per stage: the first call plus one re-prompt.
pub const MAX_SCHEMA_ATTEMPTS: u32 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MllmError {
    #[error("schema violation at {path:?}: {message}")]
    Schema { path: String, message: String },
    #[error("privacy violation: {0}")]
    PrivacyViolation(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend failed after {attempts} attempts: {message}")]
    Backend { attempts: u32, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("metric error: {0}")]
    Metric(String),
}

/// Result of checking one backend reply.
#[derive(Debug, Clone, PartialEq)]
pub enum ReplyCheck<T> {
    Accepted(T),
    /// Send this follow-up prompt.
    Retry(Prompt),
    /// Out of attempts.
    Failed(MllmError),
}

/// Parses `raw`; on a schema violation, either re-prompts or gives up once
/// [`MAX_SCHEMA_ATTEMPTS`] is reached.
pub fn check_reply<T>(prompt: &Prompt, raw: &str, parse: impl Fn(&str) -> Result<T, MllmError>) -> ReplyCheck<T> {
    match parse(raw) {
        Ok(v) => ReplyCheck::Accepted(v),
        Err(e @ MllmError::Schema { .. }) if prompt.attempt < MAX_SCHEMA_ATTEMPTS => {
            ReplyCheck::Retry(build_reprompt(prompt, &e))
        }
        Err(e) => ReplyCheck::Failed(e),
    }
}

/// Accepted value of one stage with its timing.
#[derive(Debug, Clone, PartialEq)]
pub struct StageResult<T> {
    pub value: T,
    /// Sum over all backend calls of the stage, seconds.
    pub generation_time: f64,
    pub attempts: u32,
}

/// Blocking driver for one stage: call, validate, re-prompt at most once.
pub fn run_stage<T>(
    backend: &dyn ModelBackend,
    prompt: Prompt,
    policy: &RetryPolicy,
    parse: impl Fn(&str) -> Result<T, MllmError>,
) -> Result<StageResult<T>, MllmError> {
    let mut prompt = prompt;
    let mut total = 0.0;
    loop {
        let resp = timed_call(backend, &prompt, policy)?;
        total += resp.generation_time;
        match check_reply(&prompt, &resp.raw, &parse) {
            ReplyCheck::Accepted(value) => {
                return Ok(StageResult {
                    value,
                    generation_time: total,
                    attempts: prompt.attempt,
                })
            }
            ReplyCheck::Retry(next) => prompt = next,
            ReplyCheck::Failed(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colocation::UserId;
    use crate::privacy::{FrameDescription, RequestId};

    fn request(text: &str) -> UserRequest {
        UserRequest {
            request_id: RequestId(1),
            user_id: UserId::from("u"),
            text: text.into(),
            fov_description: FrameDescription::default(),
            frame_ref: None,
            camera_at_capture: None,
            issued_at: 0.0,
        }
    }

    const SCRIPT: &str = r#"
[[rule]]
pattern = "flaky"
stage = "initial"
attempt = 1
response = '{"category":"objectCreation"}'

[[rule]]
pattern = "flaky"
stage = "initial"
prompt_pattern = "/CropArea|CropArea"
response = '{"category":"objectCreation","CropArea":"None"}'

[[rule]]
pattern = "broken"
response = 'nope'
"#;

    #[test]
    fn one_reprompt_recovers() {
        let m = MockBackend::from_toml(SCRIPT).unwrap();
        let r = run_stage(&m, build_initial_prompt(&request("flaky")), &RetryPolicy::none(), parse_initial_response)
            .unwrap();
        assert_eq!(r.attempts, 2);
        assert_eq!(r.value.category, Category::ObjectCreation);
    }

    #[test]
    fn persistent_violation_stops_after_two_attempts() {
        let m = MockBackend::from_toml(SCRIPT).unwrap();
        let p = build_initial_prompt(&request("broken"));
        let e = run_stage(&m, p.clone(), &RetryPolicy::none(), parse_initial_response).unwrap_err();
        assert!(matches!(e, MllmError::Schema { .. }));
        let ReplyCheck::Retry(p2) = check_reply(&p, "nope", parse_initial_response) else { panic!() };
        assert!(matches!(check_reply(&p2, "nope", parse_initial_response), ReplyCheck::Failed(_)));
    }

    #[test]
    fn request_validation() {
        assert!(request("hi").validate().is_ok());
        assert!(request("  ").validate().is_err());
        let mut r = request("hi");
        r.frame_ref = Some("f".into());
        assert!(r.validate().is_err());
    }
}
