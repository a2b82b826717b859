use std::path::Path;
use std::time::{Duration, Instant};

use base64::Engine;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{MllmError, Prompt, Stage};
use crate::privacy::ImageBuffer;

/// A multimodal model endpoint.
pub trait ModelBackend: Send + Sync {
    fn identity(&self) -> &str;
    fn accepts_images(&self) -> bool;
    /// Blocking call; transport failures are [`MllmError::Transport`].
    fn generate(&self, prompt: &Prompt) -> Result<String, MllmError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRuleSpec {
    /// Regex searched in the user's request text.
    pub pattern: String,
    /// Regex searched in the full prompt text.
    #[serde(default)]
    pub prompt_pattern: Option<String>,
    #[serde(default)]
    pub stage: Option<Stage>,
    #[serde(default)]
    pub attempt: Option<u32>,
    /// Require (`true`) or forbid (`false`) an image attachment.
    #[serde(default)]
    pub with_image: Option<bool>,
    #[serde(default)]
    pub response: Option<String>,
    /// Simulated transport failure instead of a response.
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub delay_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_identity")]
    pub identity: String,
    #[serde(default = "default_true")]
    pub accepts_images: bool,
    #[serde(default, rename = "rule")]
    pub rules: Vec<MockRuleSpec>,
}

fn default_version() -> u32 {
    1
}

fn default_identity() -> String {
    "mock".into()
}

fn default_true() -> bool {
    true
}

struct MockRule {
    spec: MockRuleSpec,
    text_re: Regex,
    prompt_re: Option<Regex>,
}

/// What the mock would answer, and how long it would take.
#[derive(Debug, Clone, PartialEq)]
pub struct MockReply {
    pub result: Result<String, MllmError>,
    pub delay: Duration,
}

/// Scripted backend. Rules are tried in file order; the first match wins.
///
/// ```toml
/// version = 1
/// identity = "mock"
/// accepts_images = true
///
/// [[rule]]
/// pattern = "(?i)cube on the keyboard"
/// stage = "initial"
/// response = '{"category":"objectCreation","CropArea":"None"}'
/// delay_ms = 5
/// ```
pub struct MockBackend {
    identity: String,
    accepts_images: bool,
    rules: Vec<MockRule>,
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockBackend")
            .field("identity", &self.identity)
            .field("rules", &self.rules.len())
            .finish()
    }
}

impl MockBackend {
    pub fn from_script(script: MockScript) -> Result<Self, MllmError> {
        if script.version != 1 {
            return Err(MllmError::Config(format!("unsupported mock script version {}", script.version)));
        }
        let re = |s: &str| Regex::new(s).map_err(|e| MllmError::Config(format!("bad pattern {s:?}: {e}")));
        let rules = script
            .rules
            .into_iter()
            .map(|spec| {
                if spec.response.is_some() == spec.error.is_some() {
                    return Err(MllmError::Config(format!(
                        "rule {:?} needs exactly one of `response` or `error`",
                        spec.pattern
                    )));
                }
                Ok(MockRule {
                    text_re: re(&spec.pattern)?,
                    prompt_re: spec.prompt_pattern.as_deref().map(re).transpose()?,
                    spec,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            identity: script.identity,
            accepts_images: script.accepts_images,
            rules,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, MllmError> {
        let script: MockScript = toml::from_str(text).map_err(|e| MllmError::Config(e.to_string()))?;
        Self::from_script(script)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MllmError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MllmError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The scripted reply without sleeping; used by the virtual clock.
    pub fn respond(&self, prompt: &Prompt) -> MockReply {
        let hit = self.rules.iter().find(|r| {
            let s = &r.spec;
            r.text_re.is_match(&prompt.user_text)
                && r.prompt_re.as_ref().is_none_or(|re| re.is_match(&prompt.text))
                && s.stage.is_none_or(|st| st == prompt.stage)
                && s.attempt.is_none_or(|a| a == prompt.attempt)
                && s.with_image.is_none_or(|w| w == prompt.attachment.is_some())
        });
        match hit {
            Some(r) => MockReply {
                result: match (&r.spec.response, &r.spec.error) {
                    (Some(resp), _) => Ok(resp.clone()),
                    (None, Some(err)) => Err(MllmError::Transport(err.clone())),
                    (None, None) => unreachable!("checked at load"),
                },
                delay: Duration::from_millis(r.spec.delay_ms),
            },
            None => MockReply {
                result: Err(MllmError::Transport(format!(
                    "no mock rule for {} prompt of {:?}",
                    prompt.stage.as_str(),
                    prompt.user_text
                ))),
                delay: Duration::ZERO,
            },
        }
    }
}

impl ModelBackend for MockBackend {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn accepts_images(&self) -> bool {
        self.accepts_images
    }

    fn generate(&self, prompt: &Prompt) -> Result<String, MllmError> {
        let reply = self.respond(prompt);
        if !reply.delay.is_zero() {
            std::thread::sleep(reply.delay);
        }
        reply.result
    }
}

/// OpenAI-compatible chat-completions endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExternalBackendConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub accepts_images: bool,
    pub timeout_secs: u64,
}

impl Default for ExternalBackendConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            api_key_env: "SHAREDSPACE_API_KEY".into(),
            accepts_images: true,
            timeout_secs: 120,
        }
    }
}

pub struct ExternalBackend {
    config: ExternalBackendConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl ExternalBackend {
    pub fn new(config: ExternalBackendConfig) -> Result<Self, MllmError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| MllmError::Config(format!("environment variable {} is not set", config.api_key_env)))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Ok(Self { config, api_key, agent })
    }

    fn request_body(&self, prompt: &Prompt) -> Result<Value, MllmError> {
        let mut content = vec![json!({"type": "text", "text": prompt.text})];
        if let Some(crop) = &prompt.attachment {
            let png = encode_png(crop.image())?;
            let url = format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(png));
            content.push(json!({"type": "image_url", "image_url": {"url": url}}));
        }
        Ok(json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": content}],
            "response_format": {"type": "json_object"},
        }))
    }
}

impl ModelBackend for ExternalBackend {
    fn identity(&self) -> &str {
        &self.config.model
    }

    fn accepts_images(&self) -> bool {
        self.config.accepts_images
    }

    fn generate(&self, prompt: &Prompt) -> Result<String, MllmError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = self.request_body(prompt)?;
        let mut resp = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| MllmError::Transport(e.to_string()))?;
        let v: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| MllmError::Transport(e.to_string()))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| MllmError::Transport("reply has no message content".into()))
    }
}

/// Lossless PNG of an image buffer with 1 to 4 channels.
pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>, MllmError> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        2 => png::ColorType::GrayscaleAlpha,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(MllmError::Config(format!("cannot encode {c}-channel image"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width, img.height);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| MllmError::Config(e.to_string()))?;
        w.write_image_data(&img.data).map_err(|e| MllmError::Config(e.to_string()))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RetryPolicy {
    /// Waits before the 2nd, 3rd, ... attempt.
    pub backoff: Vec<Duration>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            backoff: vec![Duration::from_secs(1), Duration::from_secs(2)],
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { backoff: Vec::new() }
    }

    pub fn max_attempts(&self) -> u32 {
        self.backoff.len() as u32 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedResponse {
    pub raw: String,
    /// Duration of the successful call alone, seconds.
    pub generation_time: f64,
    pub attempts: u32,
    pub started: Instant,
    pub finished: Instant,
}

/// Calls the backend, retrying transport failures per `policy`.
pub fn timed_call(backend: &dyn ModelBackend, prompt: &Prompt, policy: &RetryPolicy) -> Result<TimedResponse, MllmError> {
    let mut last = String::new();
    for attempt in 1..=policy.max_attempts() {
        if attempt > 1 {
            std::thread::sleep(policy.backoff[attempt as usize - 2]);
        }
        let started = Instant::now();
        match backend.generate(prompt) {
            Ok(raw) => {
                let finished = Instant::now();
                return Ok(TimedResponse {
                    raw,
                    generation_time: (finished - started).as_secs_f64(),
                    attempts: attempt,
                    started,
                    finished,
                });
            }
            Err(MllmError::Transport(msg)) => {
                tracing::warn!(backend = backend.identity(), attempt, "backend call failed: {msg}");
                last = msg;
            }
            Err(other) => return Err(other),
        }
    }
    Err(MllmError::Backend {
        attempts: policy.max_attempts(),
        message: last,
    })
}
