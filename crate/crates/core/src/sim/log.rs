//! Line-delimited event logs and deterministic replay.
//!
//! A log holds everything the server consumed, so feeding its inputs to a
//! fresh session must land on the recorded final state.

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::geometry::EnvironmentMesh;
use crate::mllm::MllmError;
use crate::privacy::{Detection, PrivacyError, RequestId};
use crate::protocol::{Frame, FrameType};
use crate::server::{ConnId, Input, Session, SessionConfig, SessionStats};

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Direction {
    Uplink,
    Downlink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "input", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum LoggedInput {
    Connected {
        conn: ConnId,
    },
    Frame {
        conn: ConnId,
        frame_type: u8,
        /// Base64.
        payload: String,
    },
    Disconnected {
        conn: ConnId,
    },
    BackendCompleted {
        request_id: RequestId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        raw: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    DetectionCompleted {
        request_id: RequestId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detections: Option<Vec<Detection>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Tick,
}

impl LoggedInput {
    pub fn from_input(input: &Input) -> Self {
        match input {
            Input::Connected { conn } => Self::Connected { conn: *conn },
            Input::Frame { conn, frame } => Self::Frame {
                conn: *conn,
                frame_type: frame.kind as u8,
                payload: base64::engine::general_purpose::STANDARD.encode(&frame.payload),
            },
            Input::Disconnected { conn } => Self::Disconnected { conn: *conn },
            Input::BackendCompleted { request_id, result } => Self::BackendCompleted {
                request_id: *request_id,
                raw: result.as_ref().ok().cloned(),
                error: result.as_ref().err().map(|e| e.to_string()),
            },
            Input::DetectionCompleted { request_id, result } => Self::DetectionCompleted {
                request_id: *request_id,
                detections: result.as_ref().ok().cloned(),
                error: result.as_ref().err().map(|e| e.to_string()),
            },
            Input::Tick => Self::Tick,
        }
    }

    pub fn to_input(&self) -> Result<Input, SimError> {
        Ok(match self {
            Self::Connected { conn } => Input::Connected { conn: *conn },
            Self::Frame {
                conn,
                frame_type,
                payload,
            } => Input::Frame {
                conn: *conn,
                frame: Frame {
                    kind: FrameType::from_byte(*frame_type).map_err(|e| SimError::Log(e.to_string()))?,
                    payload: base64::engine::general_purpose::STANDARD
                        .decode(payload)
                        .map_err(|e| SimError::Log(e.to_string()))?,
                },
            },
            Self::Disconnected { conn } => Input::Disconnected { conn: *conn },
            Self::BackendCompleted { request_id, raw, error } => Input::BackendCompleted {
                request_id: *request_id,
                result: match (raw, error) {
                    (Some(r), _) => Ok(r.clone()),
                    (None, e) => Err(MllmError::Transport(e.clone().unwrap_or_default())),
                },
            },
            Self::DetectionCompleted {
                request_id,
                detections,
                error,
            } => Input::DetectionCompleted {
                request_id: *request_id,
                result: match (detections, error) {
                    (Some(d), _) => Ok(d.clone()),
                    (None, e) => Err(PrivacyError::Detector(e.clone().unwrap_or_default())),
                },
            },
            Self::Tick => Input::Tick,
        })
    }
}

/// Session settings as recorded, including the fallback mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LoggedConfig {
    pub session: SessionConfig,
    #[serde(default)]
    pub environment: Option<String>,
}

impl LoggedConfig {
    pub fn from_config(cfg: &SessionConfig) -> Self {
        Self {
            session: cfg.clone(),
            environment: cfg.environment.as_ref().map(|m| m.to_text()),
        }
    }

    pub fn to_config(&self) -> Result<SessionConfig, SimError> {
        let mut cfg = self.session.clone();
        cfg.environment = self
            .environment
            .as_deref()
            .map(EnvironmentMesh::parse)
            .transpose()
            .map_err(|e| SimError::Log(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum LogEvent {
    Header {
        version: u32,
        scenario: String,
        seed: u64,
        config: LoggedConfig,
        /// Client id per connection, as `[conn, id]` pairs.
        clients: Vec<(ConnId, String)>,
    },
    /// Something the server consumed, at virtual time `t` nanoseconds.
    Input { t: u64, input: LoggedInput },
    /// A frame crossing a link.
    Deliver {
        t: u64,
        conn: ConnId,
        dir: Direction,
        frame_type: u8,
        wire_bytes: usize,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        records: Vec<u32>,
    },
    /// A prompt handed to the model backend.
    Upload {
        t: u64,
        request_id: RequestId,
        stage: String,
        attempt: u32,
        with_image: bool,
    },
    Final {
        t: u64,
        digest: String,
        stats: SessionStats,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<LogEvent>,
}

impl EventLog {
    pub fn push(&mut self, e: LogEvent) {
        self.events.push(e);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("log events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, SimError> {
        let events = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| SimError::Log(format!("line {}: {e}", i + 1))))
            .collect::<Result<_, _>>()?;
        Ok(Self { events })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Log(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn final_digest(&self) -> Option<&str> {
        self.events.iter().rev().find_map(|e| match e {
            LogEvent::Final { digest, .. } => Some(digest.as_str()),
            _ => None,
        })
    }

    pub fn duration_ns(&self) -> u64 {
        self.events
            .iter()
            .filter_map(|e| match e {
                LogEvent::Input { t, .. }
                | LogEvent::Deliver { t, .. }
                | LogEvent::Upload { t, .. }
                | LogEvent::Final { t, .. } => Some(*t),
                LogEvent::Header { .. } => None,
            })
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReplayOutcome {
    pub inputs: usize,
    pub digest: String,
    pub expected: Option<String>,
    pub stats: SessionStats,
}

impl ReplayOutcome {
    pub fn matches(&self) -> bool {
        self.expected.as_deref() == Some(self.digest.as_str())
    }
}

pub fn ns_to_secs(t: u64) -> f64 {
    t as f64 / 1e9
}

pub fn secs_to_ns(s: f64) -> u64 {
    (s * 1e9).round().max(0.0) as u64
}

/// Re-executes the logged server inputs against a fresh session.
pub fn replay(log: &EventLog) -> Result<(Session, ReplayOutcome), SimError> {
    let Some(LogEvent::Header { version, config, .. }) = log.events.first() else {
        return Err(SimError::Log("log does not start with a header".into()));
    };
    if *version != LOG_VERSION {
        return Err(SimError::Log(format!("unsupported log version {version}")));
    }
    let mut session = Session::new(config.to_config()?);
    let mut inputs = 0;
    for e in &log.events {
        if let LogEvent::Input { t, input } = e {
            session.handle(ns_to_secs(*t), input.to_input()?);
            inputs += 1;
        }
    }
    let outcome = ReplayOutcome {
        inputs,
        digest: session.state().digest(),
        expected: log.final_digest().map(str::to_owned),
        stats: session.stats().clone(),
    };
    Ok((session, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colocation::UserId;
    use crate::protocol::{ControlBody, Sequencer};

    #[test]
    fn inputs_round_trip_through_json() {
        let mut s = Sequencer::new("s", UserId::from("a"));
        let inputs = vec![
            Input::Connected { conn: 1 },
            Input::Frame {
                conn: 1,
                frame: s
                    .stamp(ControlBody::Hello {
                        keyword: None,
                        pseudo_for: None,
                        environment: None,
                    })
                    .to_frame(),
            },
            Input::BackendCompleted {
                request_id: RequestId(2),
                result: Ok("{}".into()),
            },
            Input::DetectionCompleted {
                request_id: RequestId(2),
                result: Ok(vec![]),
            },
            Input::Tick,
            Input::Disconnected { conn: 1 },
        ];
        for i in inputs {
            let l = LoggedInput::from_input(&i);
            let back: LoggedInput = serde_json::from_str(&serde_json::to_string(&l).unwrap()).unwrap();
            assert_eq!(back.to_input().unwrap(), i);
        }
    }

    #[test]
    fn header_survives_jsonl() {
        let log = EventLog {
            events: vec![LogEvent::Header {
                version: LOG_VERSION,
                scenario: "x".into(),
                seed: 1,
                config: LoggedConfig::from_config(&SessionConfig::default()),
                clients: vec![(1, "a".into()), (2, "b".into())],
            }],
        };
        assert_eq!(EventLog::parse(&log.to_jsonl()).unwrap(), log);
    }

    #[test]
    fn replay_needs_header() {
        assert!(replay(&EventLog::default()).is_err());
        let log = EventLog::parse("{\"event\":\"tick\"}");
        assert!(log.is_err());
    }

    #[test]
    fn config_keeps_mesh() {
        let cfg = SessionConfig {
            environment: Some(EnvironmentMesh::floor(0.0, 2.5)),
            ..SessionConfig::default()
        };
        let back = LoggedConfig::from_config(&cfg).to_config().unwrap();
        assert_eq!(back, cfg);
    }
}
