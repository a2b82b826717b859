//! Edge server: one authoritative session per room.
//!
//! [`Session`] is sans-io. It consumes [`Input`]s and returns [`Effect`]s,
//! which keeps it deterministic under a virtual clock. [`runtime`] drives it
//! over TCP and WebSocket with the wall clock.

pub mod runtime;
mod scene;
mod session;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use scene::{resolve_pose, OwnerContext, Scene, SceneObject};
pub use session::{ConnId, Effect, Input, Session, SessionConfig, SessionState, SessionStats, STAGE_ROWS};

use crate::geometry::{EnvironmentMesh, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServerError {
    #[error("cannot place object: {0}")]
    Placement(String),
    #[error("{0}")]
    NotRegistered(String),
    #[error("{0}")]
    NotFound(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    External,
}

impl std::str::FromStr for BackendKind {
    type Err = ServerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(Self::Mock),
            "external" => Ok(Self::External),
            other => Err(ServerError::Config(format!("unknown backend {other:?}"))),
        }
    }
}

/// File-level configuration. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ServerConfig {
    pub version: u32,
    pub listen: String,
    /// Optional WebSocket listener carrying the same frames.
    pub websocket: Option<String>,
    pub session_id: String,
    pub consent_timeout: f64,
    pub backend: BackendKind,
    pub mock_script: Option<PathBuf>,
    pub external: Option<crate::mllm::ExternalBackendConfig>,
    pub detector_script: Option<PathBuf>,
    /// Program speaking the JSON-lines detector protocol; overrides the script.
    pub detector_command: Option<Vec<String>>,
    pub environment: Option<PathBuf>,
    pub prefabs: BTreeMap<String, [f64; 3]>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            version: 1,
            listen: "127.0.0.1:7878".into(),
            websocket: None,
            session_id: "session-1".into(),
            consent_timeout: crate::privacy::DEFAULT_CONSENT_TIMEOUT,
            backend: BackendKind::Mock,
            mock_script: None,
            external: None,
            detector_script: None,
            detector_command: None,
            environment: None,
            prefabs: BTreeMap::new(),
        }
    }
}

impl ServerConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ServerError> {
        let mut cfg: ServerConfig = toml::from_str(text).map_err(|e| ServerError::Config(e.to_string()))?;
        if cfg.version != 1 {
            return Err(ServerError::Config(format!("unsupported config version {}", cfg.version)));
        }
        for p in [&mut cfg.mock_script, &mut cfg.detector_script, &mut cfg.environment]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServerError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ServerError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn session_config(&self, accepts_images: bool) -> Result<SessionConfig, ServerError> {
        let environment = match &self.environment {
            Some(p) => Some(EnvironmentMesh::load(p).map_err(|e| ServerError::Config(e.to_string()))?),
            None => None,
        };
        Ok(SessionConfig {
            session_id: self.session_id.clone(),
            consent_timeout: self.consent_timeout,
            backend_accepts_images: accepts_images,
            prefabs: self.prefabs.iter().map(|(k, v)| (k.clone(), Vec3::from(*v))).collect(),
            environment,
            ..SessionConfig::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_and_resolves_paths() {
        let cfg = ServerConfig::from_toml(
            r#"
version = 1
listen = "0.0.0.0:9000"
backend = "mock"
mockScript = "mock.toml"
[prefabs]
cube = [0.1, 0.1, 0.1]
"#,
            Path::new("/etc/x"),
        )
        .unwrap();
        assert_eq!(cfg.listen, "0.0.0.0:9000");
        assert_eq!(cfg.mock_script.as_deref(), Some(Path::new("/etc/x/mock.toml")));
        let s = cfg.session_config(true).unwrap();
        assert_eq!(s.prefabs["cube"], Vec3::new(0.1, 0.1, 0.1));
    }

    #[test]
    fn config_rejects_unknown_version() {
        assert!(ServerConfig::from_toml("version = 2", Path::new(".")).is_err());
        assert!("weird".parse::<BackendKind>().is_err());
    }
}
