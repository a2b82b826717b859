//! Versioned scenario files.
//!
//! ```toml
//! version = 1
//! name = "two-users"
//! seed = 7
//! duration = 12.0
//!
//! [server]
//! mockScript = "mock.toml"
//! detectorScript = "frames.txt"
//! environment = "room.mesh"
//!
//! [[client]]
//! id = "alice"
//! tag = { position = [0.0, 0.0, -1.0] }
//! camera = { pose = { position = [0.0, 1.6, 0.0], pitch = -30.0 }, fov = 90.0, width = 640, height = 480 }
//!
//! [[client.action]]
//! at = 0.1
//! kind = "register"
//! ```
//!
//! Paths resolve against the scenario file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::colocation::NoiseSpec;
use crate::geometry::{rotation_about, CameraModel, Pose, Vec3};
use crate::sync::ChangePolicy;

pub const SCENARIO_VERSION: u32 = 1;

/// Hand-authorable pose: yaw about +Y, then pitch about the yawed +X.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseSpec {
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
}

impl Default for PoseSpec {
    fn default() -> Self {
        Self {
            position: [0.0; 3],
            yaw: 0.0,
            pitch: 0.0,
        }
    }
}

impl PoseSpec {
    pub fn to_pose(&self) -> Pose {
        let q = rotation_about(Vec3::y(), self.yaw) * rotation_about(Vec3::x(), self.pitch);
        Pose::from_position(Vec3::from(self.position)).with_rotation(q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSpec {
    pub pose: PoseSpec,
    pub fov: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            pose: PoseSpec {
                position: [0.0, 1.6, 0.0],
                yaw: 0.0,
                pitch: 0.0,
            },
            fov: 90.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraSpec {
    pub fn to_camera(&self) -> CameraModel {
        CameraModel::new(self.pose.to_pose(), self.fov, self.width, self.height)
    }
}

/// How a client answers consent prompts it has no explicit action for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsentPolicy {
    Approve,
    Reject,
    /// Never answer; the server's deadline decides.
    #[default]
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum ActionKind {
    Register,
    /// Text request, optionally with a captured frame from the corpus.
    Request {
        text: String,
        #[serde(default)]
        frame: Option<String>,
        /// Attach a synthetic image of the camera's size.
        #[serde(default = "yes")]
        image: bool,
    },
    /// Claim by object name, as shown in the client's scene mirror.
    Claim { object: String },
    /// Linear motion of an owned object to a point in the client's frame.
    Move {
        object: String,
        to: [f64; 3],
        duration: f64,
    },
    /// Answer the oldest open consent prompt.
    ConsentReply { approve: bool },
    Disconnect,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub at: f64,
    #[serde(flatten)]
    pub kind: ActionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClientSpec {
    pub id: String,
    #[serde(default)]
    pub keyword: Option<String>,
    /// Receive-only measurement client sharing this host's clock.
    #[serde(default)]
    pub pseudo_for: Option<String>,
    /// True pose of the shared tag in this client's world frame.
    #[serde(default)]
    pub tag: PoseSpec,
    #[serde(default = "default_distance")]
    pub observation_distance: f64,
    #[serde(default = "default_tag_size")]
    pub tag_size: f64,
    #[serde(default)]
    pub camera: CameraSpec,
    #[serde(default)]
    pub consent: ConsentPolicy,
    /// Seconds between a prompt and the automatic answer.
    #[serde(default = "default_consent_delay")]
    pub consent_delay: f64,
    /// Offset added to the client's connect time.
    #[serde(default)]
    pub join_at: f64,
    #[serde(default, rename = "action")]
    pub actions: Vec<Action>,
}

fn default_distance() -> f64 {
    1.0
}
fn default_tag_size() -> f64 {
    0.16
}
fn default_consent_delay() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ServerSpec {
    pub session_id: String,
    pub consent_timeout: f64,
    pub mock_script: Option<PathBuf>,
    pub detector_script: Option<PathBuf>,
    pub environment: Option<PathBuf>,
    pub prefabs: BTreeMap<String, [f64; 3]>,
}

impl Default for ServerSpec {
    fn default() -> Self {
        Self {
            session_id: "session-1".into(),
            consent_timeout: crate::privacy::DEFAULT_CONSENT_TIMEOUT,
            mock_script: None,
            detector_script: None,
            environment: None,
            prefabs: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub duration: f64,
    /// One-way link delay in the virtual network, seconds.
    #[serde(default = "default_latency")]
    pub link_latency: f64,
    /// Client motion sampling rate, Hz.
    #[serde(default = "default_tick")]
    pub tick_hz: f64,
    #[serde(default)]
    pub policy: ChangePolicy,
    /// Registration noise; absent means noiseless.
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub server: ServerSpec,
    #[serde(default, rename = "client")]
    pub clients: Vec<ClientSpec>,
}

fn default_seed() -> u64 {
    7
}
fn default_latency() -> f64 {
    0.001
}
fn default_tick() -> f64 {
    240.0
}

impl Scenario {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, SimError> {
        let mut s: Scenario = toml::from_str(text).map_err(|e| SimError::Scenario(e.to_string()))?;
        for p in [&mut s.server.mock_script, &mut s.server.detector_script, &mut s.server.environment]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| SimError::Scenario(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        if self.version != SCENARIO_VERSION {
            return bad(format!("unsupported scenario version {}", self.version));
        }
        if !(self.duration > 0.0) || !(self.link_latency >= 0.0) || !(self.tick_hz > 0.0) {
            return bad("duration and tick rate must be positive, latency nonnegative".into());
        }
        self.policy.validate().map_err(SimError::Scenario)?;
        let mut ids = std::collections::BTreeSet::new();
        for c in &self.clients {
            if !ids.insert(c.id.as_str()) {
                return bad(format!("duplicate client id {:?}", c.id));
            }
            if c.id == crate::protocol::SERVER_SENDER {
                return bad("client id \"server\" is reserved".into());
            }
            if c.pseudo_for.is_some() && !c.actions.is_empty() {
                return bad(format!("pseudo user {:?} may not have actions", c.id));
            }
            if let Some(w) = c.actions.windows(2).find(|w| w[1].at < w[0].at) {
                return bad(format!("client {:?}: action at {} precedes {}", c.id, w[1].at, w[0].at));
            }
            if c.actions.iter().any(|a| !(a.at >= 0.0)) {
                return bad(format!("client {:?}: negative action time", c.id));
            }
            for a in &c.actions {
                if let ActionKind::Move { duration, .. } = a.kind {
                    if !(duration > 0.0) {
                        return bad(format!("client {:?}: move duration must be positive", c.id));
                    }
                }
            }
            c.camera.to_camera().validate().map_err(|e| SimError::Scenario(e.to_string()))?;
        }
        for c in &self.clients {
            if let Some(h) = &c.pseudo_for {
                if !ids.contains(h.as_str()) {
                    return bad(format!("pseudo user {:?} names unknown host {h:?}", c.id));
                }
            }
        }
        for p in [&self.server.mock_script, &self.server.detector_script, &self.server.environment]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return bad(format!("referenced file {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    pub fn client(&self, id: &str) -> Option<&ClientSpec> {
        self.clients.iter().find(|c| c.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"
version = 1
name = "t"
duration = 1.0
[[client]]
id = "a"
[[client.action]]
at = 0.1
kind = "register"
[[client.action]]
at = 0.2
kind = "request"
text = "hi"
[[client.action]]
at = 0.3
kind = "move"
object = "cube-1"
to = [1, 0, 0]
duration = 1.0
"#;

    #[test]
    fn parses_with_defaults() {
        let s = Scenario::from_toml(MIN, Path::new(".")).unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.clients[0].actions.len(), 3);
        assert!(matches!(s.clients[0].actions[1].kind, ActionKind::Request { image: true, .. }));
        assert_eq!(s.policy, ChangePolicy::default());
    }

    #[test]
    fn rejects_schema_violations() {
        let out_of_order = MIN.replace("at = 0.3", "at = 0.05");
        assert!(Scenario::from_toml(&out_of_order, Path::new(".")).is_err());
        assert!(Scenario::from_toml(&MIN.replace("version = 1", "version = 9"), Path::new(".")).is_err());
        let missing = format!("{MIN}\n[server]\nmockScript = \"nope.toml\"\n");
        assert!(Scenario::from_toml(&missing, Path::new("/nonexistent")).is_err());
        assert!(Scenario::from_toml(&MIN.replace("kind = \"register\"", "kind = \"dance\""), Path::new(".")).is_err());
    }

    #[test]
    fn pose_spec_yaw_then_pitch() {
        let p = PoseSpec {
            position: [0.0; 3],
            yaw: 90.0,
            pitch: -90.0,
        }
        .to_pose();
        // Forward (-Z) pitched down becomes -Y regardless of yaw.
        let f = p.unit_rotation() * Vec3::new(0.0, 0.0, -1.0);
        assert!((f - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
    }
}
