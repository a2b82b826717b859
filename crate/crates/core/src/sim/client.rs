use std::collections::{BTreeMap, VecDeque};

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::scenario::{ActionKind, ClientSpec, ConsentPolicy};
use crate::colocation::{synthetic_observation, AlignmentTransform, NoiseSpec, ObservationSetup, UserId};
use crate::geometry::{CameraModel, Pose, RigidTransform, Vec3};
use crate::privacy::{ImageBuffer, RequestId};
use crate::protocol::{ControlBody, Envelope, Frame, FrameType, NoticeCode, SceneEffect, SceneObjectView, Sequencer, StageTiming};
use crate::sync::{decode_batch, encode_batch, should_sync, ApplyOutcome, ChangePolicy, Replica, ReplicaObject, SyncRecord};

/// One record as it left an owner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SentRecord {
    pub at: f64,
    pub object_id: u32,
    pub bytes: [u8; 48],
}

/// One forwarded record as it reached a client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceivedRecord {
    pub at: f64,
    pub object_id: u32,
    pub bytes: [u8; 48],
}

/// Lifecycle of one request from its issuer's point of view.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RequestTrace {
    pub origin_seq: u64,
    pub text: String,
    pub issued_at: f64,
    pub request_id: Option<RequestId>,
    pub prompted_at: Option<f64>,
    pub executed_at: Option<f64>,
    pub rows: Vec<StageTiming>,
    pub failed: Option<String>,
    pub notices: Vec<NoticeCode>,
}

#[derive(Debug, Clone, Copy)]
struct Motion {
    object_id: u32,
    from: Vec3,
    to: Vec3,
    start: f64,
    end: f64,
}

/// Client-side problems with the script itself, kept for the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientIssue {
    pub at: f64,
    pub message: String,
}

/// Sans-io driver for one scripted participant. Frames in, frames out; the
/// caller owns the clock.
pub struct ScriptedClient {
    spec: ClientSpec,
    user: UserId,
    seq: Sequencer,
    policy: ChangePolicy,
    tick: f64,
    noise: Option<NoiseSpec>,
    actions: VecDeque<(f64, ActionKind)>,
    replica: Replica,
    names: BTreeMap<String, u32>,
    alignments: BTreeMap<UserId, RigidTransform>,
    motions: Vec<Motion>,
    last_sent: BTreeMap<u32, (Pose, f64)>,
    next_tick: Option<f64>,
    open_prompts: VecDeque<RequestId>,
    auto_replies: VecDeque<(f64, RequestId)>,
    pub keyword: Option<String>,
    pub registered: bool,
    pub connected: bool,
    pub requests: Vec<RequestTrace>,
    /// Receipt times of broadcasts, keyed by request id.
    pub broadcasts_seen: BTreeMap<RequestId, f64>,
    pub sent_records: Vec<SentRecord>,
    pub received_records: Vec<ReceivedRecord>,
    pub notices: Vec<(f64, NoticeCode)>,
    pub issues: Vec<ClientIssue>,
}

impl ScriptedClient {
    pub fn new(spec: ClientSpec, session_id: &str, policy: ChangePolicy, tick_hz: f64, noise: Option<NoiseSpec>) -> Self {
        let user = UserId::new(spec.id.clone());
        let join = spec.join_at;
        let actions = spec.actions.iter().map(|a| (a.at + join, a.kind.clone())).collect();
        Self {
            seq: Sequencer::new(session_id, user.clone()),
            replica: Replica::new(user.clone()),
            user,
            policy,
            tick: 1.0 / tick_hz,
            noise,
            actions,
            names: BTreeMap::new(),
            alignments: BTreeMap::new(),
            motions: Vec::new(),
            last_sent: BTreeMap::new(),
            next_tick: None,
            open_prompts: VecDeque::new(),
            auto_replies: VecDeque::new(),
            keyword: None,
            registered: false,
            connected: false,
            requests: Vec::new(),
            broadcasts_seen: BTreeMap::new(),
            sent_records: Vec::new(),
            received_records: Vec::new(),
            notices: Vec::new(),
            issues: Vec::new(),
            spec,
        }
    }

    pub fn user(&self) -> &UserId {
        &self.user
    }

    pub fn spec(&self) -> &ClientSpec {
        &self.spec
    }

    pub fn is_pseudo(&self) -> bool {
        self.spec.pseudo_for.is_some()
    }

    pub fn replica(&self) -> &Replica {
        &self.replica
    }

    pub fn object_id(&self, name: &str) -> Option<u32> {
        self.names.get(name).copied()
    }

    pub fn camera(&self) -> CameraModel {
        self.spec.camera.to_camera()
    }

    /// First frame on the connection.
    pub fn hello(&mut self) -> Frame {
        self.connected = true;
        self.control(ControlBody::Hello {
            keyword: self.spec.keyword.clone(),
            pseudo_for: self.spec.pseudo_for.as_deref().map(UserId::from),
            environment: None,
        })
    }

    fn control(&mut self, body: ControlBody) -> Frame {
        self.seq.stamp(body).to_frame()
    }

    /// Earliest time `poll` has work to do.
    pub fn next_wakeup(&self) -> Option<f64> {
        if !self.connected {
            return None;
        }
        [
            self.actions.front().map(|a| a.0),
            self.next_tick,
            self.auto_replies.front().map(|a| a.0),
        ]
        .into_iter()
        .flatten()
        .min_by(f64::total_cmp)
    }

    /// Runs everything due at `now`. Returns frames to send, in order, and
    /// whether the client wants to disconnect.
    pub fn poll(&mut self, now: f64) -> (Vec<Frame>, bool) {
        let mut out = Vec::new();
        let mut disconnect = false;
        while let Some(&(at, _)) = self.auto_replies.front() {
            if at > now {
                break;
            }
            let (_, id) = self.auto_replies.pop_front().expect("peeked");
            if let Some(pos) = self.open_prompts.iter().position(|r| *r == id) {
                self.open_prompts.remove(pos);
                let approved = self.spec.consent == ConsentPolicy::Approve;
                out.push(self.control(ControlBody::ConsentReply { request_id: id, approved }));
            }
        }
        while self.actions.front().is_some_and(|a| a.0 <= now) {
            let (_, action) = self.actions.pop_front().expect("peeked");
            match self.act(now, action) {
                Some(Ok(f)) => out.push(f),
                Some(Err(())) => {
                    disconnect = true;
                    break;
                }
                None => {}
            }
        }
        if self.next_tick.is_some_and(|t| t <= now + 1e-12) {
            if let Some(f) = self.sample_motion(now) {
                out.push(f);
            }
        }
        if disconnect {
            self.connected = false;
            self.next_tick = None;
        }
        (out, disconnect)
    }

    fn issue(&mut self, at: f64, message: String) {
        tracing::debug!(client = %self.user, at, %message, "script issue");
        self.issues.push(ClientIssue { at, message });
    }

    fn act(&mut self, now: f64, action: ActionKind) -> Option<Result<Frame, ()>> {
        match action {
            ActionKind::Register => {
                let truth = self.spec.tag.to_pose();
                let setup = ObservationSetup {
                    tag_id: 0,
                    tag_size_meters: self.spec.tag_size,
                    observation_distance: self.spec.observation_distance,
                    timestamp: now,
                };
                let observation = match self.noise {
                    Some(n) => {
                        let salt = self.user.as_str().bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
                        synthetic_observation(&truth, &setup, &n.with_seed(n.seed ^ salt))
                    }
                    None => synthetic_observation(&truth, &setup, &NoiseSpec::zero()),
                };
                Some(Ok(self.control(ControlBody::RegisterRequest {
                    observation: Some(observation),
                })))
            }
            ActionKind::Request { text, frame, image } => {
                let camera = frame.as_ref().map(|_| self.camera());
                let frame_image = match (&frame, image) {
                    (Some(_), true) => {
                        let c = self.camera();
                        let img = ImageBuffer::pattern(c.image_width, c.image_height, 3, (self.requests.len() % 251) as u8);
                        Some(base64::engine::general_purpose::STANDARD.encode(img.to_container()))
                    }
                    _ => None,
                };
                let env = self.seq.stamp(ControlBody::UserText {
                    text: text.clone(),
                    frame_ref: frame,
                    camera,
                    frame_image,
                });
                self.requests.push(RequestTrace {
                    origin_seq: env.seq,
                    text,
                    issued_at: now,
                    ..Default::default()
                });
                Some(Ok(env.to_frame()))
            }
            ActionKind::Claim { object } => match self.object_id(&object) {
                Some(object_id) => Some(Ok(self.control(ControlBody::Claim { object_id }))),
                None => {
                    self.issue(now, format!("claim: no object named {object:?}"));
                    None
                }
            },
            ActionKind::Move { object, to, duration } => {
                let Some(id) = self.object_id(&object) else {
                    self.issue(now, format!("move: no object named {object:?}"));
                    return None;
                };
                if !self.replica.is_owned_locally(id) {
                    self.issue(now, format!("move: {object} is not owned by {}", self.user));
                    return None;
                }
                let from = self.replica.get(id).expect("owned").pose.position;
                self.motions.retain(|m| m.object_id != id);
                self.motions.push(Motion {
                    object_id: id,
                    from,
                    to: Vec3::from(to),
                    start: now,
                    end: now + duration,
                });
                self.last_sent.entry(id).or_insert((self.replica.get(id).expect("owned").pose, f64::NEG_INFINITY));
                if self.next_tick.is_none() {
                    self.next_tick = Some(now);
                }
                None
            }
            ActionKind::ConsentReply { approve } => match self.open_prompts.pop_front() {
                Some(request_id) => {
                    self.auto_replies.retain(|(_, r)| *r != request_id);
                    Some(Ok(self.control(ControlBody::ConsentReply {
                        request_id,
                        approved: approve,
                    })))
                }
                None => {
                    self.issue(now, "consent reply with no open prompt".into());
                    None
                }
            },
            ActionKind::Disconnect => Some(Err(())),
        }
    }

    /// Advances scripted motion and emits one batch of changed owned objects.
    fn sample_motion(&mut self, now: f64) -> Option<Frame> {
        for m in &self.motions {
            let s = ((now - m.start) / (m.end - m.start)).clamp(0.0, 1.0);
            let p = m.from + (m.to - m.from) * s;
            if let Some(o) = self.replica.get(m.object_id) {
                let mut pose = o.pose;
                pose.position = p;
                self.replica.set_local_pose(m.object_id, pose);
            }
        }
        self.motions.retain(|m| m.end > now);
        let mut batch = Vec::new();
        let mut pending = false;
        for (&id, (prev, at)) in self.last_sent.iter_mut() {
            let Some(o) = self.replica.get(id) else { continue };
            if o.owner.as_ref() != Some(&self.user) {
                continue;
            }
            if should_sync(prev, &o.pose, *at, now, &self.policy) {
                let rec = SyncRecord::from_pose(id, &o.pose, 0);
                self.sent_records.push(SentRecord {
                    at: now,
                    object_id: id,
                    bytes: rec.encode(),
                });
                batch.push(rec);
                *prev = o.pose;
                *at = now;
            } else if should_sync(prev, &o.pose, f64::NEG_INFINITY, now, &self.policy) {
                // Changed but rate-limited; keep sampling until it goes out.
                pending = true;
            }
        }
        self.next_tick = if self.motions.is_empty() && !pending {
            None
        } else {
            Some(now + self.tick)
        };
        (!batch.is_empty()).then(|| Frame::sync(encode_batch(&batch)))
    }

    /// Applies one frame from the server. Returns immediate replies.
    pub fn on_frame(&mut self, now: f64, frame: &Frame) -> Vec<Frame> {
        match frame.kind {
            FrameType::Sync => {
                self.on_sync(now, &frame.payload);
                Vec::new()
            }
            FrameType::Control => match Envelope::from_frame(frame) {
                Ok(env) => self.on_control(now, env.body),
                Err(e) => {
                    self.issue(now, format!("bad control frame: {e}"));
                    Vec::new()
                }
            },
        }
    }

    fn alignment_from(&self, owner: &UserId) -> Option<AlignmentTransform> {
        let host = self.spec.pseudo_for.as_deref().map(UserId::from).unwrap_or_else(|| self.user.clone());
        let transform = if *owner == host {
            RigidTransform::identity()
        } else {
            *self.alignments.get(owner)?
        };
        Some(AlignmentTransform {
            from_user: owner.clone(),
            to_user: host,
            transform,
        })
    }

    fn on_sync(&mut self, now: f64, payload: &[u8]) {
        let Ok(records) = decode_batch(payload) else {
            self.issue(now, "undecodable sync batch".into());
            return;
        };
        for (i, r) in records.iter().enumerate() {
            let mut bytes = [0u8; 48];
            bytes.copy_from_slice(&payload[i * 48..(i + 1) * 48]);
            self.received_records.push(ReceivedRecord {
                at: now,
                object_id: r.object_id,
                bytes,
            });
            let owner = self.replica.get(r.object_id).and_then(|o| o.owner.clone());
            let Some(a) = owner.and_then(|o| self.alignment_from(&o)) else {
                continue;
            };
            if self.replica.apply_remote_update(r, &a) == ApplyOutcome::Destroyed {
                self.names.retain(|_, v| *v != r.object_id);
            }
        }
    }

    fn upsert(&mut self, view: &SceneObjectView) {
        self.names.insert(view.name.clone(), view.object_id);
        if self.replica.get(view.object_id).is_some() {
            self.replica.set_owner(view.object_id, view.owner.clone());
            self.replica.set_local_pose(view.object_id, view.pose);
        } else {
            self.replica.create_object(
                view.object_id,
                ReplicaObject {
                    prefab_name: view.prefab_name.clone(),
                    pose: view.pose,
                    owner: view.owner.clone(),
                },
            );
        }
    }

    fn trace_mut(&mut self, id: RequestId) -> Option<&mut RequestTrace> {
        self.requests.iter_mut().find(|t| t.request_id == Some(id))
    }

    fn on_control(&mut self, now: f64, body: ControlBody) -> Vec<Frame> {
        match body {
            ControlBody::Welcome { keyword, .. } => self.keyword = Some(keyword),
            ControlBody::RegisterResult { success, .. } => self.registered |= success,
            ControlBody::Alignments { transforms } => self.alignments = transforms,
            ControlBody::SceneSnapshot { objects } => {
                for o in &objects {
                    self.upsert(o);
                }
            }
            ControlBody::RequestAccepted { request_id, origin_seq } => {
                if let Some(t) = self.requests.iter_mut().find(|t| t.origin_seq == origin_seq) {
                    t.request_id = Some(request_id);
                }
            }
            ControlBody::ConsentPrompt { request_id, .. } => {
                if let Some(t) = self.trace_mut(request_id) {
                    t.prompted_at = Some(now);
                }
                self.open_prompts.push_back(request_id);
                if self.spec.consent != ConsentPolicy::Ignore {
                    self.auto_replies.push_back((now + self.spec.consent_delay, request_id));
                }
            }
            ControlBody::ResponseBroadcast { request_id, effect, .. } => {
                self.broadcasts_seen.entry(request_id).or_insert(now);
                if let Some(t) = self.trace_mut(request_id) {
                    t.executed_at = Some(now);
                }
                match &effect {
                    SceneEffect::Created { object } | SceneEffect::Animated { object, .. } => self.upsert(object),
                    SceneEffect::Answer { .. } => {}
                }
            }
            ControlBody::StageTimings { request_id, rows } => {
                if let Some(t) = self.trace_mut(request_id) {
                    t.rows = rows;
                }
            }
            ControlBody::OwnershipChanged { object_id, owner, .. } => {
                if owner.as_ref() != Some(&self.user) {
                    self.motions.retain(|m| m.object_id != object_id);
                }
                if owner.as_ref() == Some(&self.user) {
                    if let Some(o) = self.replica.get(object_id) {
                        self.last_sent.insert(object_id, (o.pose, f64::NEG_INFINITY));
                    }
                }
                self.replica.set_owner(object_id, owner);
            }
            ControlBody::Notice {
                code, request_id, message, ..
            } => {
                self.notices.push((now, code));
                if let Some(id) = request_id {
                    if code == NoticeCode::ConsentTimeout {
                        self.open_prompts.retain(|r| *r != id);
                        self.auto_replies.retain(|(_, r)| *r != id);
                    }
                    if let Some(t) = self.trace_mut(id) {
                        t.notices.push(code);
                        if matches!(code, NoticeCode::RequestFailed | NoticeCode::NotRegistered | NoticeCode::NotFound) {
                            t.failed = Some(message);
                        }
                    }
                }
            }
            _ => {}
        }
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scenario::{Action, PoseSpec};

    fn spec(actions: Vec<Action>) -> ClientSpec {
        ClientSpec {
            id: "a".into(),
            keyword: None,
            pseudo_for: None,
            tag: PoseSpec::default(),
            observation_distance: 1.0,
            tag_size: 0.16,
            camera: Default::default(),
            consent: ConsentPolicy::Approve,
            consent_delay: 0.5,
            join_at: 0.0,
            actions,
        }
    }

    fn owned_cube(c: &mut ScriptedClient) {
        let view = SceneObjectView {
            object_id: 1,
            name: "cube-1".into(),
            prefab_name: "Cube".into(),
            pose: Pose::identity(),
            extents: Vec3::new(0.1, 0.1, 0.1),
            color: None,
            owner: Some("a".into()),
            epoch: 1,
        };
        c.upsert(&view);
    }

    fn drive(c: &mut ScriptedClient, until: f64) -> Vec<(f64, Frame)> {
        let mut out = Vec::new();
        while let Some(t) = c.next_wakeup() {
            if t > until {
                break;
            }
            for f in c.poll(t).0 {
                out.push((t, f));
            }
        }
        out
    }

    #[test]
    fn motion_respects_change_policy_rate() {
        let mv = Action {
            at: 0.0,
            kind: ActionKind::Move {
                object: "cube-1".into(),
                to: [1.0, 0.0, 0.0],
                duration: 1.0,
            },
        };
        let mut c = ScriptedClient::new(spec(vec![mv]), "s", ChangePolicy::default(), 240.0, None);
        c.hello();
        owned_cube(&mut c);
        let frames = drive(&mut c, 5.0);
        // 1 m at 1 m/s, one send per 1/60 s: about 60 sends, never faster.
        assert!((59..=62).contains(&frames.len()), "{}", frames.len());
        for w in frames.windows(2) {
            assert!(w[1].0 - w[0].0 >= 1.0 / 60.0 - 1e-9);
        }
        // The final resting pose went out.
        let last = SyncRecord::decode(&frames.last().unwrap().1.payload).unwrap();
        assert!((last.pose().position - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-6);
        assert_eq!(c.next_wakeup(), None);
    }

    #[test]
    fn stationary_owned_object_sends_nothing() {
        let mut c = ScriptedClient::new(spec(vec![]), "s", ChangePolicy::default(), 240.0, None);
        c.hello();
        owned_cube(&mut c);
        assert!(drive(&mut c, 5.0).is_empty());
    }

    #[test]
    fn auto_consent_answers_after_delay() {
        let mut c = ScriptedClient::new(spec(vec![]), "s", ChangePolicy::default(), 240.0, None);
        c.hello();
        let prompt = ControlBody::ConsentPrompt {
            request_id: RequestId(4),
            crop: crate::privacy::Rect::new(0.0, 0.0, 1.0, 1.0),
            detections: vec![],
            timeout: 60.0,
            crop_image: None,
        };
        c.on_control(1.0, prompt);
        assert_eq!(c.next_wakeup(), Some(1.5));
        let (out, _) = c.poll(1.5);
        let body = Envelope::from_frame(&out[0]).unwrap().body;
        assert_eq!(body, ControlBody::ConsentReply { request_id: RequestId(4), approved: true });
    }

    #[test]
    fn move_of_unowned_object_is_an_issue() {
        let mv = Action {
            at: 0.0,
            kind: ActionKind::Move {
                object: "ghost".into(),
                to: [1.0, 0.0, 0.0],
                duration: 1.0,
            },
        };
        let mut c = ScriptedClient::new(spec(vec![mv]), "s", ChangePolicy::default(), 240.0, None);
        c.hello();
        assert!(drive(&mut c, 1.0).is_empty());
        assert_eq!(c.issues.len(), 1);
    }
}
