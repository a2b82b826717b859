use std::collections::BTreeMap;
use std::time::Instant;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scene::{resolve_pose, OwnerContext, Scene, SceneObject};
use super::ServerError;
use crate::colocation::{RegistrationRecord, RegistrationRegistry, UserId};
use crate::geometry::{rotation_about, CameraModel, EnvironmentMesh, Pose, RigidTransform, Vec3};
use crate::mllm::{
    build_initial_prompt, build_refined_prompt, check_reply, parse_initial_response, parse_refined_response,
    AnimationCreation, InitialResponse, MllmError, ObjectCreation, Prompt, RefinedResponse, ReplyCheck,
    Stage, UserRequest,
};
use crate::privacy::{
    crop_frame, describe_frame, detections_in_crop, ConsentDecision, ConsentRegistry, Detection, ImageBuffer,
    PrivacyError, RequestId, DEFAULT_CONSENT_TIMEOUT,
};
use crate::protocol::{
    ControlBody, Envelope, Frame, FrameType, NoticeCode, SceneEffect, SceneObjectView, Sequencer, StageTiming,
    SERVER_SENDER,
};
use crate::sync::{decode_batch, OwnershipLedger, SpecialEvent, RECORD_SIZE};

pub type ConnId = u64;

/// Row labels of the speak-to-action latency decomposition, in order.
pub const STAGE_ROWS: [&str; 7] = [
    "Transcription",
    "Initial Stage",
    "User Confirmation",
    "Text to Speech",
    "Refined Stage",
    "Local Processing",
    "Communication",
];

/// Stimulus delivered to the session, in the order the runtime serialized it.
#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Connected {
        conn: ConnId,
    },
    Frame {
        conn: ConnId,
        frame: Frame,
    },
    Disconnected {
        conn: ConnId,
    },
    BackendCompleted {
        request_id: RequestId,
        result: Result<String, MllmError>,
    },
    DetectionCompleted {
        request_id: RequestId,
        result: Result<Vec<Detection>, PrivacyError>,
    },
    /// Lets the session act on deadlines.
    Tick,
}

/// Work the runtime performs on the session's behalf.
#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Send { conn: ConnId, frame: Frame },
    /// The only path by which anything leaves the edge for a model backend.
    CallBackend { request_id: RequestId, prompt: Prompt },
    Detect { request_id: RequestId, frame_ref: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SessionConfig {
    pub session_id: String,
    pub consent_timeout: f64,
    pub backend_accepts_images: bool,
    /// Prefab name → bounding extents in meters.
    pub prefabs: BTreeMap<String, Vec3>,
    pub default_extents: Vec3,
    /// Fallback environment, in the reference user's frame.
    #[serde(skip)]
    pub environment: Option<EnvironmentMesh>,
    /// Include handler wall time in reports. Off for deterministic runs.
    pub measure_compute: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            session_id: "session-1".into(),
            consent_timeout: DEFAULT_CONSENT_TIMEOUT,
            backend_accepts_images: true,
            prefabs: BTreeMap::new(),
            default_extents: Vec3::new(0.1, 0.1, 0.1),
            environment: None,
            measure_compute: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionStats {
    pub dropped_non_owner: u64,
    pub framing_errors: u64,
    pub sequence_violations: u64,
    pub invalid_messages: u64,
    pub forwarded_records: u64,
    pub forwarded_bytes: u64,
    pub requests_completed: u64,
    pub requests_failed: u64,
    pub consent_timeouts: u64,
    pub transfers: u64,
}

/// The state that defines the shared world; compared for atomicity and replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionState {
    pub scene: Scene,
    pub ledger: OwnershipLedger,
    pub registrations: RegistrationRegistry,
    pub reference_user: Option<UserId>,
}

impl SessionState {
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("state serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone)]
struct Connection {
    user: Option<UserId>,
    pseudo_for: Option<UserId>,
    keyword: Option<String>,
    last_seq: Option<u64>,
    environment: Option<EnvironmentMesh>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Detecting,
    Initial,
    AwaitConsent,
    Refined,
}

#[derive(Debug, Clone, Default)]
struct StageClock {
    started: f64,
    initial: f64,
    confirmation: f64,
    refined: f64,
    local: f64,
}

#[derive(Debug, Clone)]
struct Pipeline {
    conn: ConnId,
    request: UserRequest,
    frame_image: Option<ImageBuffer>,
    detections: Vec<Detection>,
    phase: Phase,
    prompt: Option<Prompt>,
    initial: Option<InitialResponse>,
    crop: Option<ImageBuffer>,
    decision: Option<ConsentDecision>,
    clock: StageClock,
}

/// One shared session. Every mutation happens inside [`Session::handle`],
/// so the input order fully determines the outcome.
#[derive(Clone)]
pub struct Session {
    cfg: SessionConfig,
    state: SessionState,
    conns: BTreeMap<ConnId, Connection>,
    users: BTreeMap<UserId, ConnId>,
    pipelines: BTreeMap<RequestId, Pipeline>,
    consent: ConsentRegistry,
    next_request: u64,
    seq: Sequencer,
    stats: SessionStats,
    out: Vec<Effect>,
    entered: Option<Instant>,
}

impl Session {
    pub fn new(cfg: SessionConfig) -> Self {
        let seq = Sequencer::new(cfg.session_id.clone(), UserId::from(SERVER_SENDER));
        Self {
            consent: ConsentRegistry::new(cfg.consent_timeout),
            cfg,
            state: SessionState {
                scene: Scene::new(),
                ledger: OwnershipLedger::new(),
                registrations: RegistrationRegistry::new(),
                reference_user: None,
            },
            conns: BTreeMap::new(),
            users: BTreeMap::new(),
            pipelines: BTreeMap::new(),
            next_request: 1,
            seq,
            stats: SessionStats::default(),
            out: Vec::new(),
            entered: None,
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn stats(&self) -> &SessionStats {
        &self.stats
    }

    pub fn user_of(&self, conn: ConnId) -> Option<&UserId> {
        self.conns.get(&conn).and_then(|c| c.user.as_ref())
    }

    pub fn keyword_of(&self, user: &UserId) -> Option<&str> {
        self.users
            .get(user)
            .and_then(|c| self.conns.get(c))
            .and_then(|c| c.keyword.as_deref())
    }

    pub fn in_flight(&self) -> usize {
        self.pipelines.len()
    }

    /// Earliest time at which a [`Input::Tick`] would change anything.
    pub fn next_deadline(&self) -> Option<f64> {
        self.consent.next_deadline()
    }

    pub fn handle(&mut self, now: f64, input: Input) -> Vec<Effect> {
        self.entered = self.cfg.measure_compute.then(Instant::now);
        self.expire_consent(now);
        match input {
            Input::Connected { conn } => {
                self.conns.insert(
                    conn,
                    Connection {
                        user: None,
                        pseudo_for: None,
                        keyword: None,
                        last_seq: None,
                        environment: None,
                    },
                );
            }
            Input::Frame { conn, frame } => self.on_frame(now, conn, frame),
            Input::Disconnected { conn } => self.on_disconnect(conn),
            Input::BackendCompleted { request_id, result } => self.on_backend(now, request_id, result),
            Input::DetectionCompleted { request_id, result } => self.on_detections(now, request_id, result),
            Input::Tick => {}
        }
        std::mem::take(&mut self.out)
    }

    // ---- outgoing helpers ----

    fn send(&mut self, conn: ConnId, body: ControlBody) {
        let env = self.seq.stamp(body);
        self.out.push(Effect::Send {
            conn,
            frame: env.to_frame(),
        });
    }

    fn notice(&mut self, conn: ConnId, code: NoticeCode, message: impl Into<String>, request_id: Option<RequestId>) {
        self.send(
            conn,
            ControlBody::Notice {
                code,
                message: message.into(),
                request_id,
                object_id: None,
                epoch: None,
            },
        );
    }

    /// Every connection that completed Hello, in id order.
    fn joined(&self) -> Vec<ConnId> {
        self.conns
            .iter()
            .filter(|(_, c)| c.user.is_some())
            .map(|(id, _)| *id)
            .collect()
    }

    /// The registered world frame a connection sees content in. Pseudo users
    /// share their host's.
    fn frame_user(&self, conn: ConnId) -> Option<UserId> {
        let c = self.conns.get(&conn)?;
        let u = c.pseudo_for.as_ref().or(c.user.as_ref())?;
        self.state.registrations.contains(u).then(|| u.clone())
    }

    fn transform(&self, from: &UserId, to: &UserId) -> Result<RigidTransform, ServerError> {
        if from == to {
            return Ok(RigidTransform::identity());
        }
        self.state
            .registrations
            .alignment(from, to)
            .map(|a| a.transform)
            .map_err(|e| ServerError::NotRegistered(e.to_string()))
    }

    fn to_reference(&self, owner: &UserId) -> Result<RigidTransform, ServerError> {
        let reference = self
            .state
            .reference_user
            .as_ref()
            .ok_or_else(|| ServerError::NotRegistered("no user has registered".into()))?;
        self.transform(owner, reference)
    }

    fn reference_to(&self, recipient: &UserId) -> Result<RigidTransform, ServerError> {
        let reference = self
            .state
            .reference_user
            .as_ref()
            .ok_or_else(|| ServerError::NotRegistered("no user has registered".into()))?;
        self.transform(reference, recipient)
    }

    fn view_for(&self, object_id: u32, recipient: &UserId) -> Option<SceneObjectView> {
        let obj = self.state.scene.get(object_id)?;
        let t = self.reference_to(recipient).ok()?;
        let own = self.state.ledger.get(object_id);
        self.state.scene.view(
            object_id,
            t.apply_to_pose(&obj.pose),
            own.and_then(|o| o.owner.clone()),
            own.map_or(0, |o| o.epoch),
        )
    }

    // ---- inbound frames ----

    fn on_frame(&mut self, now: f64, conn: ConnId, frame: Frame) {
        let Some(c) = self.conns.get(&conn) else {
            return;
        };
        let joined = c.user.is_some();
        let pseudo = c.pseudo_for.is_some();
        match frame.kind {
            FrameType::Sync => {
                if !joined || pseudo {
                    self.stats.invalid_messages += 1;
                    self.notice(conn, NoticeCode::InvalidMessage, "sync data from a connection that may not send it", None);
                    return;
                }
                self.forward_sync(conn, &frame.payload);
            }
            FrameType::Control => {
                let env = match Envelope::from_frame(&frame) {
                    Ok(e) => e,
                    Err(e) => {
                        self.stats.invalid_messages += 1;
                        self.notice(conn, NoticeCode::InvalidMessage, e.to_string(), None);
                        return;
                    }
                };
                if env.session_id != self.cfg.session_id {
                    self.stats.invalid_messages += 1;
                    self.notice(conn, NoticeCode::InvalidMessage, format!("unknown session {}", env.session_id), None);
                    return;
                }
                let c = self.conns.get_mut(&conn).expect("checked above");
                if let Some(prev) = c.last_seq {
                    if env.seq <= prev {
                        self.stats.sequence_violations += 1;
                        tracing::warn!(conn, seq = env.seq, prev, "sequence violation");
                        self.notice(
                            conn,
                            NoticeCode::SequenceViolation,
                            format!("seq {} is not above {prev}", env.seq),
                            None,
                        );
                        return;
                    }
                }
                if let Some(u) = &c.user {
                    if *u != env.sender_id {
                        self.stats.invalid_messages += 1;
                        self.notice(conn, NoticeCode::InvalidMessage, "sender id differs from the connection's user", None);
                        return;
                    }
                }
                c.last_seq = Some(env.seq);
                self.on_control(now, conn, env);
            }
        }
    }

    fn on_control(&mut self, now: f64, conn: ConnId, env: Envelope) {
        let c = &self.conns[&conn];
        if c.user.is_none() && !matches!(env.body, ControlBody::Hello { .. }) {
            self.stats.invalid_messages += 1;
            self.notice(conn, NoticeCode::InvalidMessage, "expected hello", None);
            return;
        }
        if c.pseudo_for.is_some() || (!env.body.is_client_message()) {
            self.stats.invalid_messages += 1;
            self.notice(conn, NoticeCode::InvalidMessage, format!("{} not accepted here", env.body.type_name()), None);
            return;
        }
        let user = env.sender_id.clone();
        match env.body {
            ControlBody::Hello {
                keyword,
                pseudo_for,
                environment,
            } => self.on_hello(conn, user, keyword, pseudo_for, environment),
            ControlBody::RegisterRequest { observation } => self.on_register(now, conn, &user, observation),
            ControlBody::UserText {
                text,
                frame_ref,
                camera,
                frame_image,
            } => self.on_user_text(now, conn, user, env.seq, text, frame_ref, camera, frame_image),
            ControlBody::ConsentReply { request_id, approved } => self.on_consent_reply(now, conn, &user, request_id, approved),
            ControlBody::Claim { object_id } => self.on_claim(conn, &user, object_id),
            _ => unreachable!("filtered by is_client_message"),
        }
    }

    fn on_hello(
        &mut self,
        conn: ConnId,
        user: UserId,
        keyword: Option<String>,
        pseudo_for: Option<UserId>,
        environment: Option<EnvironmentMesh>,
    ) {
        if self.conns[&conn].user.is_some() {
            self.stats.invalid_messages += 1;
            self.notice(conn, NoticeCode::InvalidMessage, "duplicate hello", None);
            return;
        }
        if user.as_str() == SERVER_SENDER || self.users.contains_key(&user) {
            self.stats.invalid_messages += 1;
            self.notice(conn, NoticeCode::InvalidMessage, format!("user id {user} is taken"), None);
            return;
        }
        let requested = keyword.unwrap_or_else(|| user.as_str().to_owned());
        let taken = |k: &str, conns: &BTreeMap<ConnId, Connection>| {
            conns.values().any(|c| c.keyword.as_deref() == Some(k))
        };
        let mut assigned = requested.clone();
        let mut n = 2;
        while taken(&assigned, &self.conns) {
            assigned = format!("{requested}-{n}");
            n += 1;
        }
        let reassigned = assigned != requested;
        let c = self.conns.get_mut(&conn).expect("connected");
        c.user = Some(user.clone());
        c.keyword = Some(assigned.clone());
        c.pseudo_for = pseudo_for.clone();
        c.environment = environment;
        if pseudo_for.is_none() {
            self.users.insert(user.clone(), conn);
        }
        self.send(
            conn,
            ControlBody::Welcome {
                user_id: user,
                keyword: assigned.clone(),
                keyword_reassigned: reassigned,
            },
        );
        if reassigned {
            self.notice(
                conn,
                NoticeCode::KeywordReassigned,
                format!("keyword {requested:?} is in use; yours is {assigned:?}"),
                None,
            );
        }
        // A pseudo user joining a registered host gets the host's view.
        if let Some(host) = pseudo_for {
            if self.state.registrations.contains(&host) {
                self.send_alignments(conn, &host);
                self.send_snapshot(conn, &host);
            }
        }
    }

    // ---- registration ----

    fn on_register(&mut self, now: f64, conn: ConnId, user: &UserId, observation: Option<crate::colocation::TagObservation>) {
        let t0 = Instant::now();
        let previous = self.state.registrations.get(user).cloned();
        let result = self.state.registrations.register(user, observation.as_ref());
        let record = match result {
            Ok(r) => r,
            Err(e) => {
                let compute_time = self.elapsed(t0);
                self.send(
                    conn,
                    ControlBody::RegisterResult {
                        success: false,
                        tag_pose: None,
                        message: Some(format!("{e}; please try again")),
                        compute_time,
                        reference_user: self.state.reference_user.clone(),
                    },
                );
                return;
            }
        };
        if self.state.reference_user.is_none() {
            self.state.reference_user = Some(user.clone());
        } else if self.state.reference_user.as_ref() == Some(user) {
            if let Some(old) = previous {
                self.rebase_scene(&old, &record);
            }
        }
        let _ = now;
        let compute_time = self.elapsed(t0);
        self.send(
            conn,
            ControlBody::RegisterResult {
                success: true,
                tag_pose: Some(record.tag_pose),
                message: None,
                compute_time,
                reference_user: self.state.reference_user.clone(),
            },
        );
        // Every pair's transform may have changed.
        for c in self.joined() {
            if let Some(fu) = self.frame_user(c) {
                self.send_alignments(c, &fu);
            }
        }
        self.send_snapshot(conn, user);
        let pseudos: Vec<ConnId> = self
            .conns
            .iter()
            .filter(|(_, c)| c.pseudo_for.as_ref() == Some(user))
            .map(|(id, _)| *id)
            .collect();
        for p in pseudos {
            self.send_snapshot(p, user);
        }
    }

    /// The reference user re-registered: re-express stored poses so objects
    /// stay put relative to the physical tag.
    fn rebase_scene(&mut self, old: &RegistrationRecord, new: &RegistrationRecord) {
        let t = new.tag_pose.rigid().compose(&old.tag_pose.rigid().inverse());
        for o in self.state.scene.iter_mut() {
            o.pose = t.apply_to_pose(&o.pose);
        }
    }

    fn send_alignments(&mut self, conn: ConnId, frame_user: &UserId) {
        let transforms: BTreeMap<UserId, RigidTransform> = self
            .state
            .registrations
            .iter()
            .filter(|r| r.user_id != *frame_user)
            .filter_map(|r| {
                self.transform(&r.user_id, frame_user)
                    .ok()
                    .map(|t| (r.user_id.clone(), t))
            })
            .collect();
        self.send(conn, ControlBody::Alignments { transforms });
    }

    fn send_snapshot(&mut self, conn: ConnId, frame_user: &UserId) {
        let ids: Vec<u32> = self.state.scene.iter().map(|o| o.object_id).collect();
        let objects = ids.into_iter().filter_map(|id| self.view_for(id, frame_user)).collect();
        self.send(conn, ControlBody::SceneSnapshot { objects });
    }

    /// `now` advanced by the compute already spent in this call, so a stage
    /// that starts here does not also count the preceding local work.
    fn stamp(&self, now: f64) -> f64 {
        now + self.entered.map_or(0.0, |t| t.elapsed().as_secs_f64())
    }

    fn elapsed(&self, t0: Instant) -> f64 {
        if self.cfg.measure_compute {
            t0.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    // ---- ownership ----

    fn on_claim(&mut self, conn: ConnId, user: &UserId, object_id: u32) {
        let outcome = match self.state.ledger.claim(user, object_id) {
            Ok(o) => o,
            Err(_) => {
                self.send(
                    conn,
                    ControlBody::Notice {
                        code: NoticeCode::NotFound,
                        message: format!("object {object_id} does not exist"),
                        request_id: None,
                        object_id: Some(object_id),
                        epoch: None,
                    },
                );
                return;
            }
        };
        if !outcome.is_transfer(user) {
            return;
        }
        self.stats.transfers += 1;
        for c in self.joined() {
            self.send(
                c,
                ControlBody::OwnershipChanged {
                    object_id,
                    owner: Some(user.clone()),
                    previous_owner: outcome.previous_owner.clone(),
                    epoch: outcome.epoch,
                },
            );
        }
        if let Some(prev) = &outcome.previous_owner {
            if let Some(&pc) = self.users.get(prev) {
                self.send(
                    pc,
                    ControlBody::Notice {
                        code: NoticeCode::OwnershipLost,
                        message: format!("{user} took object {object_id}"),
                        request_id: None,
                        object_id: Some(object_id),
                        epoch: Some(outcome.epoch),
                    },
                );
            }
        }
        self.send(
            conn,
            ControlBody::Notice {
                code: NoticeCode::OwnershipGranted,
                message: format!("you own object {object_id}"),
                request_id: None,
                object_id: Some(object_id),
                epoch: Some(outcome.epoch),
            },
        );
    }

    fn on_disconnect(&mut self, conn: ConnId) {
        let Some(c) = self.conns.remove(&conn) else {
            return;
        };
        let Some(user) = c.user else {
            return;
        };
        if c.pseudo_for.is_some() {
            return;
        }
        self.users.remove(&user);
        let dropped: Vec<RequestId> = self
            .pipelines
            .iter()
            .filter(|(_, p)| p.conn == conn)
            .map(|(id, _)| *id)
            .collect();
        for id in dropped {
            self.pipelines.remove(&id);
        }
        for (object_id, epoch) in self.state.ledger.release_all(&user) {
            for other in self.joined() {
                self.send(
                    other,
                    ControlBody::OwnershipChanged {
                        object_id,
                        owner: None,
                        previous_owner: Some(user.clone()),
                        epoch,
                    },
                );
            }
        }
    }

    // ---- sync forwarding ----

    fn forward_sync(&mut self, conn: ConnId, payload: &[u8]) {
        let sender = self.conns[&conn].user.clone().expect("joined");
        let records = match decode_batch(payload) {
            Ok(r) => r,
            Err(e) => {
                self.stats.framing_errors += 1;
                self.notice(conn, NoticeCode::FramingError, e.to_string(), None);
                return;
            }
        };
        let mut kept = Vec::with_capacity(payload.len());
        let to_ref = self.to_reference(&sender).ok();
        for (i, r) in records.iter().enumerate() {
            if !self.state.ledger.is_owner(&sender, r.object_id) {
                self.stats.dropped_non_owner += 1;
                continue;
            }
            kept.extend_from_slice(&payload[i * RECORD_SIZE..(i + 1) * RECORD_SIZE]);
            if r.has_event(SpecialEvent::Destroyed) {
                self.state.scene.remove(r.object_id);
                self.state.ledger.remove(r.object_id);
            } else if let (Some(t), Some(obj)) = (&to_ref, self.state.scene.get_mut(r.object_id)) {
                obj.pose = t.apply_to_pose(&r.pose());
            }
        }
        if kept.is_empty() {
            return;
        }
        let frame = Frame::sync(kept);
        for other in self.joined() {
            if other == conn {
                continue;
            }
            self.stats.forwarded_records += (frame.payload.len() / RECORD_SIZE) as u64;
            self.stats.forwarded_bytes += frame.payload.len() as u64;
            self.out.push(Effect::Send {
                conn: other,
                frame: frame.clone(),
            });
        }
    }

    // ---- request pipeline ----

    #[allow(clippy::too_many_arguments)]
    fn on_user_text(
        &mut self,
        now: f64,
        conn: ConnId,
        user: UserId,
        origin_seq: u64,
        text: String,
        frame_ref: Option<String>,
        camera: Option<CameraModel>,
        frame_image: Option<String>,
    ) {
        let request_id = RequestId(self.next_request);
        self.next_request += 1;
        let request = UserRequest {
            request_id,
            user_id: user,
            text,
            fov_description: Default::default(),
            frame_ref: frame_ref.clone(),
            camera_at_capture: camera,
            issued_at: now,
        };
        if let Err(e) = request.validate() {
            self.stats.requests_failed += 1;
            self.notice(conn, NoticeCode::RequestFailed, e.to_string(), Some(request_id));
            return;
        }
        self.send(conn, ControlBody::RequestAccepted { request_id, origin_seq });
        let mut degraded = None;
        let frame_image = frame_image.and_then(|b64| {
            let img = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| e.to_string())
                .and_then(|bytes| ImageBuffer::from_container(&bytes).map_err(|e| e.to_string()));
            img.map_err(|e| degraded = Some(format!("frame image unusable: {e}"))).ok()
        });
        if let Some(msg) = degraded {
            self.notice(conn, NoticeCode::DegradedContext, msg, Some(request_id));
        }
        let mut p = Pipeline {
            conn,
            request,
            frame_image,
            detections: Vec::new(),
            phase: Phase::Detecting,
            prompt: None,
            initial: None,
            crop: None,
            decision: None,
            clock: StageClock {
                started: now,
                ..Default::default()
            },
        };
        match frame_ref {
            Some(frame_ref) => {
                self.pipelines.insert(request_id, p);
                self.out.push(Effect::Detect { request_id, frame_ref });
            }
            None => {
                self.start_initial(now, request_id, &mut p);
                self.pipelines.insert(request_id, p);
            }
        }
    }

    fn on_detections(&mut self, now: f64, request_id: RequestId, result: Result<Vec<Detection>, PrivacyError>) {
        let Some(mut p) = self.pipelines.remove(&request_id) else {
            return;
        };
        if p.phase != Phase::Detecting {
            self.pipelines.insert(request_id, p);
            return;
        }
        p.clock.local += now - p.clock.started;
        match result {
            Ok(d) => p.detections = d,
            Err(e) => self.notice(
                p.conn,
                NoticeCode::DegradedContext,
                format!("object detection failed: {e}"),
                Some(request_id),
            ),
        }
        self.start_initial(now, request_id, &mut p);
        self.pipelines.insert(request_id, p);
    }

    fn start_initial(&mut self, now: f64, request_id: RequestId, p: &mut Pipeline) {
        let t0 = Instant::now();
        p.request.fov_description = describe_frame(&p.detections);
        let prompt = build_initial_prompt(&p.request);
        p.clock.local += self.elapsed(t0);
        p.phase = Phase::Initial;
        p.prompt = Some(prompt.clone());
        p.clock.started = self.stamp(now);
        self.out.push(Effect::CallBackend { request_id, prompt });
    }

    fn on_backend(&mut self, now: f64, request_id: RequestId, result: Result<String, MllmError>) {
        let Some(mut p) = self.pipelines.remove(&request_id) else {
            return;
        };
        let waited = now - p.clock.started;
        let prompt = match (p.phase, &p.prompt) {
            (Phase::Initial | Phase::Refined, Some(pr)) => pr.clone(),
            _ => {
                self.pipelines.insert(request_id, p);
                return;
            }
        };
        match prompt.stage {
            Stage::Initial => p.clock.initial += waited,
            Stage::Refined => p.clock.refined += waited,
        }
        let raw = match result {
            Ok(r) => r,
            Err(e) => return self.fail(p, request_id, format!("model backend failed: {e}")),
        };
        let t0 = Instant::now();
        match prompt.stage {
            Stage::Initial => match check_reply(&prompt, &raw, parse_initial_response) {
                ReplyCheck::Accepted(init) => {
                    p.clock.local += self.elapsed(t0);
                    self.after_initial(now, request_id, p, init);
                }
                ReplyCheck::Retry(next) => self.call_again(now, request_id, p, next, t0),
                ReplyCheck::Failed(e) => self.fail(p, request_id, format!("unusable model reply: {e}")),
            },
            Stage::Refined => {
                let category = p.initial.as_ref().expect("refined after initial").category;
                match check_reply(&prompt, &raw, |s| parse_refined_response(s, category)) {
                    ReplyCheck::Accepted(resp) => {
                        p.clock.local += self.elapsed(t0);
                        self.execute(now, request_id, p, resp);
                    }
                    ReplyCheck::Retry(next) => self.call_again(now, request_id, p, next, t0),
                    ReplyCheck::Failed(e) => self.fail(p, request_id, format!("unusable model reply: {e}")),
                }
            }
        }
    }

    fn call_again(&mut self, now: f64, request_id: RequestId, mut p: Pipeline, next: Prompt, t0: Instant) {
        p.clock.local += self.elapsed(t0);
        p.prompt = Some(next.clone());
        p.clock.started = self.stamp(now);
        self.pipelines.insert(request_id, p);
        self.out.push(Effect::CallBackend { request_id, prompt: next });
    }

    fn fail(&mut self, p: Pipeline, request_id: RequestId, message: String) {
        self.stats.requests_failed += 1;
        self.notice(p.conn, NoticeCode::RequestFailed, message, Some(request_id));
    }

    fn after_initial(&mut self, now: f64, request_id: RequestId, mut p: Pipeline, init: InitialResponse) {
        p.initial = Some(init.clone());
        let Some(rect) = init.crop_area else {
            return self.start_refined(now, request_id, p);
        };
        let Some(frame) = &p.frame_image else {
            self.notice(
                p.conn,
                NoticeCode::DegradedContext,
                "the model asked for image context but no frame was captured; continuing with text only",
                Some(request_id),
            );
            return self.start_refined(now, request_id, p);
        };
        let crop = match crop_frame(frame, &rect) {
            Ok(c) => c,
            Err(e) => {
                self.notice(
                    p.conn,
                    NoticeCode::DegradedContext,
                    format!("requested crop unusable ({e}); continuing with text only"),
                    Some(request_id),
                );
                return self.start_refined(now, request_id, p);
            }
        };
        let labels: Vec<String> = detections_in_crop(&p.detections, &rect)
            .into_iter()
            .map(|d| d.label.clone())
            .collect();
        let pending = self
            .consent
            .request_consent(request_id, labels.clone(), now)
            .expect("one prompt per request");
        let crop_image = base64::engine::general_purpose::STANDARD.encode(crop.to_container());
        p.crop = Some(crop);
        p.phase = Phase::AwaitConsent;
        p.clock.started = self.stamp(now);
        let conn = p.conn;
        self.pipelines.insert(request_id, p);
        self.send(
            conn,
            ControlBody::ConsentPrompt {
                request_id,
                crop: rect,
                detections: labels,
                timeout: pending.deadline - pending.issued_at,
                crop_image: Some(crop_image),
            },
        );
    }

    fn on_consent_reply(&mut self, now: f64, conn: ConnId, user: &UserId, request_id: RequestId, approved: bool) {
        let owned = self
            .pipelines
            .get(&request_id)
            .is_some_and(|p| p.request.user_id == *user && p.phase == Phase::AwaitConsent);
        if !owned {
            self.stats.invalid_messages += 1;
            self.notice(conn, NoticeCode::InvalidMessage, format!("no consent prompt {request_id} for you"), Some(request_id));
            return;
        }
        let decision = self.consent.decide(request_id, approved, now).expect("prompt pending");
        self.after_decision(now, decision);
    }

    fn expire_consent(&mut self, now: f64) {
        for d in self.consent.expire(now) {
            self.after_decision(now, d);
        }
    }

    fn after_decision(&mut self, now: f64, decision: ConsentDecision) {
        let request_id = decision.request_id;
        let Some(mut p) = self.pipelines.remove(&request_id) else {
            return;
        };
        p.clock.confirmation += now - p.clock.started;
        if decision.timed_out {
            self.stats.consent_timeouts += 1;
            self.notice(
                p.conn,
                NoticeCode::ConsentTimeout,
                "no answer to the image prompt; continuing with text only",
                Some(request_id),
            );
        } else if !decision.approved {
            self.notice(
                p.conn,
                NoticeCode::DegradedContext,
                "image not shared; continuing with text only",
                Some(request_id),
            );
        }
        if !decision.approved {
            p.crop = None;
        }
        p.decision = Some(decision);
        self.start_refined(now, request_id, p);
    }

    fn start_refined(&mut self, now: f64, request_id: RequestId, mut p: Pipeline) {
        let t0 = Instant::now();
        let init = p.initial.clone().expect("initial stage done");
        let crop = match (&p.crop, &p.decision) {
            (Some(img), Some(d)) => Some((img, d)),
            _ => None,
        };
        let names = self.state.scene.names();
        let prompt = match build_refined_prompt(&p.request, &init, crop, self.cfg.backend_accepts_images, &names) {
            Ok(pr) => pr,
            Err(e) => return self.fail(p, request_id, e.to_string()),
        };
        p.clock.local += self.elapsed(t0);
        p.phase = Phase::Refined;
        p.prompt = Some(prompt.clone());
        p.clock.started = self.stamp(now);
        self.pipelines.insert(request_id, p);
        self.out.push(Effect::CallBackend { request_id, prompt });
    }

    fn owner_context<'a>(&'a self, p: &'a Pipeline, env_buf: &'a mut Option<EnvironmentMesh>) -> OwnerContext<'a> {
        let own = self.conns.get(&p.conn).and_then(|c| c.environment.as_ref());
        let environment = match own {
            Some(e) => Some(e),
            None => {
                *env_buf = match (&self.cfg.environment, self.reference_to(&p.request.user_id)) {
                    (Some(e), Ok(t)) => Some(e.transformed(&t)),
                    _ => None,
                };
                env_buf.as_ref()
            }
        };
        OwnerContext {
            camera: p.request.camera_at_capture.as_ref(),
            environment,
        }
    }

    fn execute(&mut self, now: f64, request_id: RequestId, p: Pipeline, resp: RefinedResponse) {
        let t0 = Instant::now();
        let planned = match &resp {
            RefinedResponse::ObjectCreation(o) => self.plan_creation(&p, o),
            RefinedResponse::AnimationCreation(a) => self.plan_animation(&p, a),
            RefinedResponse::SceneQueryAnswer(_) => Ok(Mutation::Answer),
        };
        let mutation = match planned {
            Ok(m) => m,
            Err(e) => {
                let code = match e {
                    ServerError::NotRegistered(_) => NoticeCode::NotRegistered,
                    ServerError::NotFound(_) => NoticeCode::NotFound,
                    _ => NoticeCode::RequestFailed,
                };
                self.stats.requests_failed += 1;
                self.notice(p.conn, code, e.to_string(), Some(request_id));
                return;
            }
        };
        // Commit: every check has passed.
        let effect_of = match mutation {
            Mutation::Create(obj) => {
                let id = obj.object_id;
                self.state.ledger.insert_owned(id, p.request.user_id.clone());
                self.state.scene.insert(obj);
                Some((id, None))
            }
            Mutation::Update(obj, action) => {
                let id = obj.object_id;
                self.state.scene.insert(obj);
                Some((id, Some(action)))
            }
            Mutation::Answer => None,
        };
        let mut local = p.clock.local + self.elapsed(t0);
        let t1 = Instant::now();
        for c in self.joined() {
            let effect = match (&effect_of, &resp) {
                (None, RefinedResponse::SceneQueryAnswer(a)) => SceneEffect::Answer {
                    text: a.answer_text.clone(),
                },
                (Some((id, action)), _) => {
                    let Some(view) = self.frame_user(c).and_then(|fu| self.view_for(*id, &fu)) else {
                        self.notice(
                            c,
                            NoticeCode::NotRegistered,
                            "register with the tag to see shared content",
                            Some(request_id),
                        );
                        continue;
                    };
                    match action {
                        None => SceneEffect::Created { object: view },
                        Some(a) => SceneEffect::Animated {
                            object: view,
                            action: a.clone(),
                        },
                    }
                }
                (None, _) => unreachable!("answers come only from answer responses"),
            };
            self.send(
                c,
                ControlBody::ResponseBroadcast {
                    request_id,
                    requester: p.request.user_id.clone(),
                    response: resp.clone(),
                    effect,
                },
            );
        }
        local += self.elapsed(t1);
        self.stats.requests_completed += 1;
        let row = |name: &str, seconds: f64, stubbed: bool| StageTiming {
            name: name.to_owned(),
            seconds,
            stubbed,
        };
        let k = &p.clock;
        let rows = vec![
            row(STAGE_ROWS[0], 0.0, true),
            row(STAGE_ROWS[1], k.initial, false),
            row(STAGE_ROWS[2], k.confirmation, false),
            row(STAGE_ROWS[3], 0.0, true),
            row(STAGE_ROWS[4], k.refined, false),
            row(STAGE_ROWS[5], local, false),
        ];
        let _ = now;
        self.send(p.conn, ControlBody::StageTimings { request_id, rows });
    }

    fn require_registered(&self, user: &UserId) -> Result<(), ServerError> {
        if self.state.registrations.contains(user) {
            Ok(())
        } else {
            Err(ServerError::NotRegistered(format!(
                "{user} must register before placing shared content"
            )))
        }
    }

    fn extents_of(&self, prefab: &str) -> Vec3 {
        self.cfg
            .prefabs
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(prefab))
            .map(|(_, v)| *v)
            .unwrap_or(self.cfg.default_extents)
    }

    fn plan_creation(&self, p: &Pipeline, o: &ObjectCreation) -> Result<Mutation, ServerError> {
        let owner = &p.request.user_id;
        self.require_registered(owner)?;
        let extents = self.extents_of(&o.prefab_name);
        let to_ref = self.to_reference(owner)?;
        let from_ref = to_ref.inverse();
        let parent = match &o.parent_object {
            Some(name) => {
                let id = self
                    .state
                    .scene
                    .find(name)
                    .ok_or_else(|| ServerError::NotFound(format!("no object named {name:?}")))?;
                Some(from_ref.apply_to_pose(&self.state.scene.get(id).expect("found").pose))
            }
            None => None,
        };
        let mut env = None;
        let ctx = self.owner_context(p, &mut env);
        let pose_owner = resolve_pose(o.space, o.position, &extents, &ctx, parent.as_ref())?;
        let object_id = self.state.scene.peek_next_id();
        Ok(Mutation::Create(SceneObject {
            object_id,
            name: format!("{}-{object_id}", o.prefab_name.to_lowercase()),
            prefab_name: o.prefab_name.clone(),
            pose: to_ref.apply_to_pose(&pose_owner),
            extents,
            color: None,
            created_by: owner.clone(),
        }))
    }

    fn plan_animation(&self, p: &Pipeline, a: &AnimationCreation) -> Result<Mutation, ServerError> {
        let owner = &p.request.user_id;
        self.require_registered(owner)?;
        let id = self
            .state
            .scene
            .find(&a.object_name)
            .ok_or_else(|| ServerError::NotFound(format!("no object named {:?}", a.object_name)))?;
        let mut obj = self.state.scene.get(id).expect("found").clone();
        let to_ref = self.to_reference(owner)?;
        let current_owner = to_ref.inverse().apply_to_pose(&obj.pose);
        let action = a.action_type.as_str();
        match action.to_ascii_lowercase().as_str() {
            "moveto" | "move" => {
                let mut env = None;
                let ctx = self.owner_context(p, &mut env);
                let mut target = resolve_pose(a.space, a.position, &obj.extents, &ctx, Some(&current_owner))?;
                if a.space != crate::mllm::Space::Pixel {
                    target.rotation = current_owner.rotation;
                }
                target.scale = current_owner.scale;
                obj.pose = to_ref.apply_to_pose(&target);
            }
            "recolor" | "color" | "setcolor" => {
                let color = a
                    .parameters
                    .get("color")
                    .and_then(|v| v.as_str())
                    .ok_or_else(|| ServerError::Placement("recolor needs parameters.color".into()))?;
                obj.color = Some(color.to_owned());
            }
            "rotate" => {
                let deg = a.parameters.get("degrees").and_then(|v| v.as_f64()).unwrap_or(90.0);
                let q = rotation_about(Vec3::y(), deg) * obj.pose.unit_rotation();
                obj.pose.rotation = q.into_inner();
            }
            "scale" => {
                let f = a
                    .parameters
                    .get("factor")
                    .and_then(|v| v.as_f64())
                    .filter(|f| *f > 0.0 && f.is_finite())
                    .ok_or_else(|| ServerError::Placement("scale needs a positive parameters.factor".into()))?;
                obj.pose.scale *= f;
                obj.extents *= f;
            }
            other => return Err(ServerError::Placement(format!("unsupported action {other:?}"))),
        }
        Ok(Mutation::Update(obj, a.action_type.clone()))
    }

    /// Test and replay hook: the pose a recipient would see for an object.
    pub fn pose_for(&self, object_id: u32, recipient: &UserId) -> Option<Pose> {
        self.view_for(object_id, recipient).map(|v| v.pose)
    }
}

enum Mutation {
    Create(SceneObject),
    Update(SceneObject, String),
    Answer,
}

#[cfg(test)]
mod tests;
