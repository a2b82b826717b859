//! Discrete-event execution of a scenario on a virtual clock.
//!
//! One queue orders every link delivery, client wakeup, model completion and
//! server deadline by `(time, insertion)`, so a run is a pure function of the
//! scenario and its scripts.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::client::ScriptedClient;
use super::log::{ns_to_secs, secs_to_ns, Direction, EventLog, LogEvent, LoggedConfig, LoggedInput, LOG_VERSION};
use super::report::{bandwidth_account, BandwidthReport, LatencyReport};
use super::scenario::Scenario;
use super::SimError;
use crate::colocation::UserId;
use crate::geometry::{EnvironmentMesh, Vec3};
use crate::mllm::{timed_call, MllmError, MockBackend, ModelBackend, Prompt, RetryPolicy};
use crate::privacy::{Detector, MockDetector, RequestId};
use crate::protocol::{ControlBody, Envelope, Frame, FrameType, NoticeCode};
use crate::server::{ConnId, Effect, Input, Session, SessionConfig, SessionStats};
use crate::sync::decode_batch;

/// Where model calls go during a run.
#[derive(Clone)]
pub enum ModelSource {
    /// Scripted replies; their delays advance the virtual clock.
    Mock(Arc<MockBackend>),
    /// A real backend; its measured wall time advances the virtual clock.
    Live(Arc<dyn ModelBackend>),
    /// Every call fails.
    Unavailable,
}

impl ModelSource {
    pub fn accepts_images(&self) -> bool {
        match self {
            Self::Mock(m) => m.accepts_images(),
            Self::Live(b) => b.accepts_images(),
            Self::Unavailable => false,
        }
    }

    /// Reply and simulated latency, with transport retries per `policy`.
    pub fn call(&self, prompt: &Prompt, policy: &RetryPolicy) -> (Result<String, MllmError>, Duration) {
        match self {
            Self::Mock(m) => {
                let mut spent = Duration::ZERO;
                let mut last = String::new();
                for attempt in 1..=policy.max_attempts() {
                    if attempt > 1 {
                        spent += policy.backoff[attempt as usize - 2];
                    }
                    let r = m.respond(prompt);
                    spent += r.delay;
                    match r.result {
                        Err(MllmError::Transport(msg)) => last = msg,
                        other => return (other, spent),
                    }
                }
                let err = MllmError::Backend {
                    attempts: policy.max_attempts(),
                    message: last,
                };
                (Err(err), spent)
            }
            Self::Live(b) => {
                let t0 = std::time::Instant::now();
                let r = timed_call(b.as_ref(), prompt, policy).map(|t| t.raw);
                (r, t0.elapsed())
            }
            Self::Unavailable => (Err(MllmError::Transport("no model backend configured".into())), Duration::ZERO),
        }
    }
}

/// Everything outside the server that a run depends on.
#[derive(Clone)]
pub struct SimServices {
    pub model: ModelSource,
    pub detector: Arc<dyn Detector>,
    pub retry: RetryPolicy,
    pub session: SessionConfig,
}

impl SimServices {
    /// Mock backend and detector as named by the scenario.
    pub fn from_scenario(s: &Scenario) -> Result<Self, SimError> {
        let model = match &s.server.mock_script {
            Some(p) => ModelSource::Mock(Arc::new(MockBackend::load(p).map_err(|e| SimError::Scenario(e.to_string()))?)),
            None => ModelSource::Unavailable,
        };
        let detector: Arc<dyn Detector> = match &s.server.detector_script {
            Some(p) => Arc::new(MockDetector::load(p).map_err(|e| SimError::Scenario(e.to_string()))?),
            None => Arc::new(MockDetector::new()),
        };
        let environment = s
            .server
            .environment
            .as_ref()
            .map(EnvironmentMesh::load)
            .transpose()
            .map_err(|e| SimError::Scenario(e.to_string()))?;
        let session = SessionConfig {
            session_id: s.server.session_id.clone(),
            consent_timeout: s.server.consent_timeout,
            backend_accepts_images: model.accepts_images(),
            prefabs: s.server.prefabs.iter().map(|(k, v)| (k.clone(), Vec3::from(*v))).collect(),
            environment,
            measure_compute: false,
            ..SessionConfig::default()
        };
        Ok(Self {
            model,
            detector,
            retry: RetryPolicy::default(),
            session,
        })
    }

    pub fn with_model(mut self, model: ModelSource) -> Self {
        self.session.backend_accepts_images = model.accepts_images();
        self.model = model;
        self
    }
}

/// Compares an owner's pose with an observer's mirror at every owner tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StalenessProbe {
    pub owner: String,
    pub observer: String,
    pub object: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StalenessSample {
    pub t: f64,
    /// Meters, in the observer's frame.
    pub error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub probe: Option<StalenessProbe>,
}

/// What reached the model backend, checked against consent seen on the wire.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UploadAudit {
    pub uploads: usize,
    pub with_image: usize,
    /// Image uploads without a matching, timely approval from the requester.
    pub violations: Vec<RequestId>,
    pub approvals: usize,
    pub rejections: usize,
    pub timeouts: usize,
}

#[derive(Default)]
struct ConsentOracle {
    requester: BTreeMap<RequestId, ConnId>,
    approved: BTreeSet<RequestId>,
    timed_out: BTreeSet<RequestId>,
    audit: UploadAudit,
}

impl ConsentOracle {
    fn uplink(&mut self, conn: ConnId, frame: &Frame) {
        let Ok(env) = Envelope::from_frame(frame) else { return };
        if let ControlBody::ConsentReply { request_id, approved } = env.body {
            let from_requester = self.requester.get(&request_id) == Some(&conn);
            if approved && from_requester && !self.timed_out.contains(&request_id) {
                self.approved.insert(request_id);
                self.audit.approvals += 1;
            } else if !approved && from_requester {
                self.audit.rejections += 1;
            }
        }
    }

    fn downlink(&mut self, conn: ConnId, frame: &Frame) {
        let Ok(env) = Envelope::from_frame(frame) else { return };
        match env.body {
            ControlBody::RequestAccepted { request_id, .. } => {
                self.requester.insert(request_id, conn);
            }
            ControlBody::Notice {
                code: NoticeCode::ConsentTimeout,
                request_id: Some(id),
                ..
            }
                if self.timed_out.insert(id) => {
                    self.audit.timeouts += 1;
                }
            _ => {}
        }
    }

    fn upload(&mut self, request_id: RequestId, prompt: &Prompt) {
        self.audit.uploads += 1;
        if let Some(att) = &prompt.attachment {
            self.audit.with_image += 1;
            if att.request_id() != request_id || !self.approved.contains(&request_id) {
                self.audit.violations.push(request_id);
            }
        }
    }
}

#[derive(Debug)]
enum Ev {
    Join(usize),
    Wake(usize, f64),
    ToServer(Input),
    ToClient(usize, Frame),
    ServerTick,
}

pub struct SimOutcome {
    pub log: EventLog,
    pub report: LatencyReport,
    pub bandwidth: BandwidthReport,
    pub digest: String,
    pub stats: SessionStats,
    pub uploads: UploadAudit,
    pub staleness: Vec<StalenessSample>,
    pub clients: Vec<ScriptedClient>,
    pub session: Session,
}

struct Sim<'a> {
    scenario: &'a Scenario,
    services: &'a SimServices,
    probe: Option<(usize, usize, StalenessProbe)>,
    latency: u64,
    now: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Ev>,
    session: Session,
    clients: Vec<ScriptedClient>,
    gone: Vec<bool>,
    wakes: Vec<Option<u64>>,
    server_wake: Option<u64>,
    log: EventLog,
    oracle: ConsentOracle,
    staleness: Vec<StalenessSample>,
}

fn conn_of(ci: usize) -> ConnId {
    ci as ConnId + 1
}

impl<'a> Sim<'a> {
    fn push(&mut self, t: u64, ev: Ev) {
        self.seq += 1;
        self.queue.insert((t, self.seq), ev);
    }

    fn record_deliver(&mut self, conn: ConnId, dir: Direction, frame: &Frame) {
        let records = if frame.kind == FrameType::Sync {
            decode_batch(&frame.payload)
                .map(|v| v.iter().map(|r| r.object_id).collect())
                .unwrap_or_default()
        } else {
            Vec::new()
        };
        self.log.push(LogEvent::Deliver {
            t: self.now,
            conn,
            dir,
            frame_type: frame.kind as u8,
            wire_bytes: frame.wire_len(),
            records,
        });
    }

    fn client_send(&mut self, ci: usize, frames: Vec<Frame>) {
        let conn = conn_of(ci);
        for f in frames {
            self.record_deliver(conn, Direction::Uplink, &f);
            let at = self.now + self.latency;
            self.push(at, Ev::ToServer(Input::Frame { conn, frame: f }));
        }
    }

    fn reschedule_client(&mut self, ci: usize) {
        let next = if self.gone[ci] { None } else { self.clients[ci].next_wakeup() };
        let ns = next.map(|w| secs_to_ns(w).max(self.now));
        if ns != self.wakes[ci] {
            self.wakes[ci] = ns;
            if let (Some(t), Some(w)) = (ns, next) {
                self.push(t, Ev::Wake(ci, w));
            }
        }
    }

    fn server(&mut self, input: Input) {
        if let Input::Frame { conn, frame } = &input {
            if frame.kind == FrameType::Control {
                self.oracle.uplink(*conn, frame);
            }
        }
        self.log.push(LogEvent::Input {
            t: self.now,
            input: LoggedInput::from_input(&input),
        });
        let effects = self.session.handle(ns_to_secs(self.now), input);
        for e in effects {
            match e {
                Effect::Send { conn, frame } => {
                    if frame.kind == FrameType::Control {
                        self.oracle.downlink(conn, &frame);
                    }
                    self.record_deliver(conn, Direction::Downlink, &frame);
                    let ci = (conn - 1) as usize;
                    let at = self.now + self.latency;
                    self.push(at, Ev::ToClient(ci, frame));
                }
                Effect::CallBackend { request_id, prompt } => {
                    self.oracle.upload(request_id, &prompt);
                    self.log.push(LogEvent::Upload {
                        t: self.now,
                        request_id,
                        stage: prompt.stage.as_str().to_owned(),
                        attempt: prompt.attempt,
                        with_image: prompt.attachment.is_some(),
                    });
                    let (result, delay) = self.services.model.call(&prompt, &self.services.retry);
                    let at = self.now + delay.as_nanos() as u64;
                    self.push(at, Ev::ToServer(Input::BackendCompleted { request_id, result }));
                }
                Effect::Detect { request_id, frame_ref } => {
                    let result = self.services.detector.detect(&frame_ref);
                    let at = self.now;
                    self.push(at, Ev::ToServer(Input::DetectionCompleted { request_id, result }));
                }
            }
        }
        match self.session.next_deadline() {
            Some(d) => {
                let t = (secs_to_ns(d) + 1).max(self.now + 1);
                if self.server_wake != Some(t) {
                    self.server_wake = Some(t);
                    self.push(t, Ev::ServerTick);
                }
            }
            None => self.server_wake = None,
        }
    }

    fn sample_staleness(&mut self, ci: usize) {
        let Some((owner, observer, probe)) = &self.probe else { return };
        if ci != *owner {
            return;
        }
        let (o, w) = (&self.clients[*owner], &self.clients[*observer]);
        let (Some(id), Some(_)) = (o.object_id(&probe.object), w.object_id(&probe.object)) else {
            return;
        };
        if !o.replica().is_owned_locally(id) {
            return;
        }
        let Ok(a) = self
            .session
            .state()
            .registrations
            .alignment(o.user(), &UserId::new(probe.observer.clone()))
        else {
            return;
        };
        let (Some(po), Some(pw)) = (o.replica().get(id), w.replica().get(id)) else {
            return;
        };
        let truth = a.transform.apply_to_point(&po.pose.position);
        self.staleness.push(StalenessSample {
            t: ns_to_secs(self.now),
            error: (truth - pw.pose.position).norm(),
        });
    }

    fn run(mut self) -> Result<SimOutcome, SimError> {
        let end = secs_to_ns(self.scenario.duration);
        for ci in 0..self.clients.len() {
            let t = secs_to_ns(self.clients[ci].spec().join_at);
            self.push(t, Ev::Join(ci));
        }
        while let Some(((t, _), ev)) = self.queue.pop_first() {
            if t > end {
                break;
            }
            self.now = t;
            match ev {
                Ev::Join(ci) => {
                    let conn = conn_of(ci);
                    self.push(t + self.latency, Ev::ToServer(Input::Connected { conn }));
                    let hello = self.clients[ci].hello();
                    self.client_send(ci, vec![hello]);
                    self.reschedule_client(ci);
                }
                Ev::Wake(ci, w) => {
                    if self.wakes[ci] != Some(t) || self.gone[ci] {
                        continue;
                    }
                    self.wakes[ci] = None;
                    let at = w.max(ns_to_secs(t));
                    let (frames, bye) = self.clients[ci].poll(at);
                    self.client_send(ci, frames);
                    self.sample_staleness(ci);
                    if bye {
                        self.gone[ci] = true;
                        let conn = conn_of(ci);
                        self.push(t + self.latency, Ev::ToServer(Input::Disconnected { conn }));
                    }
                    self.reschedule_client(ci);
                }
                Ev::ToServer(input) => self.server(input),
                Ev::ToClient(ci, frame) => {
                    if self.gone[ci] {
                        continue;
                    }
                    let replies = self.clients[ci].on_frame(ns_to_secs(t), &frame);
                    self.client_send(ci, replies);
                    self.reschedule_client(ci);
                }
                Ev::ServerTick => {
                    if self.server_wake == Some(t) {
                        self.server_wake = None;
                        self.server(Input::Tick);
                    }
                }
            }
        }
        let digest = self.session.state().digest();
        let stats = self.session.stats().clone();
        self.log.push(LogEvent::Final {
            t: end,
            digest: digest.clone(),
            stats: stats.clone(),
        });
        Ok(SimOutcome {
            report: LatencyReport::from_clients(&self.clients),
            bandwidth: bandwidth_account(&self.log),
            log: self.log,
            digest,
            stats,
            uploads: self.oracle.audit,
            staleness: self.staleness,
            clients: self.clients,
            session: self.session,
        })
    }
}

/// Runs a scenario to completion on the virtual clock.
pub fn run_virtual(scenario: &Scenario, services: &SimServices, options: &RunOptions) -> Result<SimOutcome, SimError> {
    scenario.validate()?;
    let clients: Vec<ScriptedClient> = scenario
        .clients
        .iter()
        .map(|c| {
            ScriptedClient::new(
                c.clone(),
                &services.session.session_id,
                scenario.policy,
                scenario.tick_hz,
                scenario.noise,
            )
        })
        .collect();
    let index = |id: &str| {
        scenario
            .clients
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| SimError::Scenario(format!("probe names unknown client {id:?}")))
    };
    let probe = match &options.probe {
        Some(p) => Some((index(&p.owner)?, index(&p.observer)?, p.clone())),
        None => None,
    };
    let mut log = EventLog::default();
    log.push(LogEvent::Header {
        version: LOG_VERSION,
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        config: LoggedConfig::from_config(&services.session),
        clients: scenario
            .clients
            .iter()
            .enumerate()
            .map(|(i, c)| (conn_of(i), c.id.clone()))
            .collect(),
    });
    let n = clients.len();
    Sim {
        scenario,
        services,
        probe,
        latency: secs_to_ns(scenario.link_latency),
        now: 0,
        seq: 0,
        queue: BTreeMap::new(),
        session: Session::new(services.session.clone()),
        clients,
        gone: vec![false; n],
        wakes: vec![None; n],
        server_wake: None,
        log,
        oracle: ConsentOracle::default(),
        staleness: Vec::new(),
    }
    .run()
}
