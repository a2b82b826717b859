use super::*;
use crate::colocation::TagObservation;
use crate::geometry::Quat;
use crate::sync::{encode_batch, SyncRecord, EVENT_DESTROYED};

struct Rig {
    s: Session,
    seqs: BTreeMap<ConnId, u64>,
    now: f64,
}

impl Rig {
    fn new() -> Self {
        let cfg = SessionConfig {
            measure_compute: false,
            consent_timeout: 10.0,
            environment: Some(EnvironmentMesh::floor(0.0, 50.0)),
            ..SessionConfig::default()
        };
        Self {
            s: Session::new(cfg),
            seqs: BTreeMap::new(),
            now: 0.0,
        }
    }

    fn input(&mut self, i: Input) -> Vec<Effect> {
        self.now += 0.01;
        self.s.handle(self.now, i)
    }

    fn send(&mut self, conn: ConnId, user: &str, body: ControlBody) -> Vec<Effect> {
        let seq = self.seqs.entry(conn).or_insert(0);
        *seq += 1;
        let env = Envelope {
            session_id: "session-1".into(),
            sender_id: UserId::from(user),
            seq: *seq,
            body,
        };
        self.input(Input::Frame {
            conn,
            frame: env.to_frame(),
        })
    }

    fn join(&mut self, conn: ConnId, user: &str) -> Vec<Effect> {
        self.input(Input::Connected { conn });
        self.send(
            conn,
            user,
            ControlBody::Hello {
                keyword: None,
                pseudo_for: None,
                environment: None,
            },
        )
    }

    fn register(&mut self, conn: ConnId, user: &str, tag_pose: Pose) -> Vec<Effect> {
        self.send(
            conn,
            user,
            ControlBody::RegisterRequest {
                observation: Some(TagObservation {
                    tag_id: 0,
                    tag_pose,
                    tag_size_meters: 0.16,
                    observation_distance: 1.0,
                    timestamp: 0.0,
                }),
            },
        )
    }
}

fn bodies(effects: &[Effect], conn: ConnId) -> Vec<ControlBody> {
    effects
        .iter()
        .filter_map(|e| match e {
            Effect::Send { conn: c, frame } if *c == conn && frame.kind == FrameType::Control => {
                Some(Envelope::from_frame(frame).unwrap().body)
            }
            _ => None,
        })
        .collect()
}

fn notices(effects: &[Effect], conn: ConnId) -> Vec<NoticeCode> {
    bodies(effects, conn)
        .into_iter()
        .filter_map(|b| match b {
            ControlBody::Notice { code, .. } => Some(code),
            _ => None,
        })
        .collect()
}

fn backend_calls(effects: &[Effect]) -> Vec<(RequestId, Prompt)> {
    effects
        .iter()
        .filter_map(|e| match e {
            Effect::CallBackend { request_id, prompt } => Some((*request_id, prompt.clone())),
            _ => None,
        })
        .collect()
}

fn tag_b() -> Pose {
    // User B's world is rotated 90 degrees and shifted relative to A's.
    Pose::new(Vec3::new(2.0, 0.0, -1.0), crate::geometry::rotation_about(Vec3::y(), 90.0), Vec3::new(1.0, 1.0, 1.0))
}

/// Two registered users. A is the reference.
fn two_users() -> Rig {
    let mut r = Rig::new();
    r.join(1, "a");
    r.join(2, "b");
    r.register(1, "a", Pose::identity());
    r.register(2, "b", tag_b());
    r
}

fn user_text(text: &str) -> ControlBody {
    ControlBody::UserText {
        text: text.into(),
        frame_ref: None,
        camera: None,
        frame_image: None,
    }
}

/// Runs a text-only request through both stages with the given replies.
fn run_request(r: &mut Rig, conn: ConnId, user: &str, text: &str, initial: &str, refined: &str) -> Vec<Effect> {
    let e = r.send(conn, user, user_text(text));
    let (id, _) = backend_calls(&e)[0].clone();
    let e = r.input(Input::BackendCompleted {
        request_id: id,
        result: Ok(initial.into()),
    });
    let calls = backend_calls(&e);
    assert_eq!(calls.len(), 1, "refined stage starts: {e:?}");
    r.input(Input::BackendCompleted {
        request_id: id,
        result: Ok(refined.into()),
    })
}

const CREATE_INIT: &str = r#"{"category":"objectCreation","CropArea":"None"}"#;
const CREATE_CUBE: &str = r#"{"prefabName":"Cube","space":"world","position":[1,0.5,-2]}"#;

#[test]
fn keyword_clash_is_reassigned() {
    let mut r = Rig::new();
    r.input(Input::Connected { conn: 1 });
    r.input(Input::Connected { conn: 2 });
    let hello = |k: &str| ControlBody::Hello {
        keyword: Some(k.into()),
        pseudo_for: None,
        environment: None,
    };
    r.send(1, "a", hello("alpha"));
    let e = r.send(2, "b", hello("alpha"));
    let b = bodies(&e, 2);
    assert!(matches!(&b[0], ControlBody::Welcome { keyword, keyword_reassigned: true, .. } if keyword == "alpha-2"));
    assert_eq!(notices(&e, 2), vec![NoticeCode::KeywordReassigned]);
}

#[test]
fn messages_before_hello_and_stale_seq_are_rejected() {
    let mut r = Rig::new();
    r.input(Input::Connected { conn: 1 });
    let e = r.send(1, "a", ControlBody::Claim { object_id: 1 });
    assert_eq!(notices(&e, 1), vec![NoticeCode::InvalidMessage]);
    r.send(
        1,
        "a",
        ControlBody::Hello {
            keyword: None,
            pseudo_for: None,
            environment: None,
        },
    );
    *r.seqs.get_mut(&1).unwrap() = 1;
    let e = r.send(1, "a", ControlBody::Claim { object_id: 1 });
    assert_eq!(notices(&e, 1), vec![NoticeCode::SequenceViolation]);
    assert_eq!(r.s.stats().sequence_violations, 1);
}

#[test]
fn registration_sends_result_alignments_and_snapshot() {
    let mut r = Rig::new();
    r.join(1, "a");
    r.join(2, "b");
    let e = r.register(1, "a", Pose::identity());
    let b = bodies(&e, 1);
    assert!(matches!(&b[0], ControlBody::RegisterResult { success: true, reference_user: Some(u), .. } if u.as_str() == "a"));
    let e = r.register(2, "b", tag_b());
    let b = bodies(&e, 2);
    let ControlBody::Alignments { transforms } = &b[1] else { panic!("{b:?}") };
    let t = &transforms[&UserId::from("a")];
    // A's tag origin lands on B's tag position.
    assert!((t.apply_to_point(&Vec3::zeros()) - tag_b().position).norm() < 1e-9);
    assert!(matches!(b[2], ControlBody::SceneSnapshot { .. }));
    // A also receives fresh alignments.
    assert!(bodies(&e, 1).iter().any(|b| matches!(b, ControlBody::Alignments { .. })));
}

#[test]
fn failed_registration_asks_to_retry() {
    let mut r = Rig::new();
    r.join(1, "a");
    let e = r.send(1, "a", ControlBody::RegisterRequest { observation: None });
    let b = bodies(&e, 1);
    assert!(matches!(&b[0], ControlBody::RegisterResult { success: false, message: Some(m), .. } if m.contains("try again")));
    assert!(r.s.state().registrations.is_empty());
}

#[test]
fn creation_is_broadcast_in_each_frame() {
    let mut r = two_users();
    let e = run_request(&mut r, 1, "a", "put a cube there", CREATE_INIT, CREATE_CUBE);
    let view = |conn| {
        bodies(&e, conn)
            .into_iter()
            .find_map(|b| match b {
                ControlBody::ResponseBroadcast {
                    effect: SceneEffect::Created { object },
                    ..
                } => Some(object),
                _ => None,
            })
            .unwrap()
    };
    let (va, vb) = (view(1), view(2));
    assert_eq!(va.pose.position, Vec3::new(1.0, 0.5, -2.0));
    let expected_b = tag_b().rigid().apply_to_point(&Vec3::new(1.0, 0.5, -2.0));
    assert!((vb.pose.position - expected_b).norm() < 1e-9);
    assert_eq!(va.owner, Some(UserId::from("a")));
    assert_eq!(va.epoch, 1);
    let timings = bodies(&e, 1)
        .into_iter()
        .find_map(|b| match b {
            ControlBody::StageTimings { rows, .. } => Some(rows),
            _ => None,
        })
        .unwrap();
    assert_eq!(timings.len(), 6);
    assert!(timings[1].seconds > 0.0 && timings[4].seconds > 0.0);
    assert!(timings[0].stubbed && timings[3].stubbed);
    assert!(bodies(&e, 2).iter().all(|b| !matches!(b, ControlBody::StageTimings { .. })));
    assert_eq!(r.s.stats().requests_completed, 1);
}

#[test]
fn repeated_creations_get_distinct_ids() {
    let mut r = two_users();
    run_request(&mut r, 1, "a", "a cube", CREATE_INIT, CREATE_CUBE);
    run_request(&mut r, 1, "a", "another cube", CREATE_INIT, CREATE_CUBE);
    assert_eq!(r.s.state().scene.names(), vec!["cube-1".to_string(), "cube-2".to_string()]);
    assert_eq!(r.s.state().ledger.len(), 2);
}

#[test]
fn creation_by_b_is_stored_in_reference_frame() {
    let mut r = two_users();
    run_request(&mut r, 2, "b", "cube", CREATE_INIT, CREATE_CUBE);
    let obj = r.s.state().scene.iter().next().unwrap();
    let back = tag_b().rigid().apply_to_pose(&obj.pose);
    assert!((back.position - Vec3::new(1.0, 0.5, -2.0)).norm() < 1e-9);
}

#[test]
fn unregistered_requester_changes_nothing() {
    let mut r = Rig::new();
    r.join(1, "a");
    r.join(2, "b");
    r.register(2, "b", Pose::identity());
    let before = r.s.state().clone();
    let e = run_request(&mut r, 1, "a", "cube", CREATE_INIT, CREATE_CUBE);
    assert_eq!(notices(&e, 1), vec![NoticeCode::NotRegistered]);
    assert_eq!(*r.s.state(), before);
    assert!(bodies(&e, 2).is_empty());
}

#[test]
fn unregistered_recipient_gets_notice_instead_of_content() {
    let mut r = Rig::new();
    r.join(1, "a");
    r.join(2, "b");
    r.register(1, "a", Pose::identity());
    let e = run_request(&mut r, 1, "a", "cube", CREATE_INIT, CREATE_CUBE);
    assert_eq!(notices(&e, 2), vec![NoticeCode::NotRegistered]);
    assert!(bodies(&e, 1).iter().any(|b| matches!(b, ControlBody::ResponseBroadcast { .. })));
}

#[test]
fn schema_failure_reprompts_once_then_fails_atomically() {
    let mut r = two_users();
    let e = r.send(1, "a", user_text("cube"));
    let (id, _) = backend_calls(&e)[0].clone();
    let e = r.input(Input::BackendCompleted {
        request_id: id,
        result: Ok("not json".into()),
    });
    let calls = backend_calls(&e);
    assert_eq!(calls[0].1.attempt, 2);
    let before = r.s.state().clone();
    let e = r.input(Input::BackendCompleted {
        request_id: id,
        result: Ok("{}".into()),
    });
    assert_eq!(notices(&e, 1), vec![NoticeCode::RequestFailed]);
    assert_eq!(*r.s.state(), before);
    assert_eq!(r.s.in_flight(), 0);
}

#[test]
fn animations_update_named_object() {
    let mut r = two_users();
    run_request(&mut r, 1, "a", "cube", CREATE_INIT, CREATE_CUBE);
    let anim_init = r#"{"category":"animationCreation","CropArea":"None"}"#;
    let recolor = r#"{"actionType":"recolor","objectName":"cube","space":"world","position":[0,0,0],"parameters":{"color":"red"}}"#;
    let e = run_request(&mut r, 2, "b", "make it red", anim_init, recolor);
    assert!(bodies(&e, 1)
        .iter()
        .any(|b| matches!(b, ControlBody::ResponseBroadcast { effect: SceneEffect::Animated { action, .. }, .. } if action == "recolor")));
    assert_eq!(r.s.state().scene.iter().next().unwrap().color.as_deref(), Some("red"));
    let mv = r#"{"actionType":"moveTo","objectName":"cube-1","space":"world","position":[3,0,3]}"#;
    run_request(&mut r, 1, "a", "move", anim_init, mv);
    assert_eq!(r.s.state().scene.get(1).unwrap().pose.position, Vec3::new(3.0, 0.0, 3.0));
    let missing = r#"{"actionType":"rotate","objectName":"ghost","space":"world","position":[0,0,0]}"#;
    let before = r.s.state().clone();
    let e = run_request(&mut r, 1, "a", "spin", anim_init, missing);
    assert_eq!(notices(&e, 1), vec![NoticeCode::NotFound]);
    assert_eq!(*r.s.state(), before);
}

#[test]
fn answers_go_to_everyone() {
    let mut r = two_users();
    let init = r#"{"category":"sceneQuery","CropArea":"None"}"#;
    let e = run_request(&mut r, 1, "a", "what is here", init, r#"{"answerText":"a desk"}"#);
    for c in [1, 2] {
        assert!(bodies(&e, c)
            .iter()
            .any(|b| matches!(b, ControlBody::ResponseBroadcast { effect: SceneEffect::Answer { text }, .. } if text == "a desk")));
    }
}

fn with_cube() -> Rig {
    let mut r = two_users();
    run_request(&mut r, 1, "a", "cube", CREATE_INIT, CREATE_CUBE);
    r
}

fn sync_frame(id: u32, pos: Vec3, events: u32) -> Frame {
    Frame::sync(encode_batch(&[SyncRecord::from_pose(id, &Pose::from_position(pos), events)]))
}

#[test]
fn owner_sync_is_forwarded_and_non_owner_dropped() {
    let mut r = with_cube();
    let f = sync_frame(1, Vec3::new(0.0, 1.0, 0.0), 0);
    let e = r.input(Input::Frame { conn: 1, frame: f.clone() });
    assert_eq!(e, vec![Effect::Send { conn: 2, frame: f }]);
    assert_eq!(r.s.state().scene.get(1).unwrap().pose.position, Vec3::new(0.0, 1.0, 0.0));
    let e = r.input(Input::Frame {
        conn: 2,
        frame: sync_frame(1, Vec3::new(9.0, 9.0, 9.0), 0),
    });
    assert!(e.is_empty());
    assert_eq!(r.s.stats().dropped_non_owner, 1);
}

#[test]
fn malformed_batch_counts_framing_error() {
    let mut r = with_cube();
    let e = r.input(Input::Frame {
        conn: 1,
        frame: Frame::sync(vec![0; 47]),
    });
    assert_eq!(notices(&e, 1), vec![NoticeCode::FramingError]);
    assert_eq!(r.s.stats().framing_errors, 1);
}

#[test]
fn claim_transfers_and_notifies() {
    let mut r = with_cube();
    let e = r.send(2, "b", ControlBody::Claim { object_id: 1 });
    assert_eq!(notices(&e, 1), vec![NoticeCode::OwnershipLost]);
    assert_eq!(notices(&e, 2), vec![NoticeCode::OwnershipGranted]);
    for c in [1, 2] {
        assert!(bodies(&e, c)
            .iter()
            .any(|b| matches!(b, ControlBody::OwnershipChanged { epoch: 2, .. })));
    }
    assert!(r.s.state().ledger.is_owner(&UserId::from("b"), 1));
    // Reclaiming is a no-op; unknown objects are reported.
    assert!(r.send(2, "b", ControlBody::Claim { object_id: 1 }).is_empty());
    let e = r.send(2, "b", ControlBody::Claim { object_id: 99 });
    assert_eq!(notices(&e, 2), vec![NoticeCode::NotFound]);
}

#[test]
fn destroy_event_removes_object() {
    let mut r = with_cube();
    r.input(Input::Frame {
        conn: 1,
        frame: sync_frame(1, Vec3::zeros(), EVENT_DESTROYED),
    });
    assert!(r.s.state().scene.is_empty());
    assert!(r.s.state().ledger.is_empty());
}

#[test]
fn disconnect_releases_ownership_but_keeps_registration() {
    let mut r = with_cube();
    let e = r.input(Input::Disconnected { conn: 1 });
    assert!(bodies(&e, 2)
        .iter()
        .any(|b| matches!(b, ControlBody::OwnershipChanged { owner: None, .. })));
    assert_eq!(r.s.state().ledger.owner_of(1), None);
    assert!(r.s.state().registrations.contains(&UserId::from("a")));
    // The keyword is free again.
    r.input(Input::Connected { conn: 3 });
    let e = r.send(
        3,
        "c",
        ControlBody::Hello {
            keyword: Some("a".into()),
            pseudo_for: None,
            environment: None,
        },
    );
    assert!(matches!(&bodies(&e, 3)[0], ControlBody::Welcome { keyword_reassigned: false, .. }));
}

#[test]
fn pseudo_user_sees_host_frame_and_cannot_send() {
    let mut r = with_cube();
    r.input(Input::Connected { conn: 9 });
    let e = r.send(
        9,
        "b-view",
        ControlBody::Hello {
            keyword: None,
            pseudo_for: Some(UserId::from("b")),
            environment: None,
        },
    );
    let snap = bodies(&e, 9)
        .into_iter()
        .find_map(|b| match b {
            ControlBody::SceneSnapshot { objects } => Some(objects),
            _ => None,
        })
        .unwrap();
    assert_eq!(snap[0].pose, r.s.pose_for(1, &UserId::from("b")).unwrap());
    let e = r.send(9, "b-view", ControlBody::Claim { object_id: 1 });
    assert_eq!(notices(&e, 9), vec![NoticeCode::InvalidMessage]);
}

#[test]
fn reference_reregistration_keeps_objects_on_the_tag() {
    let mut r = with_cube();
    let seen_by_b = r.s.pose_for(1, &UserId::from("b")).unwrap();
    let moved = Pose::new(Vec3::new(0.5, 0.0, 0.5), Quat::identity(), Vec3::new(1.0, 1.0, 1.0));
    r.register(1, "a", moved);
    let now_b = r.s.pose_for(1, &UserId::from("b")).unwrap();
    assert!((now_b.position - seen_by_b.position).norm() < 1e-9);
}

fn frame_with_crop(r: &mut Rig) -> RequestId {
    let img = ImageBuffer::pattern(64, 48, 3, 1);
    let b64 = base64::engine::general_purpose::STANDARD.encode(img.to_container());
    let e = r.send(
        1,
        "a",
        ControlBody::UserText {
            text: "what is this".into(),
            frame_ref: Some("f1".into()),
            camera: Some(CameraModel::new(Pose::identity(), 90.0, 64, 48)),
            frame_image: Some(b64),
        },
    );
    let id = e
        .iter()
        .find_map(|x| match x {
            Effect::Detect { request_id, .. } => Some(*request_id),
            _ => None,
        })
        .unwrap();
    r.input(Input::DetectionCompleted {
        request_id: id,
        result: Ok(vec![Detection::new("monitor", (10.0, 10.0), crate::privacy::BBox::new(0.0, 0.0, 20.0, 20.0), 0.9)]),
    });
    let e = r.input(Input::BackendCompleted {
        request_id: id,
        result: Ok(r#"{"category":"sceneQuery","CropArea":[0,0,32,24]}"#.into()),
    });
    let prompt = bodies(&e, 1)
        .into_iter()
        .find_map(|b| match b {
            ControlBody::ConsentPrompt { detections, crop_image, .. } => Some((detections, crop_image)),
            _ => None,
        })
        .unwrap();
    assert_eq!(prompt.0, vec!["monitor".to_string()]);
    assert!(prompt.1.is_some());
    assert!(backend_calls(&e).is_empty(), "nothing leaves before consent");
    id
}

#[test]
fn approved_crop_is_attached() {
    let mut r = two_users();
    let id = frame_with_crop(&mut r);
    let e = r.send(1, "a", ControlBody::ConsentReply { request_id: id, approved: true });
    let calls = backend_calls(&e);
    let att = calls[0].1.attachment.as_ref().unwrap();
    assert_eq!((att.image().width, att.image().height), (32, 24));
}

#[test]
fn rejected_or_expired_consent_continues_text_only() {
    let mut r = two_users();
    let id = frame_with_crop(&mut r);
    let e = r.send(1, "a", ControlBody::ConsentReply { request_id: id, approved: false });
    assert_eq!(notices(&e, 1), vec![NoticeCode::DegradedContext]);
    assert!(backend_calls(&e)[0].1.attachment.is_none());

    let id = frame_with_crop(&mut r);
    assert!(r.s.next_deadline().is_some());
    r.now += 11.0;
    let e = r.input(Input::Tick);
    assert_eq!(notices(&e, 1), vec![NoticeCode::ConsentTimeout]);
    let calls = backend_calls(&e);
    assert_eq!(calls[0].0, id);
    assert!(calls[0].1.attachment.is_none());
    assert_eq!(r.s.stats().consent_timeouts, 1);
    // A late reply is refused.
    let e = r.send(1, "a", ControlBody::ConsentReply { request_id: id, approved: true });
    assert_eq!(notices(&e, 1), vec![NoticeCode::InvalidMessage]);
}

#[test]
fn pixel_creation_uses_requester_camera() {
    let mut r = two_users();
    let cam = CameraModel::new(
        Pose::new(Vec3::new(0.0, 1.6, 0.0), crate::geometry::rotation_about(Vec3::x(), -45.0), Vec3::new(1.0, 1.0, 1.0)),
        90.0,
        640,
        480,
    );
    let e = r.send(
        1,
        "a",
        ControlBody::UserText {
            text: "cube there".into(),
            frame_ref: Some("f2".into()),
            camera: Some(cam),
            frame_image: None,
        },
    );
    assert!(matches!(e.last(), Some(Effect::Detect { .. })));
    let id = RequestId(1);
    let e = r.input(Input::DetectionCompleted { request_id: id, result: Ok(vec![]) });
    assert_eq!(backend_calls(&e).len(), 1);
    r.input(Input::BackendCompleted {
        request_id: id,
        result: Ok(CREATE_INIT.into()),
    });
    r.input(Input::BackendCompleted {
        request_id: id,
        result: Ok(r#"{"prefabName":"Cube","space":"pixel","position":[320,240,0]}"#.into()),
    });
    let p = r.s.state().scene.get(1).unwrap().pose.position;
    assert!((p - Vec3::new(0.0, 0.05, -1.6)).norm() < 1e-9, "{p:?}");
}

#[test]
fn digest_tracks_state() {
    let mut r = two_users();
    let d0 = r.s.state().digest();
    run_request(&mut r, 1, "a", "cube", CREATE_INIT, CREATE_CUBE);
    assert_ne!(d0, r.s.state().digest());
    assert_eq!(r.s.state().digest(), r.s.state().clone().digest());
}
