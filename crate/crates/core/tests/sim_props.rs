use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use proptest::prelude::*;

use sharedspace::colocation::UserId;
use sharedspace::protocol::{ControlBody, Envelope, NoticeCode};
use sharedspace::server::{Effect, Input, Session};
use sharedspace::sim::{self, RunOptions, Scenario, SimServices};

fn loopback() -> Scenario {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/realtime");
    let text = std::fs::read_to_string(dir.join("scenario.toml")).unwrap();
    let mut s = Scenario::from_toml(&text, &dir).unwrap();
    s.duration = 3.0;
    s
}

/// Alice owns two balls; bob and carol are registered.
fn three_users() -> &'static Session {
    static BASE: OnceLock<Session> = OnceLock::new();
    BASE.get_or_init(|| {
        let mut s = loopback();
        let bob = s.clients.iter().find(|c| c.id == "bob").unwrap().clone();
        let mut carol = bob.clone();
        carol.id = "carol".into();
        carol.keyword = None;
        s.clients.retain(|c| c.pseudo_for.is_none());
        s.clients.push(carol);
        let alice = &mut s.clients[0];
        let mut second = alice.actions[1].clone();
        second.at = 0.5;
        alice.actions.truncate(2);
        alice.actions.push(second);
        s.duration = 1.5;
        let services = SimServices::from_scenario(&s).unwrap();
        let out = sim::run_virtual(&s, &services, &RunOptions::default()).unwrap();
        assert_eq!(out.session.state().scene.len(), 2);
        out.session
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn virtual_runs_are_reproducible(seed in 0u64..1000, latency_ms in 1u32..40, tick in prop::sample::select(vec![30.0, 60.0, 90.0])) {
        let mut s = loopback();
        s.seed = seed;
        s.link_latency = latency_ms as f64 / 1000.0;
        s.tick_hz = tick;
        let services = SimServices::from_scenario(&s).unwrap();
        let a = sim::run_virtual(&s, &services, &RunOptions::default()).unwrap();
        let b = sim::run_virtual(&s, &services, &RunOptions::default()).unwrap();
        prop_assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
        let (_, replayed) = sim::replay(&a.log).unwrap();
        prop_assert!(replayed.matches());
        prop_assert_eq!(a.digest, replayed.digest);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arbitrary_claim_sequences_keep_one_owner(claims in prop::collection::vec((0usize..3, 0usize..2), 1..40)) {
        let base = three_users();
        let mut s = base.clone();
        let users = ["alice", "bob", "carol"];
        let objects: Vec<u32> = s.state().scene.iter().map(|o| o.object_id).collect();
        let mut holders: BTreeMap<u32, Vec<u64>> = objects.iter().map(|o| (*o, vec![1])).collect();
        let mut epochs: BTreeMap<u32, u64> = objects.iter().map(|o| (*o, s.state().ledger.get(*o).unwrap().epoch)).collect();
        let mut seqs = [500u64; 3];
        for (i, (u, k)) in claims.into_iter().enumerate() {
            seqs[u] += 1;
            let frame = Envelope {
                session_id: s.config().session_id.clone(),
                sender_id: UserId::from(users[u]),
                seq: seqs[u],
                body: ControlBody::Claim { object_id: objects[k] },
            }
            .to_frame();
            let effects = s.handle(2.0 + i as f64 * 0.01, Input::Frame { conn: u as u64 + 1, frame });
            for e in effects {
                let Effect::Send { conn, frame } = e else { continue };
                if let Ok(Envelope { body: ControlBody::Notice { code, object_id: Some(o), .. }, .. }) = Envelope::from_frame(&frame) {
                    let h = holders.get_mut(&o).unwrap();
                    match code {
                        NoticeCode::OwnershipGranted => h.push(conn),
                        NoticeCode::OwnershipLost => h.retain(|c| *c != conn),
                        _ => {}
                    }
                }
            }
            for o in &objects {
                prop_assert!(holders[o].len() <= 1);
                let owner = s.state().ledger.owner_of(*o).unwrap().as_str();
                prop_assert_eq!(users[holders[o][0] as usize - 1], owner);
                let epoch = s.state().ledger.get(*o).unwrap().epoch;
                prop_assert!(epoch >= epochs[o]);
                epochs.insert(*o, epoch);
            }
        }
    }
}
