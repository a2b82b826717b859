//! Wall-clock execution against the real server over loopback TCP.
//!
//! Every client task and the pseudo user read one shared `Instant`, so
//! latency samples are differences on a single monotonic clock.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use tokio::net::TcpStream;
use tokio::sync::mpsc;

use super::client::ScriptedClient;
use super::report::LatencyReport;
use super::runner::{ModelSource, SimServices};
use super::scenario::Scenario;
use super::SimError;
use crate::mllm::{MockBackend, MockScript, ModelBackend};
use crate::protocol::{read_frame, write_frame, Frame, FrameType};
use crate::server::{runtime, Session, SessionStats};

pub struct RealtimeOutcome {
    pub report: LatencyReport,
    /// Bytes written or read by the clients' sockets, keyed like
    /// `uplink/sync`.
    pub transport: BTreeMap<String, u64>,
    /// The same traffic counted from decoded frames.
    pub framed: BTreeMap<String, u64>,
    pub stats: SessionStats,
    pub clients: Vec<ScriptedClient>,
    pub session: Session,
    pub elapsed: Duration,
}

fn channel(dir: &str, kind: FrameType) -> String {
    let k = match kind {
        FrameType::Control => "control",
        FrameType::Sync => "sync",
    };
    format!("{dir}/{k}")
}

#[derive(Default)]
struct Counters {
    transport: BTreeMap<String, u64>,
    framed: BTreeMap<String, u64>,
}

impl Counters {
    fn add(&mut self, dir: &str, f: &Frame, wire: u64) {
        *self.transport.entry(channel(dir, f.kind)).or_default() += wire;
        *self.framed.entry(channel(dir, f.kind)).or_default() += f.wire_len() as u64;
    }
}

fn backend_of(model: &ModelSource) -> Arc<dyn ModelBackend> {
    match model {
        ModelSource::Mock(m) => m.clone(),
        ModelSource::Live(b) => b.clone(),
        ModelSource::Unavailable => Arc::new(
            MockBackend::from_script(MockScript {
                version: 1,
                identity: "unavailable".into(),
                accepts_images: false,
                rules: Vec::new(),
            })
            .expect("empty script is valid"),
        ),
    }
}

/// Counts bytes on the way out, the way the socket sees them.
async fn send_all(wr: &mut tokio::net::tcp::OwnedWriteHalf, frames: &[Frame], c: &mut Counters) -> bool {
    for f in frames {
        let wire = f.encode().len() as u64;
        if write_frame(wr, f).await.is_err() {
            return false;
        }
        c.add("uplink", f, wire);
    }
    true
}

async fn drive(
    mut client: ScriptedClient,
    addr: SocketAddr,
    epoch: Instant,
    end: f64,
) -> Result<(ScriptedClient, Counters), SimError> {
    let secs = move || epoch.elapsed().as_secs_f64();
    let mut counters = Counters::default();
    let join = client.spec().join_at;
    tokio::time::sleep_until((epoch + Duration::from_secs_f64(join)).into()).await;
    let stream = TcpStream::connect(addr)
        .await
        .map_err(|e| SimError::Runtime(format!("connect {addr}: {e}")))?;
    stream.set_nodelay(true).map_err(|e| SimError::Runtime(e.to_string()))?;
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<(f64, Frame)>();
    let reader = tokio::spawn(async move {
        while let Ok(Some(f)) = read_frame(&mut rd).await {
            if tx.send((secs(), f)).is_err() {
                break;
            }
        }
    });
    let hello = client.hello();
    let mut open = send_all(&mut wr, &[hello], &mut counters).await;
    while open {
        let now = secs();
        if now >= end {
            break;
        }
        let wake = client.next_wakeup().unwrap_or(end).min(end);
        tokio::select! {
            _ = tokio::time::sleep_until((epoch + Duration::from_secs_f64(wake.max(now))).into()) => {
                let (frames, bye) = client.poll(secs());
                open = send_all(&mut wr, &frames, &mut counters).await && !bye;
            }
            got = rx.recv() => match got {
                Some((t, f)) => {
                    counters.add("downlink", &f, f.wire_len() as u64);
                    let replies = client.on_frame(t, &f);
                    open = send_all(&mut wr, &replies, &mut counters).await;
                }
                None => open = false,
            },
        }
    }
    drop(wr);
    reader.abort();
    while let Ok((_, f)) = rx.try_recv() {
        counters.add("downlink", &f, f.wire_len() as u64);
    }
    Ok((client, counters))
}

/// Runs a scenario in real time against an embedded server on loopback.
pub async fn run_realtime(scenario: &Scenario, services: &SimServices) -> Result<RealtimeOutcome, SimError> {
    scenario.validate()?;
    let mut cfg = services.session.clone();
    cfg.measure_compute = true;
    let rt_services = runtime::Services {
        backend: backend_of(&services.model),
        detector: services.detector.clone(),
        retry: services.retry.clone(),
    };
    let server = runtime::start(Session::new(cfg), rt_services, "127.0.0.1:0", None)
        .await
        .map_err(|e| SimError::Runtime(e.to_string()))?;
    let addr = server.tcp_addr;
    let epoch = Instant::now();
    let tasks: Vec<_> = scenario
        .clients
        .iter()
        .map(|c| {
            let client = ScriptedClient::new(
                c.clone(),
                &services.session.session_id,
                scenario.policy,
                scenario.tick_hz,
                scenario.noise,
            );
            tokio::spawn(drive(client, addr, epoch, scenario.duration))
        })
        .collect();
    let mut clients = Vec::with_capacity(tasks.len());
    let mut counters = Counters::default();
    for t in tasks {
        let (c, k) = t.await.map_err(|e| SimError::Runtime(e.to_string()))??;
        clients.push(c);
        for (ch, n) in k.transport {
            *counters.transport.entry(ch).or_default() += n;
        }
        for (ch, n) in k.framed {
            *counters.framed.entry(ch).or_default() += n;
        }
    }
    let elapsed = epoch.elapsed();
    let session = server.shutdown().await.map_err(|e| SimError::Runtime(e.to_string()))?;
    Ok(RealtimeOutcome {
        report: LatencyReport::from_clients(&clients),
        transport: counters.transport,
        framed: counters.framed,
        stats: session.stats().clone(),
        clients,
        session,
        elapsed,
    })
}
