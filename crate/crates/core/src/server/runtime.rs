//! Wall-clock driver for [`Session`]: TCP and WebSocket listeners, one
//! actor task that owns the session, and blocking pools for model and
//! detector calls.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio_tungstenite::tungstenite::Message;

use super::{ConnId, Effect, Input, ServerError, Session, SessionStats};
use crate::mllm::{timed_call, ModelBackend, RetryPolicy};
use crate::privacy::Detector;
use crate::protocol::{read_frame, write_frame, Frame};

/// External work the session delegates.
#[derive(Clone)]
pub struct Services {
    pub backend: Arc<dyn ModelBackend>,
    pub detector: Arc<dyn Detector>,
    pub retry: RetryPolicy,
}

enum Event {
    Input(Input),
    Register { conn: ConnId, tx: mpsc::UnboundedSender<Frame> },
    Stats(oneshot::Sender<SessionStats>),
    Shutdown,
}

/// Handle to a running server.
pub struct ServerHandle {
    pub tcp_addr: SocketAddr,
    pub ws_addr: Option<SocketAddr>,
    events: mpsc::UnboundedSender<Event>,
    task: tokio::task::JoinHandle<Session>,
}

impl ServerHandle {
    pub async fn stats(&self) -> Option<SessionStats> {
        let (tx, rx) = oneshot::channel();
        self.events.send(Event::Stats(tx)).ok()?;
        rx.await.ok()
    }

    /// Stops accepting work and returns the final session.
    pub async fn shutdown(self) -> Result<Session, ServerError> {
        let _ = self.events.send(Event::Shutdown);
        self.task.await.map_err(|e| ServerError::Io(e.to_string()))
    }
}

/// Binds the listeners and starts serving.
pub async fn start(
    session: Session,
    services: Services,
    tcp: &str,
    ws: Option<&str>,
) -> Result<ServerHandle, ServerError> {
    let io = |e: std::io::Error| ServerError::Io(e.to_string());
    let tcp_listener = TcpListener::bind(tcp).await.map_err(io)?;
    let tcp_addr = tcp_listener.local_addr().map_err(io)?;
    let ws_listener = match ws {
        Some(a) => Some(TcpListener::bind(a).await.map_err(io)?),
        None => None,
    };
    let ws_addr = ws_listener.as_ref().map(|l| l.local_addr()).transpose().map_err(io)?;

    let (events, rx) = mpsc::unbounded_channel();
    let ids = Arc::new(std::sync::atomic::AtomicU64::new(1));
    tokio::spawn(accept_tcp(tcp_listener, events.clone(), ids.clone()));
    if let Some(l) = ws_listener {
        tokio::spawn(accept_ws(l, events.clone(), ids));
    }
    let task = tokio::spawn(actor(session, services, rx, events.clone()));
    tracing::info!(%tcp_addr, ?ws_addr, "server listening");
    Ok(ServerHandle {
        tcp_addr,
        ws_addr,
        events,
        task,
    })
}

async fn actor(
    mut session: Session,
    services: Services,
    mut rx: mpsc::UnboundedReceiver<Event>,
    events: mpsc::UnboundedSender<Event>,
) -> Session {
    let epoch = Instant::now();
    let now = move || epoch.elapsed().as_secs_f64();
    let mut writers: HashMap<ConnId, mpsc::UnboundedSender<Frame>> = HashMap::new();
    loop {
        let deadline = session.next_deadline();
        let event = match deadline {
            Some(d) => {
                let wait = Duration::from_secs_f64((d - now()).max(0.0));
                match tokio::time::timeout(wait, rx.recv()).await {
                    Ok(e) => e,
                    Err(_) => Some(Event::Input(Input::Tick)),
                }
            }
            None => rx.recv().await,
        };
        let input = match event {
            None | Some(Event::Shutdown) => return session,
            Some(Event::Stats(tx)) => {
                let _ = tx.send(session.stats().clone());
                continue;
            }
            Some(Event::Register { conn, tx }) => {
                writers.insert(conn, tx);
                Input::Connected { conn }
            }
            Some(Event::Input(i)) => i,
        };
        if let Input::Disconnected { conn } = &input {
            writers.remove(conn);
        }
        for effect in session.handle(now(), input) {
            match effect {
                Effect::Send { conn, frame } => {
                    if let Some(w) = writers.get(&conn) {
                        let _ = w.send(frame);
                    }
                }
                Effect::CallBackend { request_id, prompt } => {
                    let s = services.clone();
                    let ev = events.clone();
                    tokio::task::spawn_blocking(move || {
                        let result = timed_call(s.backend.as_ref(), &prompt, &s.retry).map(|r| r.raw);
                        let _ = ev.send(Event::Input(Input::BackendCompleted { request_id, result }));
                    });
                }
                Effect::Detect { request_id, frame_ref } => {
                    let s = services.clone();
                    let ev = events.clone();
                    tokio::task::spawn_blocking(move || {
                        let result = s.detector.detect(&frame_ref);
                        let _ = ev.send(Event::Input(Input::DetectionCompleted { request_id, result }));
                    });
                }
            }
        }
    }
}

async fn accept_tcp(
    listener: TcpListener,
    events: mpsc::UnboundedSender<Event>,
    ids: Arc<std::sync::atomic::AtomicU64>,
) {
    while let Ok((stream, peer)) = listener.accept().await {
        let conn = ids.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        tracing::debug!(conn, %peer, "tcp connection");
        tokio::spawn(serve_tcp(stream, conn, events.clone()));
    }
}

async fn serve_tcp(stream: TcpStream, conn: ConnId, events: mpsc::UnboundedSender<Event>) {
    let _ = stream.set_nodelay(true);
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut out) = mpsc::unbounded_channel::<Frame>();
    if events.send(Event::Register { conn, tx }).is_err() {
        return;
    }
    let writer = tokio::spawn(async move {
        while let Some(f) = out.recv().await {
            if write_frame(&mut wr, &f).await.is_err() {
                break;
            }
        }
    });
    loop {
        match read_frame(&mut rd).await {
            Ok(Some(frame)) => {
                if events.send(Event::Input(Input::Frame { conn, frame })).is_err() {
                    break;
                }
            }
            Ok(None) => break,
            Err(e) => {
                tracing::warn!(conn, error = %e, "closing connection on framing error");
                break;
            }
        }
    }
    let _ = events.send(Event::Input(Input::Disconnected { conn }));
    writer.abort();
}

async fn accept_ws(
    listener: TcpListener,
    events: mpsc::UnboundedSender<Event>,
    ids: Arc<std::sync::atomic::AtomicU64>,
) {
    while let Ok((stream, peer)) = listener.accept().await {
        let conn = ids.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        tracing::debug!(conn, %peer, "websocket connection");
        tokio::spawn(serve_ws(stream, conn, events.clone()));
    }
}

/// Each binary WebSocket message carries exactly one encoded frame.
async fn serve_ws(stream: TcpStream, conn: ConnId, events: mpsc::UnboundedSender<Event>) {
    let _ = stream.set_nodelay(true);
    let Ok(ws) = tokio_tungstenite::accept_async(stream).await else {
        return;
    };
    let (mut sink, mut source) = ws.split();
    let (tx, mut out) = mpsc::unbounded_channel::<Frame>();
    if events.send(Event::Register { conn, tx }).is_err() {
        return;
    }
    let writer = tokio::spawn(async move {
        while let Some(f) = out.recv().await {
            if sink.send(Message::Binary(f.encode().into())).await.is_err() {
                break;
            }
        }
    });
    while let Some(msg) = source.next().await {
        let bytes = match msg {
            Ok(Message::Binary(b)) => b,
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        match Frame::decode(&bytes) {
            Ok(frame) => {
                if events.send(Event::Input(Input::Frame { conn, frame })).is_err() {
                    break;
                }
            }
            Err(e) => {
                tracing::warn!(conn, error = %e, "closing websocket on framing error");
                break;
            }
        }
    }
    let _ = events.send(Event::Input(Input::Disconnected { conn }));
    writer.abort();
}
