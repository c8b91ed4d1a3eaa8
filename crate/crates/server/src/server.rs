use std::net::SocketAddr;
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Map};
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;

use mutmod_core::engine::{BuildError, EngineEvent};
use mutmod_core::harness::{Input, Replay, Scenario, TimelineEntry, Trace};

use crate::hub::{Hub, Outbox, SessionId, DEFAULT_QUEUE_FRAMES};
use crate::wire::{self, parse_command, Command, WireError};

pub const PORT_ENV: &str = "MUTMOD_PORT";

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("invalid port {0:?}")]
    BadPort(String),
    #[error(transparent)]
    Build(#[from] BuildError),
}

/// The port to serve on: the flag if given, else the environment value.
pub fn resolve_port(flag: Option<u16>, env: Option<&str>) -> Result<Option<u16>, ServeError> {
    match (flag, env) {
        (Some(p), _) => Ok(Some(p)),
        (None, Some(s)) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| ServeError::BadPort(s.to_string())),
        (None, None) => Ok(None),
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub addr: SocketAddr,
    pub queue_frames: usize,
    /// Virtual milliseconds per wall-clock millisecond.
    pub speed: f64,
    /// Start the timeline clock immediately; otherwise wait for
    /// [`ServerHandle::start`].
    pub autostart: bool,
}

impl ServerConfig {
    pub fn on_port(port: u16) -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], port)),
            ..Self::default()
        }
    }
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            queue_frames: DEFAULT_QUEUE_FRAMES,
            speed: 1.0,
            autostart: true,
        }
    }
}

enum LoopMsg {
    Connect(oneshot::Sender<(SessionId, Outbox)>),
    Frame(SessionId, String),
    Disconnect(SessionId),
    Start,
    Shutdown(oneshot::Sender<Trace>),
}

/// A running endpoint. Dropping it leaves the server running until the
/// runtime stops; call [`shutdown`](Self::shutdown) to get the trace.
pub struct ServerHandle {
    addr: SocketAddr,
    tx: mpsc::Sender<LoopMsg>,
    progress: watch::Receiver<usize>,
    timeline_len: usize,
    accept: JoinHandle<()>,
    engine: JoinHandle<()>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Starts the timeline clock; a no-op if it is already running.
    pub async fn start(&self) {
        let _ = self.tx.send(LoopMsg::Start).await;
    }

    /// Resolves once every timeline entry has been applied.
    pub async fn timeline_done(&mut self) {
        let n = self.timeline_len;
        let _ = self.progress.wait_for(|&done| done >= n).await;
    }

    /// Stops accepting, expires what is still pending and returns the trace.
    pub async fn shutdown(self) -> Trace {
        self.accept.abort();
        let (tx, rx) = oneshot::channel();
        let _ = self.tx.send(LoopMsg::Shutdown(tx)).await;
        let trace = rx.await.expect("engine loop replies before exiting");
        let _ = self.engine.await;
        trace
    }
}

/// Binds, then replays the scenario's timeline against the wall clock
/// while accepting operator connections.
pub async fn serve(scenario: &Scenario, seed: u64, config: ServerConfig) -> Result<ServerHandle, ServeError> {
    let replay = Replay::new(scenario, seed)?;
    let listener = TcpListener::bind(config.addr)
        .await
        .map_err(|source| ServeError::Bind {
            addr: config.addr,
            source,
        })?;
    let addr = listener.local_addr().map_err(|source| ServeError::Bind {
        addr: config.addr,
        source,
    })?;
    log::info!("serving on ws://{addr}");

    let (tx, rx) = mpsc::channel(DEFAULT_QUEUE_FRAMES);
    let (progress_tx, progress) = watch::channel(0);
    let engine_loop = EngineLoop {
        replay,
        timeline: scenario.timeline.clone(),
        next: 0,
        hub: Hub::new(config.queue_frames),
        started: None,
        speed: config.speed.max(f64::MIN_POSITIVE),
        progress: progress_tx,
    };
    let engine = tokio::spawn(engine_loop.run(rx, config.autostart));
    let accept_tx = tx.clone();
    let accept = tokio::spawn(async move {
        loop {
            match listener.accept().await {
                Ok((stream, peer)) => {
                    log::debug!("connection from {peer}");
                    tokio::spawn(connection(stream, accept_tx.clone()));
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    });
    Ok(ServerHandle {
        addr,
        tx,
        progress,
        timeline_len: scenario.timeline.len(),
        accept,
        engine,
    })
}

async fn connection(stream: TcpStream, tx: mpsc::Sender<LoopMsg>) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            log::debug!("handshake failed: {e}");
            return;
        }
    };
    let (reply_tx, reply_rx) = oneshot::channel();
    if tx.send(LoopMsg::Connect(reply_tx)).await.is_err() {
        return;
    }
    let Ok((id, outbox)) = reply_rx.await else {
        return;
    };
    let (mut sink, mut source) = ws.split();
    let writer = tokio::spawn(async move {
        let Outbox { mut frames, mut kill } = outbox;
        loop {
            tokio::select! {
                biased;
                cut = &mut kill => {
                    match cut {
                        Ok(last) => {
                            let _ = sink.send(Message::text(last)).await;
                        }
                        // session closed normally: deliver what is queued
                        Err(_) => {
                            while let Ok(f) = frames.try_recv() {
                                if sink.send(Message::text(f)).await.is_err() {
                                    break;
                                }
                            }
                        }
                    }
                    break;
                }
                f = frames.recv() => match f {
                    Some(f) => {
                        if sink.send(Message::text(f)).await.is_err() {
                            break;
                        }
                    }
                    None => break,
                },
            }
        }
        let _ = sink.close().await;
    });
    while let Some(msg) = source.next().await {
        let text = match msg {
            Ok(Message::Text(t)) => t.as_str().to_string(),
            Ok(Message::Binary(_)) => "binary frame".to_string(),
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        if tx.send(LoopMsg::Frame(id, text)).await.is_err() {
            break;
        }
    }
    let _ = tx.send(LoopMsg::Disconnect(id)).await;
    let _ = writer.await;
}

struct EngineLoop {
    replay: Replay,
    timeline: Vec<TimelineEntry>,
    next: usize,
    hub: Hub,
    started: Option<Instant>,
    speed: f64,
    progress: watch::Sender<usize>,
}

impl EngineLoop {
    async fn run(mut self, mut rx: mpsc::Receiver<LoopMsg>, autostart: bool) {
        if autostart {
            self.started = Some(Instant::now());
        }
        let reply = loop {
            let wake = self.next_wake();
            tokio::select! {
                msg = rx.recv() => match msg {
                    None => break None,
                    Some(LoopMsg::Shutdown(reply)) => break Some(reply),
                    Some(m) => self.handle(m),
                },
                _ = tokio::time::sleep_until(wake.unwrap_or_else(Instant::now).into()), if wake.is_some() => {
                    self.catch_up();
                }
            }
        };
        drop(self.hub);
        let trace = self.replay.finish();
        if let Some(reply) = reply {
            let _ = reply.send(trace);
        }
    }

    /// Current virtual time; frozen at the engine clock until started.
    fn now(&self) -> u64 {
        match self.started {
            Some(s) => (s.elapsed().as_secs_f64() * 1000.0 * self.speed) as u64,
            None => self.replay.engine().now(),
        }
    }

    fn wall(&self, t: u64) -> Option<Instant> {
        let s = self.started?;
        Some(s + Duration::from_secs_f64(t as f64 / 1000.0 / self.speed) + Duration::from_micros(1))
    }

    fn next_wake(&self) -> Option<Instant> {
        let entry = self.timeline.get(self.next).map(|e| e.t);
        let deadline = self.replay.engine().next_deadline();
        let t = match (entry, deadline) {
            (Some(a), Some(b)) => a.min(b),
            (a, b) => a.or(b)?,
        };
        self.wall(t)
    }

    /// Applies due timeline entries, then moves the engine clock to now so
    /// deadlines fire on time.
    fn catch_up(&mut self) {
        if self.started.is_none() {
            return;
        }
        let now = self.now();
        while let Some(e) = self.timeline.get(self.next).filter(|e| e.t <= now).cloned() {
            let from = self.replay.trace().records.len();
            self.replay.apply(&e);
            self.next += 1;
            self.publish(from);
            let _ = self.progress.send(self.next);
        }
        let from = self.replay.trace().records.len();
        self.replay.advance_to(now);
        self.publish(from);
    }

    fn publish(&mut self, from: usize) {
        let records = &self.replay.trace().records[from..];
        self.hub.broadcast(records);
        let mode_changed = records
            .iter()
            .any(|r| matches!(r.engine(), Some(EngineEvent::ModeChanged { .. })));
        if mode_changed {
            for id in self.hub.subscribers() {
                let snap = wire::snapshot(self.replay.engine(), self.hub.patterns(id));
                self.hub.send(id, snap);
            }
        }
    }

    fn handle(&mut self, msg: LoopMsg) {
        match msg {
            LoopMsg::Connect(reply) => {
                let (id, outbox) = self.hub.connect();
                if reply.send((id, outbox)).is_ok() {
                    self.hub.send(id, wire::hello(self.replay.engine().mode()));
                } else {
                    self.hub.disconnect(id);
                }
            }
            LoopMsg::Disconnect(id) => self.hub.disconnect(id),
            LoopMsg::Start => {
                if self.started.is_none() {
                    // resume from the current engine clock
                    let offset = Duration::from_secs_f64(self.replay.engine().now() as f64 / 1000.0 / self.speed);
                    self.started = Some(Instant::now().checked_sub(offset).unwrap_or_else(Instant::now));
                    self.catch_up();
                }
            }
            LoopMsg::Frame(id, text) => self.command(id, &text),
            LoopMsg::Shutdown(_) => unreachable!("handled by the loop"),
        }
    }

    fn command(&mut self, id: SessionId, text: &str) {
        let (seq, cmd) = match parse_command(text) {
            Ok(c) => c,
            Err(e) => return self.hub.send(id, e.to_message()),
        };
        if !self.hub.accept_seq(id, seq) {
            let e = WireError {
                code: "SchemaViolation",
                message: "seq must increase".into(),
                reply_to: Some(seq),
            };
            return self.hub.send(id, e.to_message());
        }
        self.catch_up();
        let input = match cmd {
            Command::Ping => return self.hub.send(id, wire::ack(seq, json_map(json!({"pong": true})))),
            Command::Subscribe(patterns) => {
                self.hub.subscribe(id, patterns);
                self.hub.send(id, wire::ack(seq, Map::new()));
                let snap = wire::snapshot(self.replay.engine(), self.hub.patterns(id));
                return self.hub.send(id, snap);
            }
            Command::SetMode(mode) => Input::SetMode { mode },
            Command::WizardDecide(action) => Input::Wizard { action },
            Command::ResolveProposal { id, verdict } => Input::Verdict { proposal: id, verdict },
        };
        let entry = TimelineEntry { t: self.now(), input };
        let from = self.replay.trace().records.len();
        let (_, refused) = self.replay.apply_command(&entry);
        let reply = match refused {
            Some(e) => WireError::from_decision(&e, seq).to_message(),
            None => match &entry.input {
                Input::SetMode { mode } => wire::ack(seq, json_map(json!({"mode": mode}))),
                _ => wire::ack(seq, Map::new()),
            },
        };
        self.hub.send(id, reply);
        self.publish(from);
    }
}

fn json_map(v: serde_json::Value) -> Map<String, serde_json::Value> {
    match v {
        serde_json::Value::Object(m) => m,
        _ => Map::new(),
    }
}
