//! The task that owns a live session.
//!
//! Everything that touches the session goes through one command queue: client
//! frames, generator frames, timer expiries and queries. The runner applies
//! them in order and fans the resulting outputs out to clients, taps and the
//! generator link.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use provega_core::protocol::{decode_client, decode_generator, ClientMessage, GeneratorMessage, ServerMessage};
use provega_core::{Output, Session, SessionError, SessionState, Status};
use tokio::sync::{mpsc, oneshot, Semaphore};
use tokio::task::JoinHandle;
use tokio::time::Instant;

/// Outbound messages an observer may have queued before it is dropped.
pub const OBSERVER_QUEUE: usize = 1024;

pub const NOT_CONTROLLER: &str = "not controller";

#[derive(Debug, Clone, Default)]
pub struct RunnerConfig {
    /// Start the session at once instead of when the first client joins.
    pub autostart: bool,
    /// Leave generator frames unread while this many rows are buffered.
    pub max_buffer_rows: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Controller,
    Observer,
}

type Query = Box<dyn FnOnce(&Session) + Send>;

enum Command {
    Join {
        reply: oneshot::Sender<ClientHandle>,
    },
    ClientFrame {
        id: u64,
        text: String,
    },
    Leave {
        id: u64,
    },
    AttachGenerator {
        reply: oneshot::Sender<Result<GeneratorLink, String>>,
    },
    GeneratorFrame(String),
    GeneratorGone,
    Tap {
        reply: oneshot::Sender<mpsc::UnboundedReceiver<(u64, Output)>>,
    },
    Query(Query),
    Shutdown,
}

/// A joined UI client: its id and the messages addressed to it.
#[derive(Debug)]
pub struct ClientHandle {
    pub id: u64,
    pub rx: mpsc::Receiver<ServerMessage>,
}

/// The engine's end of a generator connection.
///
/// Take a permit from `gate` before reading each frame; forward every id on
/// `acks` to the generator as an `ack` message.
#[derive(Debug)]
pub struct GeneratorLink {
    pub gate: Arc<Semaphore>,
    pub acks: mpsc::UnboundedReceiver<u64>,
    pub feed: GeneratorFeed,
}

/// Delivers generator frames to the session.
#[derive(Debug, Clone)]
pub struct GeneratorFeed {
    handle: SessionHandle,
}

impl GeneratorFeed {
    pub fn frame(&self, text: String) {
        self.handle.send(Command::GeneratorFrame(text));
    }

    pub fn gone(&self) {
        self.handle.send(Command::GeneratorGone);
    }
}

#[derive(Debug, Clone)]
pub struct SessionHandle {
    tx: mpsc::UnboundedSender<Command>,
}

impl std::fmt::Debug for Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Command")
    }
}

impl SessionHandle {
    /// Moves `session` onto a runner task. The task returns the session once
    /// shut down or once every handle is dropped.
    pub fn spawn(session: Session, config: RunnerConfig) -> (SessionHandle, JoinHandle<Session>) {
        let (tx, rx) = mpsc::unbounded_channel();
        let handle = SessionHandle { tx };
        let runner = Runner {
            session,
            config,
            origin: Instant::now(),
            clients: BTreeMap::new(),
            controller: None,
            next_client: 0,
            generator: None,
            taps: Vec::new(),
            weak: handle.tx.downgrade(),
        };
        (handle, tokio::spawn(runner.run(rx)))
    }

    fn send(&self, cmd: Command) {
        // A closed queue means the runner is gone; nothing left to tell it.
        let _ = self.tx.send(cmd);
    }

    async fn ask<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> Option<T> {
        let (reply, rx) = oneshot::channel();
        self.send(make(reply));
        rx.await.ok()
    }

    pub async fn join(&self) -> Option<ClientHandle> {
        self.ask(|reply| Command::Join { reply }).await
    }

    pub fn client_frame(&self, id: u64, text: String) {
        self.send(Command::ClientFrame { id, text });
    }

    pub fn leave(&self, id: u64) {
        self.send(Command::Leave { id });
    }

    pub async fn attach_generator(&self) -> Result<GeneratorLink, String> {
        self.ask(|reply| Command::AttachGenerator { reply })
            .await
            .unwrap_or_else(|| Err("the session has shut down".into()))
    }

    /// Every output from now on, stamped with session time.
    pub async fn tap(&self) -> Option<mpsc::UnboundedReceiver<(u64, Output)>> {
        self.ask(|reply| Command::Tap { reply }).await
    }

    /// Runs `f` against the session on the runner task.
    pub async fn with<T: Send + 'static>(
        &self,
        f: impl FnOnce(&Session) -> T + Send + 'static,
    ) -> Option<T> {
        self.ask(|reply| {
            Command::Query(Box::new(move |s: &Session| {
                let _ = reply.send(f(s));
            }))
        })
        .await
    }

    pub async fn state(&self) -> Option<SessionState> {
        self.with(Session::state).await
    }

    pub fn shutdown(&self) {
        self.send(Command::Shutdown);
    }
}

struct Client {
    tx: mpsc::Sender<ServerMessage>,
}

struct Generator {
    gate: Arc<Semaphore>,
    acks: mpsc::UnboundedSender<u64>,
    ack_mode: bool,
    withheld: usize,
}

struct Runner {
    session: Session,
    config: RunnerConfig,
    origin: Instant,
    clients: BTreeMap<u64, Client>,
    controller: Option<u64>,
    next_client: u64,
    generator: Option<Generator>,
    taps: Vec<mpsc::UnboundedSender<(u64, Output)>>,
    weak: mpsc::WeakUnboundedSender<Command>,
}

impl Runner {
    fn now(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }

    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Command>) -> Session {
        if self.config.autostart {
            self.start().await;
        }
        loop {
            let deadline = self
                .session
                .next_deadline()
                .map(|ms| self.origin + Duration::from_millis(ms));
            tokio::select! {
                biased;
                cmd = rx.recv() => match cmd {
                    None | Some(Command::Shutdown) => break,
                    Some(cmd) => self.handle(cmd).await,
                },
                _ = sleep_until(deadline) => {
                    let now = self.now();
                    let out = self.session.poll(now);
                    self.dispatch(now, out).await;
                }
            }
        }
        tracing::info!(status = %self.session.status(), step = self.session.store().step(), "session runner stopped");
        self.session
    }

    async fn start(&mut self) {
        if self.session.status() != Status::Idle {
            return;
        }
        let now = self.now();
        match self.session.start(now) {
            Ok(out) => {
                tracing::info!(status = %self.session.status(), "session started");
                self.dispatch(now, out).await;
            }
            Err(e) => tracing::warn!("cannot start session: {e}"),
        }
    }

    async fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Join { reply } => {
                let id = self.next_client;
                self.next_client += 1;
                let (tx, rx) = mpsc::channel(OBSERVER_QUEUE);
                let role = if self.controller.is_none() {
                    self.controller = Some(id);
                    Role::Controller
                } else {
                    Role::Observer
                };
                tracing::info!(client = id, ?role, "client joined");
                // Start first so the greeting already reflects the new status.
                self.start().await;
                self.clients.insert(id, Client { tx });
                if reply.send(ClientHandle { id, rx }).is_err() {
                    self.remove_client(id);
                    return;
                }
                self.greet(id).await;
            }
            Command::ClientFrame { id, text } => self.client_frame(id, &text).await,
            Command::Leave { id } => self.remove_client(id),
            Command::AttachGenerator { reply } => {
                let result = self.attach_generator();
                let _ = reply.send(result);
            }
            Command::GeneratorFrame(text) => self.generator_frame(&text).await,
            Command::GeneratorGone => {
                tracing::info!("generator disconnected");
                let now = self.now();
                let out = self.session.end_input(now, true);
                self.generator = None;
                self.dispatch(now, out).await;
            }
            Command::Tap { reply } => {
                let (tx, rx) = mpsc::unbounded_channel();
                self.taps.push(tx);
                let _ = reply.send(rx);
            }
            Command::Query(f) => f(&self.session),
            Command::Shutdown => unreachable!("handled by the loop"),
        }
    }

    fn attach_generator(&mut self) -> Result<GeneratorLink, String> {
        if self.generator.is_some() {
            return Err("a generator is already attached".into());
        }
        if !self.session.spec().is_progressive_input() {
            return Err("this session reads a complete input".into());
        }
        let tx = self.weak.upgrade().ok_or("the session has shut down")?;
        let control = self.session.spec().control();
        let ack_mode = control.ack_flow_control;
        let permits = if ack_mode { control.ack_window as usize } else { 1 };
        let gate = Arc::new(Semaphore::new(permits.max(1)));
        let (acks_tx, acks) = mpsc::unbounded_channel();
        self.generator = Some(Generator {
            gate: gate.clone(),
            acks: acks_tx,
            ack_mode,
            withheld: 0,
        });
        tracing::info!(ack_mode, window = permits, "generator attached");
        Ok(GeneratorLink {
            gate,
            acks,
            feed: GeneratorFeed {
                handle: SessionHandle { tx },
            },
        })
    }

    async fn greet(&mut self, id: u64) {
        let now = self.now();
        let catch_up = self.session.catch_up(now);
        let state = self.session.state();
        for msg in [
            ServerMessage::hello(&self.session),
            ServerMessage::changeset(&catch_up),
            ServerMessage::Status {
                status: state.status,
                alive: state.alive,
                warning: None,
            },
        ] {
            self.send_to(id, msg).await;
        }
    }

    async fn client_frame(&mut self, id: u64, text: &str) {
        let msg = match decode_client(text) {
            Ok(m) => m,
            Err(e) => {
                self.send_to(id, ServerMessage::error(e.message)).await;
                return;
            }
        };
        if matches!(msg, ClientMessage::SnapshotRequest {}) {
            self.greet(id).await;
            return;
        }
        if self.controller.is_none() {
            tracing::info!(client = id, "client promoted to controller");
            self.controller = Some(id);
        }
        if self.controller != Some(id) {
            let s = self.session.state();
            self.send_to(id, ServerMessage::warning(s.status, s.alive, NOT_CONTROLLER))
                .await;
            return;
        }
        let now = self.now();
        let result = match msg {
            ClientMessage::Control { action, params } => {
                self.apply_params(params.as_ref(), now)
                    .and_then(|mut out| {
                        out.extend(self.session.control(action, now)?);
                        Ok(out)
                    })
            }
            ClientMessage::Set { key, value } => self.session.set_parameter(&key, &value, now),
            ClientMessage::SnapshotRequest {} => unreachable!("answered above"),
        };
        match result {
            Ok(out) => self.dispatch(now, out).await,
            Err(e) => {
                self.send_to(id, ServerMessage::from_session_error(&e)).await;
            }
        }
    }

    fn apply_params(
        &mut self,
        params: Option<&serde_json::Value>,
        now: u64,
    ) -> Result<Vec<Output>, SessionError> {
        let mut out = Vec::new();
        let Some(params) = params else {
            return Ok(out);
        };
        let obj = params
            .as_object()
            .ok_or_else(|| SessionError::Protocol("control params must be an object".into()))?;
        for (k, v) in obj {
            out.extend(self.session.set_parameter(k, v, now)?);
        }
        Ok(out)
    }

    async fn generator_frame(&mut self, text: &str) {
        let now = self.now();
        let (result, is_chunk) = match decode_generator(text) {
            Ok(GeneratorMessage::Chunk { batch, rows }) => {
                (self.session.push_batch(batch, &rows, now), true)
            }
            Ok(GeneratorMessage::End {}) => (Ok(self.session.end_input(now, false)), false),
            Err(e) => (Err(SessionError::Protocol(e.message)), false),
        };
        let mut consumed = is_chunk;
        match result {
            Ok(out) => self.dispatch(now, out).await,
            Err(e) => {
                tracing::warn!("generator frame rejected: {e}");
                consumed = false;
                let msg = ServerMessage::from_session_error(&e);
                self.broadcast(msg).await;
            }
        }
        if let Some(g) = self.generator.as_mut() {
            if !(consumed && g.ack_mode) {
                g.withheld += 1;
            }
        }
        self.release_permits();
    }

    /// Returns withheld read permits while the buffer is under its cap.
    fn release_permits(&mut self) {
        let Some(g) = self.generator.as_mut() else {
            return;
        };
        if g.withheld == 0 {
            return;
        }
        let full = self
            .config
            .max_buffer_rows
            .is_some_and(|cap| self.session.buffered_rows() >= cap);
        if !full {
            g.gate.add_permits(g.withheld);
            g.withheld = 0;
        }
    }

    async fn dispatch(&mut self, now: u64, outputs: Vec<Output>) {
        for o in outputs {
            self.taps.retain(|t| t.send((now, o.clone())).is_ok());
            match o {
                Output::Changeset(e) => self.broadcast(ServerMessage::changeset(&e)).await,
                Output::Status(s) => {
                    if s.status != Status::Running || s.warning.is_some() {
                        tracing::info!(status = %s.status, alive = s.alive, warning = ?s.warning, "status");
                    }
                    self.broadcast(ServerMessage::status(&s)).await;
                }
                Output::Ack(b) => {
                    if let Some(g) = self.generator.as_mut() {
                        let _ = g.acks.send(b);
                        g.withheld += 1;
                    }
                }
            }
        }
        self.release_permits();
    }

    async fn broadcast(&mut self, msg: ServerMessage) {
        let ids: Vec<u64> = self.clients.keys().copied().collect();
        for id in ids {
            self.send_to(id, msg.clone()).await;
        }
    }

    async fn send_to(&mut self, id: u64, msg: ServerMessage) {
        let Some(client) = self.clients.get(&id) else {
            return;
        };
        match client.tx.try_send(msg) {
            Ok(()) => {}
            Err(mpsc::error::TrySendError::Full(msg)) if self.controller == Some(id) => {
                // The controller is never dropped; the session waits for it.
                let tx = client.tx.clone();
                if tx.send(msg).await.is_err() {
                    self.remove_client(id);
                }
            }
            Err(mpsc::error::TrySendError::Full(_)) => {
                tracing::warn!(client = id, "observer queue overflowed, dropping client");
                self.remove_client(id);
            }
            Err(mpsc::error::TrySendError::Closed(_)) => self.remove_client(id),
        }
    }

    fn remove_client(&mut self, id: u64) {
        if self.clients.remove(&id).is_some() {
            tracing::info!(client = id, "client left");
        }
        if self.controller == Some(id) {
            self.controller = None;
        }
    }
}

async fn sleep_until(deadline: Option<Instant>) {
    match deadline {
        Some(d) => tokio::time::sleep_until(d).await,
        None => std::future::pending().await,
    }
}
