//! `provega run`: a headless session that writes a trace.

use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use provega_core::data_source::{load_complete, DataSourceDescriptor};
use provega_core::protocol::{encode, ClientMessage};
use provega_core::scheduler::SessionInput;
use provega_core::sim::{self, SimConfig, VirtualGenerator};
use provega_core::trace::TraceWriter;
use provega_core::{parse_spec, ControlAction, Output, ProvegaSpec, Session, SessionError, Status};
use provega_server::{attach_backend, attach_in_process, GeneratorStats, RunnerConfig, SessionHandle};
use tempfile::NamedTempFile;

use crate::generator::GeneratorSpec;

pub const EXIT_OK: i32 = 0;
pub const EXIT_SPEC: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_FAILED: i32 = 3;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub spec: PathBuf,
    pub data: Option<PathBuf>,
    pub trace: PathBuf,
    pub seed: Option<u64>,
    pub max_steps: Option<usize>,
    pub realtime: bool,
    pub frequency: Option<u64>,
    pub generator: Option<PathBuf>,
    pub max_buffer_rows: Option<usize>,
}

/// A failed run: exit code and message for stderr.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        let code = match e {
            SessionError::Spec(_) | SessionError::Binding(_) => EXIT_SPEC,
            SessionError::Plan(_) => EXIT_DATA,
            _ => EXIT_FAILED,
        };
        Failure::new(code, e.to_string())
    }
}

enum Feed {
    None,
    Generator(GeneratorSpec),
    Backend(String),
}

struct Prepared {
    session: Session,
    feed: Feed,
}

/// Loads the spec and data and applies command-line overrides.
pub fn load_spec(path: &Path) -> Result<ProvegaSpec, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::new(EXIT_SPEC, format!("cannot read {}: {e}", path.display())))?;
    parse_spec(&text).map_err(|e| Failure::new(EXIT_SPEC, e.to_string()))
}

fn prepare(opts: &RunOptions) -> Result<Prepared, Failure> {
    let mut spec = load_spec(&opts.spec)?;
    let base = opts.spec.parent().unwrap_or(Path::new("."));
    let source = match &opts.data {
        Some(path) => DataSourceDescriptor::file(path),
        None => DataSourceDescriptor::from_spec(&spec, base).ok_or_else(|| {
            Failure::new(EXIT_DATA, "the spec names no data and --data was not given")
        })?,
    };
    if opts.data.is_some() {
        spec = spec.adapted_to(&source);
    }
    spec.validate_for_source(&source)
        .map_err(|e| Failure::new(EXIT_SPEC, e.to_string()))?;

    if let Some(seed) = opts.seed {
        if let Some(r) = spec.progression.chunking.reading.as_mut() {
            r.seed = seed;
        }
        if let Some(p) = spec.progression.chunking.processor.as_mut() {
            if p.params.contains_key("seed") {
                p.params.insert("seed".into(), seed.into());
            }
        }
    }
    if let Some(f) = opts.frequency {
        match spec.progression.chunking.reading.as_mut() {
            Some(r) if f >= 1 => r.frequency_ms = f,
            Some(_) => {
                return Err(Failure::new(
                    EXIT_SPEC,
                    "provega.progression.chunking.reading.frequency: expected an integer of at least 1",
                ))
            }
            None => {
                return Err(Failure::new(
                    EXIT_SPEC,
                    "--frequency needs a complete input; the generator sets the pace",
                ))
            }
        }
    }

    if source.is_progressive() {
        let feed = match (&opts.generator, opts.realtime) {
            (Some(path), _) => Feed::Generator(
                GeneratorSpec::load(path)
                    .map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", path.display())))?,
            ),
            (None, true) => match &source.kind {
                provega_core::SourceKind::WebSocket(url) => Feed::Backend(url.clone()),
                _ => unreachable!("progressive sources are WebSocket sources"),
            },
            (None, false) => {
                return Err(Failure::new(
                    EXIT_DATA,
                    "a WebSocket source needs --generator for a virtual-time run, or --realtime",
                ))
            }
        };
        let session = Session::new(spec, SessionInput::Progressive)?;
        return Ok(Prepared { session, feed });
    }
    let data = load_complete(&source).map_err(|e| Failure::new(EXIT_DATA, e.to_string()))?;
    let session = Session::new(spec, SessionInput::Complete(data))?;
    Ok(Prepared {
        session,
        feed: Feed::None,
    })
}

/// Runs to completion and writes the trace. The trace file appears only if
/// the session actually ran.
pub fn execute(opts: &RunOptions) -> Result<i32, Failure> {
    let prepared = prepare(opts)?;
    let dir = match opts.trace.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_owned(),
        _ => PathBuf::from("."),
    };
    let tmp = NamedTempFile::new_in(&dir)
        .map_err(|e| Failure::new(EXIT_FAILED, format!("cannot create trace in {}: {e}", dir.display())))?;
    let mut trace = TraceWriter::new(BufWriter::new(tmp));

    let (session, outcome) = if opts.realtime {
        realtime(prepared, opts, &mut trace)?
    } else {
        virtual_time(prepared, opts, &mut trace)?
    };

    let file = trace
        .into_inner()
        .map_err(|e| Failure::new(EXIT_FAILED, e.to_string()))?
        .into_inner()
        .map_err(|e| Failure::new(EXIT_FAILED, e.to_string()))?;
    file.persist(&opts.trace)
        .map_err(|e| Failure::new(EXIT_FAILED, format!("cannot write {}: {e}", opts.trace.display())))?;

    match (session.status(), session.error(), outcome) {
        (_, Some(err), _) => Err(Failure::new(EXIT_FAILED, format!("session stopped: {err}"))),
        (Status::Done | Status::Stopped, None, _) => Ok(EXIT_OK),
        (status, None, Some(why)) => Err(Failure::new(EXIT_FAILED, format!("run ended while {status}: {why}"))),
        (status, None, None) => Err(Failure::new(EXIT_FAILED, format!("run ended while {status}"))),
    }
}

type Trace = TraceWriter<BufWriter<NamedTempFile>>;

fn write_output(trace: &mut Trace, o: &Output, io_error: &mut Option<std::io::Error>) {
    if let Output::Changeset(e) = o {
        if io_error.is_none() {
            if let Err(err) = trace.write(e) {
                *io_error = Some(err);
            }
        }
    }
}

fn virtual_time(
    prepared: Prepared,
    opts: &RunOptions,
    trace: &mut Trace,
) -> Result<(Session, Option<String>), Failure> {
    let Prepared { mut session, feed } = prepared;
    let acks = session.spec().control().ack_flow_control;
    let mut generator = match feed {
        Feed::Generator(g) => Some(VirtualGenerator::new(
            g.records(),
            g.chunk_size,
            g.chunk_delay_ms,
            g.effective_window(acks),
        )),
        Feed::Backend(_) => unreachable!("backends need --realtime"),
        Feed::None => None,
    };
    let config = SimConfig {
        max_steps: opts.max_steps,
        max_time_ms: None,
        max_buffer_rows: opts.max_buffer_rows,
    };
    let mut io_error = None;
    let report = sim::run(&mut session, generator.as_mut(), config, |_, o| {
        write_output(trace, o, &mut io_error)
    })?;
    if let Some(e) = io_error {
        return Err(Failure::new(EXIT_FAILED, format!("cannot write trace: {e}")));
    }
    let why = if report.timed_out {
        "virtual time limit reached"
    } else {
        "no input or timer left"
    };
    Ok((session, Some(why.to_owned())))
}

fn realtime(
    prepared: Prepared,
    opts: &RunOptions,
    trace: &mut Trace,
) -> Result<(Session, Option<String>), Failure> {
    let rt = tokio::runtime::Runtime::new()
        .map_err(|e| Failure::new(EXIT_FAILED, format!("cannot start runtime: {e}")))?;
    rt.block_on(async {
        let Prepared { session, feed } = prepared;
        let acks = session.spec().control().ack_flow_control;
        let (handle, task) = SessionHandle::spawn(
            session,
            RunnerConfig {
                autostart: true,
                max_buffer_rows: opts.max_buffer_rows,
            },
        );
        let mut tap = handle
            .tap()
            .await
            .ok_or_else(|| Failure::new(EXIT_FAILED, "session runner exited"))?;
        let mut controller = handle
            .join()
            .await
            .ok_or_else(|| Failure::new(EXIT_FAILED, "session runner exited"))?;
        let id = controller.id;
        tokio::spawn(async move { while controller.rx.recv().await.is_some() {} });
        let control = |action| {
            handle.client_frame(id, encode(&ClientMessage::Control { action, params: None }));
        };
        if handle.state().await.map(|s| s.status) == Some(Status::Paused) {
            control(ControlAction::Play);
        }
        let _feed_task = match feed {
            Feed::None => None,
            Feed::Generator(g) => Some(
                attach_in_process(&handle, g.fake_config(acks), Arc::new(GeneratorStats::default()))
                    .await
                    .map_err(|e| Failure::new(EXIT_DATA, e.to_string()))?,
            ),
            Feed::Backend(url) => Some(
                attach_backend(&handle, &url)
                    .await
                    .map_err(|e| Failure::new(EXIT_DATA, e.to_string()))?,
            ),
        };

        let mut io_error = None;
        let mut forward_steps = 0usize;
        let mut stop_sent = false;
        while let Some((_, o)) = tap.recv().await {
            write_output(trace, &o, &mut io_error);
            match &o {
                Output::Changeset(e) if e.changeset.direction == provega_core::Direction::Forward => {
                    forward_steps += 1;
                    if !stop_sent && opts.max_steps.is_some_and(|m| forward_steps >= m) {
                        stop_sent = true;
                        control(ControlAction::Stop);
                    }
                }
                Output::Status(s) if matches!(s.status, Status::Done | Status::Stopped) => break,
                _ => {}
            }
        }
        handle.shutdown();
        let session = task
            .await
            .map_err(|e| Failure::new(EXIT_FAILED, format!("session runner failed: {e}")))?;
        if let Some(e) = io_error {
            return Err(Failure::new(EXIT_FAILED, format!("cannot write trace: {e}")));
        }
        Ok((session, None))
    })
}
