//! Real-time hosting for progressive sessions.
//!
//! A [`SessionHandle`] owns one session on a runner task. UI clients connect
//! to `/session`, generators to `/ingest` (or the engine dials out to a
//! backend), and the runner serializes every effect through its command
//! queue.

pub mod fake;
pub mod runner;
pub mod transport;
pub mod ws;

pub use fake::{FakeGeneratorConfig, GeneratorStats};
pub use runner::{ClientHandle, GeneratorLink, RunnerConfig, SessionHandle, NOT_CONTROLLER};
pub use transport::{attach_backend, attach_in_process, connect_fake_generator, serve_fake_generator, AttachError};
pub use ws::{router, serve};
