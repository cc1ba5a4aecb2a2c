//! Progressive data-analysis engine.
//!
//! A progressive session takes a visualization document carrying a `provega`
//! block, loads or receives its rows, and releases them as a sequence of
//! changesets: row inserts for data chunking, keyed updates for process
//! chunking, or both for mixed chunking. The session starts empty, advances on
//! a fixed-rate timer (or on generator arrivals), can be paused, stepped
//! forward and backward, stopped, and re-parameterized while it runs.
//!
//! The crate is synchronous and clock-agnostic: every time-dependent call takes
//! the current time in milliseconds since the session started, so the same
//! [`Session`] drives both virtual-time runs ([`sim`]) and real-time servers.

pub mod data_source;
pub mod processors;
pub mod protocol;
pub mod quality;
pub mod rng;
pub mod scheduler;
pub mod sim;
pub mod spec;
pub mod store;
pub mod synth;
pub mod trace;
pub mod value;

pub use data_source::{Column, ColumnType, DataSourceDescriptor, Dataset, SourceKind};
pub use scheduler::{
    plan_chunks, ChunkPlan, ControlAction, Emission, Output, Session, SessionError, SessionState,
    Status,
};
pub use spec::{parse_spec, ProvegaSpec, SpecError};
pub use store::{ChangeReport, Changeset, ChangesetStore, Direction};
pub use value::{Row, RowId, Value};
