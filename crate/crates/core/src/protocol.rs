//! Wire messages exchanged over WebSocket text frames.
//!
//! Every message is one JSON object whose `type` field selects the variant.
//! Three directions exist: engine to UI client ([`ServerMessage`]), UI client
//! to engine ([`ClientMessage`]), and the generator link ([`GeneratorMessage`]
//! inbound, [`EngineToGenerator`] outbound).

use std::collections::BTreeSet;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::data_source::Column;
use crate::quality::QualitySample;
use crate::scheduler::{ControlAction, Emission, Session, SessionError, Status, StatusUpdate};
use crate::store::{ChangeReport, Direction};
use crate::value::{Row, RowId};

/// A frame that could not be decoded. The connection stays open.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct ProtocolError {
    pub message: String,
}

impl ProtocolError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangesetMessage {
    pub step: i64,
    pub direction: Direction,
    pub insert: Vec<Row>,
    pub update: Vec<Row>,
    pub remove: Vec<RowId>,
    pub quality: QualitySample,
    pub change_report: ChangeReport,
}

impl From<&Emission> for ChangesetMessage {
    fn from(e: &Emission) -> Self {
        let cs = &e.changeset;
        Self {
            step: cs.step,
            direction: cs.direction,
            insert: cs.inserts.clone(),
            update: cs.updates.clone(),
            remove: cs.removes.clone(),
            quality: e.quality.clone(),
            change_report: e.report.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        spec: Json,
        columns: Vec<Column>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        total_rows: Option<usize>,
    },
    Changeset(ChangesetMessage),
    Status {
        status: Status,
        alive: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        warning: Option<String>,
    },
    /// A rejected request or undecodable frame.
    Error {
        message: String,
        /// Spec property path, for validation failures.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
    },
}

impl ServerMessage {
    pub fn hello(session: &Session) -> Self {
        ServerMessage::Hello {
            spec: session.spec().to_document(),
            columns: session.columns().to_vec(),
            total_rows: session.total_rows(),
        }
    }

    pub fn changeset(e: &Emission) -> Self {
        ServerMessage::Changeset(e.into())
    }

    pub fn status(u: &StatusUpdate) -> Self {
        ServerMessage::Status {
            status: u.status,
            alive: u.alive,
            warning: u.warning.clone(),
        }
    }

    pub fn warning(status: Status, alive: bool, warning: impl Into<String>) -> Self {
        ServerMessage::Status {
            status,
            alive,
            warning: Some(warning.into()),
        }
    }

    pub fn error(message: impl Into<String>) -> Self {
        ServerMessage::Error {
            message: message.into(),
            path: None,
        }
    }

    pub fn from_session_error(e: &SessionError) -> Self {
        let path = match e {
            SessionError::Spec(s) => s.path().map(str::to_owned),
            _ => None,
        };
        ServerMessage::Error {
            message: e.to_string(),
            path,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Control {
        action: ControlAction,
        /// Parameter overrides applied before the action, as in `set`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        params: Option<Json>,
    },
    Set {
        key: String,
        value: Json,
    },
    SnapshotRequest {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GeneratorMessage {
    Chunk { batch: u64, rows: Vec<Json> },
    End {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EngineToGenerator {
    Ack { batch: u64 },
}

pub fn encode<T: Serialize>(msg: &T) -> String {
    serde_json::to_string(msg).expect("wire messages always serialize")
}

pub fn decode<T: DeserializeOwned>(text: &str) -> Result<T, ProtocolError> {
    serde_json::from_str(text).map_err(|e| ProtocolError::new(e.to_string()))
}

pub fn decode_client(text: &str) -> Result<ClientMessage, ProtocolError> {
    decode(text)
}

pub fn decode_generator(text: &str) -> Result<GeneratorMessage, ProtocolError> {
    decode(text)
}

/// Engine-side bookkeeping of generator batches read but not yet acknowledged.
///
/// The reader consults [`AckWindow::can_receive`] before taking the next frame
/// off the socket; while it is false, frames stay unread and the transport
/// pushes back on the generator.
#[derive(Debug, Clone, Default)]
pub struct AckWindow {
    window: Option<usize>,
    in_flight: BTreeSet<u64>,
    max_in_flight: usize,
}

impl AckWindow {
    /// At most `window` batches in flight.
    pub fn new(window: usize) -> Self {
        Self {
            window: Some(window.max(1)),
            ..Self::default()
        }
    }

    /// No limit; used when the spec turns acknowledgments off.
    pub fn unbounded() -> Self {
        Self::default()
    }

    pub fn can_receive(&self) -> bool {
        self.window.is_none_or(|w| self.in_flight.len() < w)
    }

    pub fn received(&mut self, batch: u64) -> Result<(), ProtocolError> {
        if self.window.is_none() {
            return Ok(());
        }
        if !self.in_flight.insert(batch) {
            return Err(ProtocolError::new(format!("batch {batch} is already in flight")));
        }
        self.max_in_flight = self.max_in_flight.max(self.in_flight.len());
        Ok(())
    }

    pub fn acked(&mut self, batch: u64) {
        self.in_flight.remove(&batch);
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    /// Highest in-flight count seen so far.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}
