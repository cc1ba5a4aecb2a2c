//! The progression state machine and its timing rules.

mod coalesce;
mod plan;
mod session;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use coalesce::coalesce;
pub use plan::{plan_chunks, reading_order, replan, ChunkPlan, PlanError};
pub use session::{Emission, Output, Session, SessionInput, StatusUpdate};

use crate::processors::ProcessorError;
use crate::quality::BindingError;
use crate::spec::{Mode, SpecError};
use crate::store::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Idle,
    Running,
    Paused,
    Done,
    Stopped,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Idle => "idle",
            Status::Running => "running",
            Status::Paused => "paused",
            Status::Done => "done",
            Status::Stopped => "stopped",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAction {
    Play,
    Pause,
    Stop,
    StepForward,
    StepBackward,
}

impl ControlAction {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlAction::Play => "play",
            ControlAction::Pause => "pause",
            ControlAction::Stop => "stop",
            ControlAction::StepForward => "step_forward",
            ControlAction::StepBackward => "step_backward",
        }
    }
}

impl fmt::Display for ControlAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControlAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "play" => ControlAction::Play,
            "pause" => ControlAction::Pause,
            "stop" => ControlAction::Stop,
            "step_forward" => ControlAction::StepForward,
            "step_backward" => ControlAction::StepBackward,
            other => return Err(format!("unknown control action `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error("cannot {action} while {status}: {reason}")]
    IllegalTransition {
        action: &'static str,
        status: Status,
        reason: String,
    },
    #[error("{0} is disabled by the spec")]
    Disabled(ControlAction),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Processor(#[from] ProcessorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Binding(#[from] BindingError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Running mean and variance of inter-emission intervals (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct IntervalStats {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl IntervalStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }
}

/// A read-only summary of a session.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionState {
    pub status: Status,
    /// -1 until the first changeset.
    pub step: i64,
    pub total_steps: Option<usize>,
    pub rows_emitted: usize,
    pub started_at: Option<u64>,
    pub last_emit_at: Option<u64>,
    pub emit_intervals: IntervalStats,
    #[serde(serialize_with = "mode_str")]
    pub mode: Mode,
    pub alive: bool,
}

fn mode_str<S: serde::Serializer>(m: &Mode, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(m.as_str())
}
