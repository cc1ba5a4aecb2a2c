//! Virtual-time execution.
//!
//! [`run`] drives a [`Session`] by jumping straight to its next deadline, so a
//! run that would take minutes on a wall clock finishes instantly and yields
//! the same timestamps every time. A [`VirtualGenerator`] stands in for an
//! external backend, exchanging chunk and ack messages through an in-memory
//! link.

use std::collections::{BTreeSet, VecDeque};

use serde_json::Value as Json;

use crate::protocol::{AckWindow, GeneratorMessage};
use crate::scheduler::{ControlAction, Output, Session, SessionError, Status};

/// Safety net for runs that never finish on their own.
const DEFAULT_MAX_TIME_MS: u64 = 24 * 3600 * 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorEvent {
    Sent { batch: u64, t_ms: u64 },
    Acked { batch: u64, t_ms: u64 },
    End { t_ms: u64 },
}

/// A scripted backend that sends fixed-size chunks on a delay.
///
/// With `await_acks = Some(w)` it is compliant: it never has more than `w`
/// batches unacknowledged. With `None` it floods, ignoring acks.
#[derive(Debug, Clone)]
pub struct VirtualGenerator {
    rows: Vec<Json>,
    chunk_size: usize,
    chunk_delay_ms: u64,
    await_acks: Option<usize>,
    cursor: usize,
    next_batch: u64,
    next_send_at: u64,
    ended: bool,
    unacked: BTreeSet<u64>,
    max_unacked: usize,
    log: Vec<GeneratorEvent>,
}

impl VirtualGenerator {
    pub fn new(rows: Vec<Json>, chunk_size: usize, chunk_delay_ms: u64, await_acks: Option<usize>) -> Self {
        Self {
            rows,
            chunk_size: chunk_size.max(1),
            chunk_delay_ms,
            await_acks: await_acks.map(|w| w.max(1)),
            cursor: 0,
            next_batch: 0,
            next_send_at: 0,
            ended: false,
            unacked: BTreeSet::new(),
            max_unacked: 0,
            log: Vec::new(),
        }
    }

    fn blocked(&self) -> bool {
        self.await_acks.is_some_and(|w| self.unacked.len() >= w)
    }

    /// When the generator will next send, if it is not waiting for an ack.
    pub fn next_send_time(&self) -> Option<u64> {
        (!self.ended && !self.blocked()).then_some(self.next_send_at)
    }

    /// The message due at `now`, if any.
    pub fn poll_send(&mut self, now: u64) -> Option<GeneratorMessage> {
        if self.next_send_time().is_none_or(|t| t > now) {
            return None;
        }
        self.next_send_at = now + self.chunk_delay_ms;
        if self.cursor >= self.rows.len() {
            self.ended = true;
            self.log.push(GeneratorEvent::End { t_ms: now });
            return Some(GeneratorMessage::End {});
        }
        let end = (self.cursor + self.chunk_size).min(self.rows.len());
        let rows = self.rows[self.cursor..end].to_vec();
        self.cursor = end;
        let batch = self.next_batch;
        self.next_batch += 1;
        if self.await_acks.is_some() {
            self.unacked.insert(batch);
            self.max_unacked = self.max_unacked.max(self.unacked.len());
        }
        self.log.push(GeneratorEvent::Sent { batch, t_ms: now });
        Some(GeneratorMessage::Chunk { batch, rows })
    }

    pub fn ack(&mut self, batch: u64, now: u64) {
        self.unacked.remove(&batch);
        self.log.push(GeneratorEvent::Acked { batch, t_ms: now });
        self.next_send_at = self.next_send_at.max(now);
    }

    pub fn unacked(&self) -> usize {
        self.unacked.len()
    }

    /// Highest number of unacknowledged batches at any instant.
    pub fn max_unacked(&self) -> usize {
        self.max_unacked
    }

    pub fn batches_sent(&self) -> u64 {
        self.next_batch
    }

    pub fn log(&self) -> &[GeneratorEvent] {
        &self.log
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimConfig {
    /// Stop after this many forward steps.
    pub max_steps: Option<usize>,
    /// Give up at this virtual time.
    pub max_time_ms: Option<u64>,
    /// Leave generator frames unread while this many rows are buffered.
    pub max_buffer_rows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub status: Status,
    pub end_ms: u64,
    pub emissions: usize,
    pub timed_out: bool,
    /// Most engine-side in-flight batches at any instant.
    pub max_in_flight: usize,
    /// Most frames waiting unread on the generator link.
    pub max_unread: usize,
}

struct Runner<'a, F> {
    session: &'a mut Session,
    sink: F,
    window: AckWindow,
    emissions: usize,
    max_steps: Option<usize>,
    halted: bool,
}

impl<F: FnMut(u64, &Output)> Runner<'_, F> {
    fn deliver(
        &mut self,
        now: u64,
        outputs: Vec<Output>,
        mut generator: Option<&mut VirtualGenerator>,
    ) -> Result<(), SessionError> {
        for o in outputs {
            (self.sink)(now, &o);
            match &o {
                Output::Changeset(_) => self.emissions += 1,
                Output::Ack(b) => {
                    self.window.acked(*b);
                    if let Some(g) = generator.as_deref_mut() {
                        g.ack(*b, now);
                    }
                }
                Output::Status(_) => {}
            }
        }
        let limit_hit = self
            .max_steps
            .is_some_and(|m| self.session.store().step() + 1 >= m as i64);
        if limit_hit && !self.halted {
            self.halted = true;
            if matches!(self.session.status(), Status::Running | Status::Paused) {
                match self.session.control(ControlAction::Stop, now) {
                    Ok(out) => {
                        for o in &out {
                            (self.sink)(now, o);
                        }
                    }
                    Err(SessionError::Disabled(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(())
    }
}

/// Runs `session` from idle to completion in virtual time.
///
/// Exploration sessions start paused; the run presses play so they progress
/// like monitoring sessions. Every output is passed to `sink` with its
/// timestamp, in delivery order.
pub fn run<F: FnMut(u64, &Output)>(
    session: &mut Session,
    mut generator: Option<&mut VirtualGenerator>,
    config: SimConfig,
    sink: F,
) -> Result<SimReport, SessionError> {
    let control = session.spec().control().clone();
    let window = if control.ack_flow_control {
        AckWindow::new(control.ack_window as usize)
    } else {
        AckWindow::unbounded()
    };
    let max_time = config.max_time_ms.unwrap_or(DEFAULT_MAX_TIME_MS);
    let mut runner = Runner {
        session,
        sink,
        window,
        emissions: 0,
        max_steps: config.max_steps,
        halted: false,
    };
    let mut now = 0u64;
    let mut link: VecDeque<GeneratorMessage> = VecDeque::new();
    let mut max_unread = 0usize;

    let out = runner.session.start(now)?;
    runner.deliver(now, out, generator.as_deref_mut())?;
    if runner.session.status() == Status::Paused {
        let out = runner.session.control(ControlAction::Play, now)?;
        runner.deliver(now, out, generator.as_deref_mut())?;
    }

    let mut timed_out = false;
    loop {
        // Settle everything due at `now`.
        loop {
            let mut progressed = false;
            if let Some(g) = generator.as_deref_mut() {
                if let Some(msg) = g.poll_send(now) {
                    link.push_back(msg);
                    progressed = true;
                }
            }
            max_unread = max_unread.max(link.len());
            while !link.is_empty() && runner.readable(config.max_buffer_rows) {
                let msg = link.pop_front().expect("checked non-empty");
                let out = match msg {
                    GeneratorMessage::Chunk { batch, rows } => {
                        runner
                            .window
                            .received(batch)
                            .map_err(|e| SessionError::Protocol(e.message))?;
                        runner.session.push_batch(batch, &rows, now)?
                    }
                    GeneratorMessage::End {} => runner.session.end_input(now, false),
                };
                runner.deliver(now, out, generator.as_deref_mut())?;
                progressed = true;
            }
            if runner.session.next_deadline().is_some_and(|t| t <= now) {
                let out = runner.session.poll(now);
                runner.deliver(now, out, generator.as_deref_mut())?;
                progressed = true;
            }
            if !progressed {
                break;
            }
        }
        if matches!(runner.session.status(), Status::Done | Status::Stopped) || runner.halted {
            break;
        }
        let next = [
            runner.session.next_deadline(),
            generator.as_deref().and_then(VirtualGenerator::next_send_time),
        ]
        .into_iter()
        .flatten()
        .min();
        let Some(next) = next else { break };
        now = next.max(now + 1);
        if now > max_time {
            timed_out = true;
            break;
        }
    }
    Ok(SimReport {
        status: runner.session.status(),
        end_ms: now,
        emissions: runner.emissions,
        timed_out,
        max_in_flight: runner.window.max_in_flight(),
        max_unread,
    })
}

impl<F> Runner<'_, F> {
    fn readable(&self, cap: Option<usize>) -> bool {
        self.window.can_receive() && cap.is_none_or(|c| self.session.buffered_rows() < c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn generator_waits_for_acks() {
        let rows = (0..6).map(|i| json!({ "v": i })).collect();
        let mut g = VirtualGenerator::new(rows, 2, 100, Some(1));
        assert!(matches!(g.poll_send(0), Some(GeneratorMessage::Chunk { batch: 0, .. })));
        assert_eq!(g.next_send_time(), None);
        assert!(g.poll_send(500).is_none());
        g.ack(0, 40);
        assert_eq!(g.next_send_time(), Some(100));
        g.poll_send(100).unwrap();
        g.ack(1, 350);
        assert_eq!(g.next_send_time(), Some(350));
        g.poll_send(350).unwrap();
        g.ack(2, 350);
        assert_eq!(g.poll_send(450), Some(GeneratorMessage::End {}));
        assert_eq!(g.max_unacked(), 1);
        assert_eq!(g.next_send_time(), None);
    }

    #[test]
    fn flooding_generator_ignores_acks() {
        let rows = (0..4).map(|i| json!({ "v": i })).collect();
        let mut g = VirtualGenerator::new(rows, 1, 0, None);
        let sent: Vec<_> = std::iter::from_fn(|| g.poll_send(0)).collect();
        assert_eq!(sent.len(), 5);
        assert_eq!(g.unacked(), 0);
    }
}
