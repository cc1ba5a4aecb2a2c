//! Line-delimited run traces: one JSON object per emitted changeset.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::quality::QualitySample;
use crate::scheduler::Emission;
use crate::store::{ChangeReport, Direction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub insert: usize,
    pub update: usize,
    pub remove: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub step: i64,
    pub direction: Direction,
    pub t_ms: u64,
    pub counts: Counts,
    pub rows_emitted: usize,
    pub batches: Vec<u64>,
    pub quality: QualitySample,
    pub change_report: ChangeReport,
}

impl From<&Emission> for TraceLine {
    fn from(e: &Emission) -> Self {
        let cs = &e.changeset;
        Self {
            step: cs.step,
            direction: cs.direction,
            t_ms: cs.emitted_at,
            counts: Counts {
                insert: cs.inserts.len(),
                update: cs.updates.len(),
                remove: cs.removes.len(),
            },
            rows_emitted: e.rows_emitted,
            batches: e.batches.clone(),
            quality: e.quality.clone(),
            change_report: e.report.clone(),
        }
    }
}

pub struct TraceWriter<W: Write> {
    out: W,
    lines: usize,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out, lines: 0 }
    }

    pub fn write(&mut self, e: &Emission) -> io::Result<()> {
        self.write_line(&TraceLine::from(e))
    }

    pub fn write_line(&mut self, line: &TraceLine) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, line)?;
        self.out.write_all(b"\n")?;
        self.lines += 1;
        Ok(())
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn into_inner(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn read_trace<R: BufRead>(input: R) -> io::Result<Vec<TraceLine>> {
    let mut lines = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        lines.push(parsed);
    }
    Ok(lines)
}

/// Aggregate figures kept next to each gallery bundle for regression checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub lines: usize,
    pub forward_steps: usize,
    pub final_step: i64,
    pub final_rows: usize,
    pub last_t_ms: u64,
    pub inserted: usize,
    pub updated: usize,
    pub removed: usize,
    pub final_quality: Option<QualitySample>,
}

impl TraceSummary {
    pub fn of(lines: &[TraceLine]) -> Self {
        let last = lines.last();
        Self {
            lines: lines.len(),
            forward_steps: lines
                .iter()
                .filter(|l| l.direction == Direction::Forward)
                .count(),
            final_step: last.map_or(-1, |l| l.step),
            final_rows: last.map_or(0, |l| l.rows_emitted),
            last_t_ms: last.map_or(0, |l| l.t_ms),
            inserted: lines.iter().map(|l| l.counts.insert).sum(),
            updated: lines.iter().map(|l| l.counts.update).sum(),
            removed: lines.iter().map(|l| l.counts.remove).sum(),
            final_quality: last.map(|l| l.quality.clone()),
        }
    }
}
