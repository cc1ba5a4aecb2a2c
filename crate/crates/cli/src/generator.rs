//! `generator.json`: how a reference fake generator produces its stream.

use std::path::Path;

use provega_core::synth;
use provega_server::FakeGeneratorConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Taxi,
    Blobs,
    Scatter,
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub dataset: SyntheticKind,
    pub rows: usize,
    #[serde(default)]
    pub seed: u64,
    /// Cluster count for `blobs`.
    #[serde(default)]
    pub k: Option<usize>,
    pub chunk_size: usize,
    pub chunk_delay_ms: u64,
    /// Unacknowledged batches allowed in flight; absent means the generator
    /// ignores acks.
    #[serde(default)]
    pub ack_window: Option<usize>,
}

pub fn synthesize(kind: SyntheticKind, rows: usize, seed: u64, k: Option<usize>) -> Vec<Json> {
    match kind {
        SyntheticKind::Taxi => synth::taxi_trips(rows, seed),
        SyntheticKind::Blobs => synth::blobs(rows, k.unwrap_or(5), seed),
        SyntheticKind::Scatter => synth::scatter(rows, seed),
        SyntheticKind::Ring => synth::ring(rows, seed),
    }
}

impl GeneratorSpec {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn records(&self) -> Vec<Json> {
        synthesize(self.dataset, self.rows, self.seed, self.k)
    }

    /// Ack-waiting only makes sense when the engine sends acks.
    pub fn effective_window(&self, engine_acks: bool) -> Option<usize> {
        self.ack_window.filter(|_| engine_acks)
    }

    pub fn fake_config(&self, engine_acks: bool) -> FakeGeneratorConfig {
        FakeGeneratorConfig {
            rows: self.records(),
            chunk_size: self.chunk_size,
            chunk_delay_ms: self.chunk_delay_ms,
            ack_window: self.effective_window(engine_acks),
        }
    }
}

/// Writes records as CSV (header from the first record) or, for `.json`
/// paths, as an array of objects.
pub fn write_records(path: &Path, records: &[Json]) -> anyhow::Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        std::fs::write(path, serde_json::to_string(records)?)?;
        return Ok(());
    }
    let mut w = csv::Writer::from_path(path)?;
    let Some(first) = records.first().and_then(Json::as_object) else {
        anyhow::bail!("nothing to write");
    };
    let header: Vec<&String> = first.keys().collect();
    w.write_record(header.iter().map(|k| k.as_str()))?;
    for r in records {
        let row = header.iter().map(|k| match &r[k.as_str()] {
            Json::Null => String::new(),
            Json::String(s) => s.clone(),
            other => other.to_string(),
        });
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}
