//! Reference generator: streams a fixed set of records in chunks over the
//! generator protocol, optionally waiting for acknowledgments.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures::{Sink, SinkExt, Stream, StreamExt};
use provega_core::protocol::{decode, encode, EngineToGenerator, GeneratorMessage};
use serde_json::Value as Json;
use tokio::sync::Notify;
use tokio::time::Instant;

#[derive(Debug, Clone)]
pub struct FakeGeneratorConfig {
    pub rows: Vec<Json>,
    pub chunk_size: usize,
    pub chunk_delay_ms: u64,
    /// `Some(w)`: never more than `w` batches unacknowledged. `None`: ignore
    /// acks and send as fast as the transport allows.
    pub ack_window: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Sent(u64),
    Acked(u64),
}

/// What the generator observed, for instrumentation.
#[derive(Debug, Default)]
pub struct GeneratorStats {
    inner: Mutex<StatsInner>,
    notify: Notify,
}

#[derive(Debug, Default)]
struct StatsInner {
    unacked: BTreeSet<u64>,
    max_unacked: usize,
    sent: u64,
    acked: u64,
    unexpected_acks: u64,
    log: Vec<(u64, Event)>,
}

impl GeneratorStats {
    fn lock(&self) -> std::sync::MutexGuard<'_, StatsInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn max_unacked(&self) -> usize {
        self.lock().max_unacked
    }

    pub fn sent(&self) -> u64 {
        self.lock().sent
    }

    pub fn acked(&self) -> u64 {
        self.lock().acked
    }

    /// Acks for batches that were never sent or were already acked.
    pub fn unexpected_acks(&self) -> u64 {
        self.lock().unexpected_acks
    }

    /// Events with milliseconds since the generator started.
    pub fn log(&self) -> Vec<(u64, Event)> {
        self.lock().log.clone()
    }
}

/// Runs the generator over a text-frame transport until every row is sent.
///
/// Returns after `end` is written. Acks keep being counted until `inbound`
/// closes.
pub async fn drive<S, R, E>(
    config: FakeGeneratorConfig,
    mut out: S,
    inbound: R,
    stats: Arc<GeneratorStats>,
) -> Result<(), E>
where
    S: Sink<String, Error = E> + Unpin,
    R: Stream<Item = String> + Unpin + Send + 'static,
{
    let origin = Instant::now();
    let acks = tokio::spawn(read_acks(inbound, stats.clone(), origin));
    let size = config.chunk_size.max(1);
    let delay = Duration::from_millis(config.chunk_delay_ms);
    let mut next_send = origin;
    for (batch, chunk) in config.rows.chunks(size).enumerate() {
        let batch = batch as u64;
        if let Some(window) = config.ack_window {
            loop {
                let notified = stats.notify.notified();
                if stats.lock().unacked.len() < window.max(1) {
                    break;
                }
                notified.await;
            }
        }
        tokio::time::sleep_until(next_send).await;
        let rows = chunk
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if let Some(obj) = r.as_object_mut() {
                    obj.insert("batch".into(), batch.into());
                }
                r
            })
            .collect();
        let now = Instant::now();
        {
            let mut s = stats.lock();
            s.sent += 1;
            s.unacked.insert(batch);
            s.max_unacked = s.max_unacked.max(s.unacked.len());
            s.log.push((ms(origin, now), Event::Sent(batch)));
        }
        out.send(encode(&GeneratorMessage::Chunk { batch, rows })).await?;
        next_send = now + delay;
    }
    tokio::time::sleep_until(next_send).await;
    out.send(encode(&GeneratorMessage::End {})).await?;
    drop(acks);
    Ok(())
}

fn ms(origin: Instant, t: Instant) -> u64 {
    t.duration_since(origin).as_millis() as u64
}

async fn read_acks<R>(mut inbound: R, stats: Arc<GeneratorStats>, origin: Instant)
where
    R: Stream<Item = String> + Unpin,
{
    while let Some(text) = inbound.next().await {
        match decode::<EngineToGenerator>(&text) {
            Ok(EngineToGenerator::Ack { batch }) => {
                let mut s = stats.lock();
                if s.unacked.remove(&batch) {
                    s.acked += 1;
                } else {
                    s.unexpected_acks += 1;
                }
                s.log.push((ms(origin, Instant::now()), Event::Acked(batch)));
                drop(s);
                stats.notify.notify_waiters();
            }
            Err(e) => tracing::warn!("generator ignored a frame: {e}"),
        }
    }
}
