//! Generator connections: in-process, outbound to a backend, and the fake
//! generator's own server and client modes.

use std::sync::Arc;

use futures::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;

use crate::fake::{drive, FakeGeneratorConfig, GeneratorStats};
use crate::runner::SessionHandle;
use crate::ws::pump_generator;

#[derive(Debug, thiserror::Error)]
pub enum AttachError {
    #[error("{0}")]
    Rejected(String),
    #[error("cannot connect to {url}: {source}")]
    Connect {
        url: String,
        source: tokio_tungstenite::tungstenite::Error,
    },
}

/// Runs a fake generator inside the process, wired to the session through
/// the same gated link a socket would use.
pub async fn attach_in_process(
    handle: &SessionHandle,
    config: FakeGeneratorConfig,
    stats: Arc<GeneratorStats>,
) -> Result<JoinHandle<()>, AttachError> {
    let link = handle.attach_generator().await.map_err(AttachError::Rejected)?;
    // Zero capacity: a frame the session has not read blocks the generator.
    let (frame_tx, frame_rx) = futures::channel::mpsc::channel::<String>(0);
    let (ack_tx, ack_rx) = futures::channel::mpsc::unbounded::<String>();
    let generator = tokio::spawn(async move {
        if let Err(e) = drive(config, frame_tx, ack_rx, stats).await {
            tracing::warn!("in-process generator stopped: {e}");
        }
    });
    let pump = tokio::spawn(pump_generator(link, frame_rx.map(Ok), ack_tx));
    Ok(tokio::spawn(async move {
        let _ = generator.await;
        let _ = pump.await;
    }))
}

/// Connects to a backend that serves the generator protocol and feeds the
/// session from it.
pub async fn attach_backend(handle: &SessionHandle, url: &str) -> Result<JoinHandle<()>, AttachError> {
    let (ws, _) = tokio_tungstenite::connect_async(url)
        .await
        .map_err(|source| AttachError::Connect {
            url: url.to_owned(),
            source,
        })?;
    let link = handle.attach_generator().await.map_err(AttachError::Rejected)?;
    tracing::info!(url, "backend connected");
    let (sink, stream) = ws.split();
    let frames = stream.filter_map(|m| async move {
        match m {
            Ok(Message::Text(t)) => Some(Ok(t.to_string())),
            Ok(Message::Close(_)) | Err(_) => Some(Err(())),
            Ok(_) => None,
        }
    });
    let sink = sink.with(|text: String| async move {
        Ok::<_, tokio_tungstenite::tungstenite::Error>(Message::Text(text.into()))
    });
    Ok(tokio::spawn(pump_generator(link, frames, sink)))
}

/// Serves the fake generator: every connection gets the full stream.
pub async fn serve_fake_generator(listener: TcpListener, config: FakeGeneratorConfig) -> std::io::Result<()> {
    loop {
        let (tcp, peer) = listener.accept().await?;
        let config = config.clone();
        tokio::spawn(async move {
            let ws = match tokio_tungstenite::accept_async(tcp).await {
                Ok(ws) => ws,
                Err(e) => {
                    tracing::warn!(%peer, "handshake failed: {e}");
                    return;
                }
            };
            tracing::info!(%peer, "engine connected");
            let stats = Arc::new(GeneratorStats::default());
            run_over_socket(ws, config, stats).await;
        });
    }
}

/// Dials an engine's `/ingest` endpoint and streams into it.
pub async fn connect_fake_generator(
    url: &str,
    config: FakeGeneratorConfig,
    stats: Arc<GeneratorStats>,
) -> Result<(), AttachError> {
    let (ws, _) = tokio_tungstenite::connect_async(url)
        .await
        .map_err(|source| AttachError::Connect {
            url: url.to_owned(),
            source,
        })?;
    run_over_socket(ws, config, stats).await;
    Ok(())
}

async fn run_over_socket<S>(
    ws: tokio_tungstenite::WebSocketStream<S>,
    config: FakeGeneratorConfig,
    stats: Arc<GeneratorStats>,
) where
    S: tokio::io::AsyncRead + tokio::io::AsyncWrite + Unpin + Send + 'static,
{
    let (sink, stream) = ws.split();
    let inbound = stream
        .take_while(|m| std::future::ready(matches!(m, Ok(m) if !m.is_close())))
        .filter_map(|m| async move {
            match m {
                Ok(Message::Text(t)) => Some(t.to_string()),
                _ => None,
            }
        });
    let mut sink = Box::pin(sink.with(|text: String| async move {
        Ok::<_, tokio_tungstenite::tungstenite::Error>(Message::Text(text.into()))
    }));
    if let Err(e) = drive(config, &mut sink, Box::pin(inbound), stats).await {
        tracing::warn!("generator connection failed: {e}");
        return;
    }
    // Let the engine drain before closing.
    let _ = sink.close().await;
}
