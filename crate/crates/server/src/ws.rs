//! HTTP surface: `/session` for UI clients, `/ingest` for generators, and the
//! static UI bundle for everything else.

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use futures::{Sink, SinkExt, Stream, StreamExt};
use provega_core::protocol::{encode, EngineToGenerator};
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

use crate::runner::{GeneratorLink, SessionHandle};

pub fn router(handle: SessionHandle, ui_dir: Option<PathBuf>) -> Router {
    let app = Router::new()
        .route("/session", get(session_ws))
        .route("/ingest", get(ingest_ws))
        .with_state(handle);
    match ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    handle: SessionHandle,
    ui_dir: Option<PathBuf>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let addr: SocketAddr = listener.local_addr()?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(handle, ui_dir))
        .with_graceful_shutdown(shutdown)
        .await
}

async fn session_ws(ws: WebSocketUpgrade, State(handle): State<SessionHandle>) -> Response {
    ws.on_upgrade(move |socket| client_connection(socket, handle))
}

async fn ingest_ws(ws: WebSocketUpgrade, State(handle): State<SessionHandle>) -> Response {
    match handle.attach_generator().await {
        Ok(link) => ws
            .on_upgrade(move |socket| async move {
                let (sink, stream) = socket.split();
                let frames = stream.filter_map(|m| async move {
                    match m {
                        Ok(Message::Text(t)) => Some(Ok(t.to_string())),
                        Ok(Message::Close(_)) | Err(_) => Some(Err(())),
                        Ok(_) => None,
                    }
                });
                let sink = sink.with(|text: String| async move {
                    Ok::<_, axum::Error>(Message::Text(text.into()))
                });
                pump_generator(link, frames, sink).await;
            })
            .into_response(),
        Err(e) => (axum::http::StatusCode::CONFLICT, e).into_response(),
    }
}

async fn client_connection(socket: WebSocket, handle: SessionHandle) {
    let Some(mut client) = handle.join().await else {
        return;
    };
    let id = client.id;
    let (mut sink, mut stream) = socket.split();
    let writer = tokio::spawn(async move {
        while let Some(msg) = client.rx.recv().await {
            if sink.send(Message::Text(encode(&msg).into())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    while let Some(frame) = stream.next().await {
        match frame {
            Ok(Message::Text(t)) => handle.client_frame(id, t.to_string()),
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => {}
        }
    }
    handle.leave(id);
    writer.abort();
}

/// Moves frames between a generator connection and the session.
///
/// A frame is read only after the link grants a permit, so while the session
/// holds back permits the frames stay in the transport. Each `ack` the session
/// issues is written back as a text frame. `frames` yields `Err` when the
/// connection closes.
pub async fn pump_generator<F, S, E>(link: GeneratorLink, frames: F, sink: S)
where
    F: Stream<Item = Result<String, ()>> + Send,
    S: Sink<String, Error = E> + Send + 'static,
    E: std::fmt::Display,
{
    let mut frames = Box::pin(frames);
    let mut sink = Box::pin(sink);
    let GeneratorLink {
        gate,
        mut acks,
        feed,
    } = link;
    let writer = tokio::spawn(async move {
        while let Some(batch) = acks.recv().await {
            if let Err(e) = sink.send(encode(&EngineToGenerator::Ack { batch })).await {
                tracing::warn!("cannot send ack {batch}: {e}");
                break;
            }
        }
    });
    loop {
        let Ok(permit) = gate.acquire().await else {
            break;
        };
        permit.forget();
        match frames.next().await {
            Some(Ok(text)) => feed.frame(text),
            Some(Err(())) | None => break,
        }
    }
    feed.gone();
    writer.abort();
}
