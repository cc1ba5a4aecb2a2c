//! `provega serve`: a live session behind the WebSocket endpoints.

use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use provega_core::data_source::{load_complete, DataSourceDescriptor};
use provega_core::scheduler::SessionInput;
use provega_core::Session;
use provega_server::{attach_backend, RunnerConfig, SessionHandle};
use tokio::net::TcpListener;

use crate::run::load_spec;

pub const DEFAULT_PORT: u16 = 7878;
pub const PORT_ENV: &str = "PROVEGA_PORT";

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub spec: PathBuf,
    pub data: Option<PathBuf>,
    pub backend: Option<String>,
    pub port: u16,
    pub host: String,
    pub ui_dir: Option<PathBuf>,
    pub max_buffer_rows: Option<usize>,
}

/// `PROVEGA_PORT` wins over the flag.
pub fn effective_port(flag: u16, env: Option<&str>) -> anyhow::Result<u16> {
    match env {
        Some(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{PORT_ENV}={v} is not a port number")),
        None => Ok(flag),
    }
}

pub async fn serve(opts: ServeOptions) -> anyhow::Result<()> {
    let mut spec = load_spec(&opts.spec).map_err(|f| anyhow::anyhow!(f.message))?;
    let base = opts.spec.parent().unwrap_or(std::path::Path::new("."));
    let source = match (&opts.data, &opts.backend) {
        (Some(path), _) => DataSourceDescriptor::file(path),
        (None, Some(url)) => DataSourceDescriptor::websocket(url),
        (None, None) => DataSourceDescriptor::from_spec(&spec, base)
            .context("the spec names no data and --data was not given")?,
    };
    spec = spec.adapted_to(&source);
    spec.validate_for_source(&source)?;
    let input = if source.is_progressive() {
        SessionInput::Progressive
    } else {
        SessionInput::Complete(load_complete(&source)?)
    };
    let session = Session::new(spec, input)?;
    let (handle, task) = SessionHandle::spawn(
        session,
        RunnerConfig {
            autostart: false,
            max_buffer_rows: opts.max_buffer_rows,
        },
    );
    if let Some(url) = &opts.backend {
        attach_backend(&handle, url).await?;
    } else if source.is_progressive() {
        tracing::info!("waiting for a generator on /ingest");
    }
    let addr: SocketAddr = format!("{}:{}", opts.host, opts.port)
        .parse()
        .context("invalid listen address")?;
    let listener = TcpListener::bind(addr)
        .await
        .with_context(|| format!("cannot bind {addr}"))?;
    if let Some(dir) = &opts.ui_dir {
        tracing::info!(dir = %dir.display(), "serving UI bundle");
    }
    provega_server::serve(listener, handle.clone(), opts.ui_dir.clone(), async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    handle.shutdown();
    let _ = task.await;
    Ok(())
}
