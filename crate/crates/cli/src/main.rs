use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use provega_cli::generator::{synthesize, write_records, GeneratorSpec, SyntheticKind};
use provega_cli::run::{self, RunOptions};
use provega_cli::serve::{self, ServeOptions};
use provega_cli::gallery;
use provega_core::spec::{ReadingConfig, ReadingMethod};
use provega_server::GeneratorStats;

#[derive(Parser)]
#[command(name = "provega", version, about = "Progressive data-analysis engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a session headlessly and write a trace, one JSON line per changeset.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Data file overriding the spec's data source.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        trace: PathBuf,
        /// Overrides the reading seed (and the processor seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Use the wall clock instead of virtual time.
        #[arg(long)]
        realtime: bool,
        /// Overrides the reading frequency, in milliseconds.
        #[arg(long)]
        frequency: Option<u64>,
        /// Fake generator settings for a WebSocket source.
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Stop reading generator frames while this many rows are buffered.
        #[arg(long)]
        max_buffer_rows: Option<usize>,
    },
    /// Host a live session for UI clients and generators.
    Serve {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Dial this generator instead of waiting on /ingest.
        #[arg(long)]
        backend: Option<String>,
        /// Overridden by PROVEGA_PORT.
        #[arg(long, default_value_t = serve::DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory with the built UI bundle.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        #[arg(long)]
        max_buffer_rows: Option<usize>,
    },
    /// Example bundles.
    Gallery {
        #[command(subcommand)]
        action: GalleryAction,
    },
    /// Write a synthetic dataset.
    Generate {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Clusters, for blobs.
        #[arg(long)]
        k: Option<usize>,
        /// `.csv` or `.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a chunk plan, one JSON array of row indices per line.
    Plan {
        #[arg(long)]
        rows: usize,
        #[arg(long, value_enum, default_value = "ascending")]
        method: Method,
        #[arg(long)]
        chunk_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check a spec and print it with defaults filled in.
    Validate {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Run the reference fake generator.
    FakeGenerator {
        #[arg(long)]
        config: PathBuf,
        /// Listen for an engine that dials out (`serve --backend`).
        #[arg(long, conflicts_with = "connect")]
        listen: Option<String>,
        /// Dial an engine's /ingest endpoint.
        #[arg(long)]
        connect: Option<String>,
    },
}

#[derive(Subcommand)]
enum GalleryAction {
    List,
    Export {
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Taxi,
    Blobs,
    Scatter,
    Ring,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Ascending,
    Descending,
    Random,
}

fn init_logging(default: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            spec,
            data,
            trace,
            seed,
            max_steps,
            realtime,
            frequency,
            generator,
            max_buffer_rows,
        } => {
            init_logging("warn");
            let opts = RunOptions {
                spec,
                data,
                trace,
                seed,
                max_steps,
                realtime,
                frequency,
                generator,
                max_buffer_rows,
            };
            match run::execute(&opts) {
                Ok(code) => ExitCode::from(code as u8),
                Err(f) => {
                    eprintln!("error: {}", f.message);
                    ExitCode::from(f.code as u8)
                }
            }
        }
        Command::Serve {
            spec,
            data,
            backend,
            port,
            host,
            ui_dir,
            max_buffer_rows,
        } => {
            init_logging("info");
            let result = serve::effective_port(port, std::env::var(serve::PORT_ENV).ok().as_deref())
                .and_then(|port| {
                    let opts = ServeOptions {
                        spec,
                        data,
                        backend,
                        port,
                        host,
                        ui_dir,
                        max_buffer_rows,
                    };
                    tokio::runtime::Runtime::new()?.block_on(serve::serve(opts))
                });
            report(result)
        }
        Command::Gallery { action } => match action {
            GalleryAction::List => {
                for b in gallery::BUNDLES {
                    println!("{:<24} {}", b.name, b.description);
                }
                ExitCode::SUCCESS
            }
            GalleryAction::Export { name, out } => {
                let Some(bundle) = gallery::find(&name) else {
                    eprintln!("error: no bundle named `{name}` (see `provega gallery list`)");
                    return ExitCode::FAILURE;
                };
                report(bundle.export(&out).map_err(Into::into))
            }
        },
        Command::Generate {
            kind,
            rows,
            seed,
            k,
            out,
        } => {
            let kind = match kind {
                Kind::Taxi => SyntheticKind::Taxi,
                Kind::Blobs => SyntheticKind::Blobs,
                Kind::Scatter => SyntheticKind::Scatter,
                Kind::Ring => SyntheticKind::Ring,
            };
            report(write_records(&out, &synthesize(kind, rows, seed, k)))
        }
        Command::Plan {
            rows,
            method,
            chunk_size,
            seed,
        } => {
            let reading = ReadingConfig {
                method: match method {
                    Method::Ascending => ReadingMethod::Ascending,
                    Method::Descending => ReadingMethod::Descending,
                    Method::Random => ReadingMethod::Random,
                },
                chunk_size,
                auto_chunk_size: false,
                frequency_ms: 250,
                seed,
            };
            match provega_core::plan_chunks(rows, &reading) {
                Ok(plan) => {
                    let mut out = String::new();
                    for c in &plan.chunks {
                        out.push_str(&serde_json::to_string(c).expect("indices serialize"));
                        out.push('\n');
                    }
                    print!("{out}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Validate { spec } => match run::load_spec(&spec) {
            Ok(s) => {
                println!("{}", s.to_json_string());
                ExitCode::SUCCESS
            }
            Err(f) => {
                eprintln!("error: {}", f.message);
                ExitCode::from(f.code as u8)
            }
        },
        Command::FakeGenerator {
            config,
            listen,
            connect,
        } => {
            init_logging("info");
            let result = GeneratorSpec::load(&config).and_then(|g| {
                let rt = tokio::runtime::Runtime::new()?;
                rt.block_on(async {
                    let cfg = g.fake_config(true);
                    match (listen, connect) {
                        (_, Some(url)) => {
                            let stats = Arc::new(GeneratorStats::default());
                            provega_server::connect_fake_generator(&url, cfg, stats.clone()).await?;
                            tracing::info!(sent = stats.sent(), acked = stats.acked(), "generator finished");
                            Ok(())
                        }
                        (listen, None) => {
                            let addr = listen.unwrap_or_else(|| "127.0.0.1:8765".into());
                            let listener = tokio::net::TcpListener::bind(&addr).await?;
                            tracing::info!(%addr, "fake generator listening");
                            provega_server::serve_fake_generator(listener, cfg).await?;
                            Ok(())
                        }
                    }
                })
            });
            report(result)
        }
    }
}

fn report(result: anyhow::Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
