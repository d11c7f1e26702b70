use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use contexty_core::engine::Session;
use contexty_core::Timestamp;
use contexty_service::{cli, router, ApiError, ServiceConfig};

#[derive(Parser)]
#[command(name = "contexty", version, about = "Context-memory engine service and tools")]
struct Args {
    /// TOML config file; CONTEXTY_<SECTION>_<KEY> variables override it.
    #[arg(long, global = true, env = "CONTEXTY_CONFIG")]
    config: Option<PathBuf>,
    /// Session data directory (overrides server.data_dir).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        /// Listen address (overrides server.bind).
        #[arg(long)]
        bind: Option<std::net::SocketAddr>,
    },
    /// Capture text files as snippets and images as observations.
    Ingest {
        path: PathBuf,
        #[arg(long, default_value = "default")]
        session: String,
        /// Capture images as image snippets instead of observations.
        #[arg(long)]
        images_as_snippets: bool,
    },
    /// Replay a session log and print its canonical tree.
    Replay {
        /// Session id, session directory or log file.
        session: String,
        /// Compare against this golden tree and fail on mismatch.
        #[arg(long)]
        expect: Option<PathBuf>,
    },
    /// Rank a session's memories for a query with the score breakdown.
    Score {
        #[arg(long)]
        query: String,
        /// Session id, session directory or log file.
        #[arg(long)]
        session: String,
        /// Evaluation time in epoch milliseconds (default: now).
        #[arg(long)]
        now: Option<i64>,
        #[arg(long)]
        json: bool,
    },
    /// Compute NCD, ROUGE-L and Jaccard statistics over a response-pair corpus.
    ProbeCalibrate {
        corpus: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Print the 64-hex perceptual hash of an image.
    Hash { image: PathBuf },
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, ApiError> {
    serde_json::to_string_pretty(v).map_err(|e| ApiError::internal(e.to_string()))
}

fn run(args: Args) -> Result<(), ApiError> {
    let mut cfg = ServiceConfig::load(args.config.as_deref())?;
    if let Some(dir) = args.data_dir {
        cfg.server.data_dir = dir;
    }
    let engine = cfg.engine();
    match args.command {
        Command::Serve { bind } => {
            let addr = bind.unwrap_or(cfg.server.bind);
            if !addr.ip().is_loopback() {
                tracing::warn!(%addr, "binding to a non-loopback address");
            }
            let app = Arc::new(cli::app_state(&cfg)?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| ApiError::internal(e.to_string()))?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .map_err(|e| ApiError::internal(format!("cannot bind {addr}: {e}")))?;
                tracing::info!(%addr, "listening");
                axum::serve(listener, router(app))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await
                    .map_err(|e| ApiError::internal(e.to_string()))
            })
        }
        Command::Ingest {
            path,
            session,
            images_as_snippets,
        } => {
            let app = cli::app_state(&cfg)?;
            let handle: Arc<Session> = if app.store().exists(&session) {
                app.session(&session)?
            } else {
                app.create_session(Some(session))?
            };
            for line in cli::ingest(&handle, &path, images_as_snippets)? {
                println!("{}", serde_json::to_string(&line).map_err(|e| ApiError::internal(e.to_string()))?);
            }
            Ok(())
        }
        Command::Replay { session, expect } => {
            let tree = cli::replay_canonical(&session, &cfg.server.data_dir, &engine)?;
            if let Some(golden) = expect {
                let want = std::fs::read_to_string(&golden).map_err(|e| ApiError::not_found(format!("{}: {e}", golden.display())))?;
                if want != tree {
                    return Err(ApiError::conflict(format!("replayed tree differs from {}", golden.display())));
                }
            }
            print!("{tree}");
            Ok(())
        }
        Command::Score { query, session, now, json } => {
            let state = cli::replay_state(&session, &cfg.server.data_dir, &engine)?;
            let now = now.map_or_else(|| contexty_core::engine::system_clock()(), Timestamp);
            let rows = cli::score(&state, &query, now, &engine);
            if json {
                println!("{}", to_json(&rows)?);
            } else {
                print!("{}", cli::render_scores(&rows));
            }
            Ok(())
        }
        Command::ProbeCalibrate { corpus, tau } => {
            let report = cli::calibrate(&corpus, tau.unwrap_or(engine.probe.tau))?;
            println!("{}", to_json(&report)?);
            Ok(())
        }
        Command::Hash { image } => {
            println!("{}", cli::hash_file(&image)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(match e.code {
                contexty_service::ErrorCode::BadRequest => 2,
                contexty_service::ErrorCode::NotFound => 3,
                contexty_service::ErrorCode::Conflict => 4,
                contexty_service::ErrorCode::ProviderUnavailable => 5,
                contexty_service::ErrorCode::Internal => 1,
            })
        }
    }
}
