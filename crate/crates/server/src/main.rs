use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use salient_teach_core::load_backbone;
use salient_teach_server::{bind, ServerConfig};
use tracing_subscriber::EnvFilter;

/// Serve teaching sessions over WebSocket at `/ws`.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// ONNX model path or `test:<seed>:<K>:<h>:<w>`.
    #[arg(long)]
    backbone: String,
    /// Concurrent connections allowed; extra ones are refused.
    #[arg(long, default_value_t = 8)]
    max_sessions: usize,
    /// Directory with the browser client, served under /ui.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("SALIENT_TEACH_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    anyhow::ensure!(args.max_sessions > 0, "--max-sessions must be at least 1");
    let backbone = load_backbone(&args.backbone).with_context(|| format!("loading backbone {}", args.backbone))?;
    tracing::info!(id = backbone.id(), shape = %backbone.output_shape(), "backbone ready");
    let config = ServerConfig { max_sessions: args.max_sessions, ui_dir: args.ui_dir };
    let (addr, server) = bind(args.listen, Arc::new(backbone), &config).await?;
    tracing::info!(%addr, "listening");
    tokio::select! {
        res = server => res?,
        _ = tokio::signal::ctrl_c() => tracing::info!("shutting down"),
    }
    Ok(())
}
