use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use quill_core::backend::connect;
use quill_core::{
    BackendDescriptor, BackendFormat, Endpoint, GenerationParams, MetaRules, Postprocessor,
    TaskRegistry,
};
use quill_service::{http, IdMode, ServiceConfig, SessionService};

#[derive(Debug, Parser)]
#[command(name = "quill-server", about = "Story-writing assistant session server")]
struct Args {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Generation endpoint URL, or `mock` for the offline backend.
    #[arg(long, default_value = "mock")]
    backend_url: Endpoint,
    /// Prompt format the endpoint expects.
    #[arg(long, default_value = "dialog")]
    backend_format: BackendFormat,
    /// Directory of `<kind>.txt` templates overriding the built-ins.
    #[arg(long)]
    template_dir: Option<PathBuf>,
    /// Meta-text rules file replacing the built-in one.
    #[arg(long)]
    rules_file: Option<PathBuf>,
    /// Where sessions and the interaction corpus are written. Memory only if unset.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    default_top_k: u32,
    #[arg(long, default_value_t = 3)]
    default_candidates: u32,
    #[arg(long, default_value_t = 1024)]
    default_max_chars: u32,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
    /// Fixed seed for the mock backend.
    #[arg(long)]
    seed: Option<u64>,
    /// Number sessions s1, s2, ... instead of random ids.
    #[arg(long)]
    sequential_ids: bool,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .init();
    let args = Args::parse();

    let registry = match &args.template_dir {
        Some(dir) => TaskRegistry::load_dir(dir).context("loading templates")?,
        None => TaskRegistry::builtin(),
    };
    let rules = match &args.rules_file {
        Some(path) => MetaRules::load(path).context("loading meta-text rules")?,
        None => MetaRules::default(),
    };
    let mut backends = vec![connect(BackendDescriptor::mock())];
    let default_backend = match &args.backend_url {
        Endpoint::Mock => "mock".to_owned(),
        endpoint => {
            backends.push(connect(BackendDescriptor {
                id: "default".into(),
                format: args.backend_format,
                endpoint: endpoint.clone(),
            }));
            "default".to_owned()
        }
    };
    let default_params = GenerationParams {
        top_k: args.default_top_k,
        num_candidates: args.default_candidates,
        max_response_chars: args.default_max_chars,
        seed: args.seed,
        timeout_ms: args.timeout_ms,
    };
    default_params.validate()?;

    let service = SessionService::new(ServiceConfig {
        registry,
        postprocessor: Postprocessor::new(rules),
        backends,
        default_backend,
        default_params,
        data_dir: args.data_dir,
        ids: if args.sequential_ids {
            IdMode::Sequential
        } else {
            IdMode::Random
        },
    })?;

    let addr = SocketAddr::new(args.host, args.port);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, http::router(Arc::new(service)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
