use std::path::PathBuf;
use std::process::ExitCode;

use failprobe_service::config::ServiceConfig;
use failprobe_service::{app, AppState};
use tracing_subscriber::EnvFilter;

const ENV_CONFIG: &str = "FAILPROBE_CONFIG";

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();

    let path = std::env::args_os().nth(1).map(PathBuf::from).or_else(|| std::env::var_os(ENV_CONFIG).map(PathBuf::from));
    let config = match path {
        Some(p) => match ServiceConfig::load(&p) {
            Ok(c) => c,
            Err(e) => {
                tracing::error!("{e}");
                return ExitCode::from(2);
            }
        },
        None => ServiceConfig::default(),
    };
    let config = config.with_env(|k| std::env::var(k).ok());
    let listen = config.listen.clone();
    let state = match AppState::from_config(config) {
        Ok(s) => s,
        Err(e) => {
            tracing::error!("{e}");
            return ExitCode::from(2);
        }
    };
    let listener = match tokio::net::TcpListener::bind(&listen).await {
        Ok(l) => l,
        Err(e) => {
            tracing::error!("binding {listen}: {e}");
            return ExitCode::from(5);
        }
    };
    tracing::info!("listening on {listen}");
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    if let Err(e) = axum::serve(listener, app(state)).with_graceful_shutdown(shutdown).await {
        tracing::error!("{e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
