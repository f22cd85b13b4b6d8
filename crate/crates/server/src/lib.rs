//! HTTP service: configuration, accounts, the running platform and the
//! JSON API, plus the client side used by remote workers.

pub mod api;
pub mod auth;
pub mod config;
pub mod platform;
pub mod remote;
pub mod worker_api;

use std::net::SocketAddr;

use tokio::net::TcpListener;

pub use api::router;
pub use config::Config;
pub use platform::Platform;

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(
    platform: std::sync::Arc<Platform>,
    listener: TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let addr: SocketAddr = listener.local_addr()?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(platform)).with_graceful_shutdown(shutdown).await
}
