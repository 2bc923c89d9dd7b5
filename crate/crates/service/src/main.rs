use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;
use roireg_service::{router, Store, DEFAULT_UPLOAD_LIMIT};

#[derive(Debug, Parser)]
#[command(name = "roireg-serve", version, about = "HTTP session service for interactive registration")]
struct Args {
    #[arg(long, env = "ROIREG_LISTEN", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Directory for persistent sessions; in-memory only when omitted.
    #[arg(long, env = "ROIREG_STORE")]
    store: Option<PathBuf>,
    /// Largest accepted request body, in bytes.
    #[arg(long, env = "ROIREG_UPLOAD_LIMIT", default_value_t = DEFAULT_UPLOAD_LIMIT)]
    upload_limit: usize,
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    tracing_subscriber::fmt().init();
    let args = Args::parse();
    let store = match &args.store {
        Some(dir) => Store::open(dir)?,
        None => Store::in_memory(),
    };
    let app = router(Arc::new(store), args.upload_limit);
    let listener = tokio::net::TcpListener::bind(args.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app).await?;
    Ok(())
}
