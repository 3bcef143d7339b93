use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "checkmask", version, about = "Candidate-mask selection service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serve the annotation API.
    Serve {
        #[arg(long, default_value_t = 8090)]
        port: u16,
        /// Directory with manifest.json and candidates/.
        #[arg(long)]
        data_dir: PathBuf,
        /// Selection log (default: <data-dir>/selections.log).
        #[arg(long)]
        log_path: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Write the selected masks, manifest.json and stats.json to a directory.
    Export {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        log_path: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Serve {
            port,
            data_dir,
            log_path,
            host,
        } => {
            let state = checkmask::open_state(&data_dir, log_path.as_deref())?;
            let addr: SocketAddr = format!("{host}:{port}").parse().context("listen address")?;
            let listener = tokio::net::TcpListener::bind(addr)
                .await
                .with_context(|| format!("binding {addr}"))?;
            eprintln!("checkmask listening on http://{}", listener.local_addr()?);
            axum::serve(listener, checkmask::router(state))
                .with_graceful_shutdown(async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await?;
        }
        Command::Export {
            data_dir,
            log_path,
            out,
        } => {
            let state = checkmask::open_state(&data_dir, log_path.as_deref())?;
            let records = state.log.lock().expect("log lock").records().to_vec();
            let export = checkmask::export::build(&state.dataset, &records)?;
            export.write_to(&out)?;
            println!("exported {} mask(s) to {}", export.stats.count, out.display());
        }
    }
    Ok(())
}
