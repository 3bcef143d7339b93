//! `maskctl`: run the foreground-mask pipeline over a dataset manifest.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 gradient check failed.

mod cli;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use cli::{Cli, Command};
use commands::{Fatal, Overrides, Status};

fn configure_threads() -> Result<(), Fatal> {
    let Ok(raw) = std::env::var("MASKCTL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Fatal::Usage(format!("MASKCTL_THREADS={raw:?} is not a positive integer")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Fatal::Usage(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> Result<Status, Fatal> {
    configure_threads()?;
    let none = Overrides {
        iterations: None,
        lambda: None,
        num_candidates: None,
        r: None,
    };
    match cli.command {
        Command::Fuse { common } => commands::fuse(&common.manifest, &common.out),
        Command::Mask { common, tuning } => {
            let o = Overrides {
                iterations: tuning.iterations,
                ..none
            };
            let cfg = commands::load_config(tuning.config.as_deref(), &o)?;
            commands::mask(&common.manifest, &cfg, &common.out)
        }
        Command::Candidates {
            common,
            tuning,
            lambda,
            num_candidates,
        } => {
            let o = Overrides {
                iterations: tuning.iterations,
                lambda,
                num_candidates,
                r: None,
            };
            let cfg = commands::load_config(tuning.config.as_deref(), &o)?;
            commands::candidates(&common.manifest, &cfg, &common.out)
        }
        Command::Loss {
            manifest,
            config,
            out,
            variant,
            r,
        } => {
            let cfg = commands::load_config(config.as_deref(), &Overrides { r, ..none })?;
            commands::loss(&manifest, &cfg, variant, out.as_deref())
        }
        Command::Eval {
            pred_dir,
            gt_dir,
            num_classes,
            json,
        } => commands::eval(&pred_dir, &gt_dir, num_classes, json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(Status::Usage as u8),
            };
        }
    };
    let status = match run(cli) {
        Ok(s) => s,
        Err(Fatal::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            Status::Usage
        }
        Err(Fatal::Data(e)) => {
            eprintln!("error: {e:#}");
            Status::Data
        }
    };
    ExitCode::from(status as u8)
}
