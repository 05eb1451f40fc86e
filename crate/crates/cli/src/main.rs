mod augment;
mod cli;
mod commands;

use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;

use cli::{Args, Command};

const THREADS_ENV: &str = "MITOFUSE_THREADS";

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => {
            let n = v
                .trim()
                .parse()
                .with_context(|| format!("{THREADS_ENV}={v} is not a thread count"))?;
            Ok(Some(n))
        }
        _ => Ok(None),
    }
}

#[cfg(feature = "parallel")]
fn init_pool(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn init_pool(_threads: Option<usize>) -> Result<()> {
    Ok(())
}

fn run(args: Args) -> Result<()> {
    init_pool(thread_count(args.threads)?)?;
    match args.command {
        Command::Tile(a) => commands::tile(a),
        Command::Fuse(a) => commands::fuse(a),
        Command::Eval(a) => commands::eval(a),
        Command::Augment(a) => augment::run(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Split(a) => commands::split(a),
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mitofuse: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
