//! `agt`: train certified models, certify queries, evaluate private release
//! and check bounds against brute-force retraining.
//!
//! Exit codes: 0 on success, 1 when the oracle finds a parameter outside its
//! box, 2 on any usage, config or I/O error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use agt::Mode;
use clap::{Args, Parser, Subcommand};

use commands::{Outcome, Run};

#[derive(Parser)]
#[command(name = "agt", version, about = "Abstract gradient training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace every seed in the config with values derived from this one.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Args)]
struct BundleArgs {
    #[command(flatten)]
    common: Common,
    /// Bundle directory written by `train`. Defaults to --out.
    #[arg(long)]
    bundle: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    bundle: BundleArgs,
    /// CSV of query points. Defaults to the config's held-out split.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the nominal model and one parameter box per k.
    Train(Common),
    /// Certify held-out queries against a bundle.
    Certify(QueryArgs),
    /// Compare global and smooth-sensitivity noisy release.
    PrivacyEval(QueryArgs),
    /// Retrain on perturbed datasets and check every box.
    Oracle {
        #[command(flatten)]
        bundle: BundleArgs,
        /// Check boxes shrunk to half their width, which should fail.
        #[arg(long)]
        negative_control: bool,
    },
    /// Certify queries against an unlearning bundle.
    UnlearningEval(QueryArgs),
}

impl BundleArgs {
    fn context(&self) -> anyhow::Result<(Run, PathBuf)> {
        let c = &self.common;
        let ctx = Run::new(&c.config, &c.out, c.seed_override)?;
        let dir = self.bundle.clone().unwrap_or_else(|| c.out.clone());
        Ok((ctx, dir))
    }
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Train(c) => commands::train(&Run::new(&c.config, &c.out, c.seed_override)?),
        Command::Certify(q) => {
            let (ctx, dir) = q.bundle.context()?;
            commands::certify(&ctx, &dir, q.data.as_deref(), None)
        }
        Command::UnlearningEval(q) => {
            let (ctx, dir) = q.bundle.context()?;
            commands::certify(&ctx, &dir, q.data.as_deref(), Some(Mode::Unlearning))
        }
        Command::PrivacyEval(q) => {
            let (ctx, dir) = q.bundle.context()?;
            commands::privacy_eval(&ctx, &dir, q.data.as_deref())
        }
        Command::Oracle {
            bundle,
            negative_control,
        } => {
            let (ctx, dir) = bundle.context()?;
            commands::oracle(&ctx, &dir, negative_control)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Violation) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
