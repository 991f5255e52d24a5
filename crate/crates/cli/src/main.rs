mod args;
mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::commands::Context;
use crate::config::FileConfig;
use crate::error::{require, CliError};

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::Config("--threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    if let Some(path) = &cli.config {
        require(path, "config file")?;
    }
    let ctx = Context {
        config: FileConfig::load(cli.config.as_deref())?,
        seed: cli.seed,
        out: cli.out,
    };
    match &cli.command {
        Command::TrainHead(a) => commands::train_head(&ctx, a),
        Command::Parcelize(a) => commands::parcelize(&ctx, a),
        Command::FitSegments(a) => commands::fit_segments(&ctx, a),
        Command::Segment(a) => commands::segment_cmd(&ctx, a),
        Command::EvalDice(a) => commands::eval_dice(&ctx, a),
        Command::IndexViews(a) => commands::index_views(&ctx, a),
        Command::ClassifyViews(a) => commands::classify_views(&ctx, a),
        Command::RenderOverlay(a) => commands::render_overlay_cmd(&ctx, a),
        Command::MakeSynthetic(a) => commands::make_synthetic(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ALAN_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
