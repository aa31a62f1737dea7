mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use tbscreen_core::CoreError;

use args::{Cli, Command};

/// Failures of the computation itself, as opposed to bad input.
fn is_computational(e: &CoreError) -> bool {
    matches!(
        e,
        CoreError::Diverged { .. }
            | CoreError::NonIdentifiable(_)
            | CoreError::NotPositiveDefinite
            | CoreError::DegenerateVariance(_)
            | CoreError::Nn(_)
    )
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<CoreError>()) {
        Some(core) if is_computational(core) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Score(a) => commands::score(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Stats(a) => commands::stats(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
