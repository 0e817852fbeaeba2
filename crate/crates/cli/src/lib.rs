//! Command-line front end: phantoms, training, prediction, evaluation,
//! cohort assessment and attention rendering.
//!
//! Exit codes: 0 on success, 1 for runtime failures, 2 for usage and
//! validation errors.

mod args;
mod commands;
mod image;
mod settings;

use std::path::Path;

pub use args::{
    AssessArgs, Cli, Command, Component, EvaluateArgs, Format, LabelArgs, PhantomArgs, PredictArgs,
    Preset, SliceSpec, TrainArgs, VizArgs,
};
pub use image::jet;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// A failed command: the message for stderr and the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        Self::runtime(format!("{}: {e}", path.display()))
    }
}

impl From<hdan::Error> for Failure {
    fn from(e: hdan::Error) -> Self {
        let code = if e.is_validation() {
            EXIT_USAGE
        } else {
            EXIT_RUNTIME
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub fn init_logging(quiet: bool) {
    let level = if quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .try_init();
}

fn init_threads(threads: Option<u16>) -> Result<(), Failure> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
            .map_err(|e| Failure::runtime(format!("thread pool: {e}")))?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    init_threads(cli.threads)?;
    match &cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Assess(a) => commands::assess(a),
        Command::VizAttention(a) => commands::viz_attention(a),
    }
}
