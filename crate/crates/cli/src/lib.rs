//! Command-line entry points and the HTTP service.

pub mod args;
pub mod commands;
pub mod config;
pub mod service;

use std::ffi::OsString;

use clap::{CommandFactory, FromArgMatches, Parser};

use args::{Cli, Command};

const COMMANDS: [&str; 5] = ["synth", "train", "eval", "generate", "serve"];

/// Parses `args`, folding in the config file when one is named. Clap errors
/// carry their own exit status.
pub fn parse(args: Vec<OsString>) -> anyhow::Result<Result<Cli, clap::Error>> {
    let first = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => return Ok(Err(e)),
    };
    let Some(path) = &first.config else {
        return Ok(Ok(first));
    };
    let value = config::load(path)?;
    let name = first.command.name();
    let flags = config::flags_for(&value, name, &COMMANDS)?;
    let merged = config::splice(&args, name, flags);
    let mut matches = match Cli::command().try_get_matches_from(merged) {
        Ok(m) => m,
        Err(e) => return Ok(Err(e)),
    };
    Ok(Cli::from_arg_matches_mut(&mut matches))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Generate(a) => commands::generate_cmd(a),
        Command::Serve(a) => tokio::runtime::Runtime::new()?.block_on(commands::serve_cmd(a)),
    }
}

/// Machine-readable code for an error chain.
pub fn error_code(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<anomaly_vqa::Error>() {
            return e.code();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "Io";
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() || cause.downcast_ref::<toml::de::Error>().is_some() {
            return "Config";
        }
    }
    "Failed"
}
