//! Command-line driver for the concept-level alignment pipeline.
//!
//! Usage: `conceptseg <command> [--config <path>] [--<key> <value>]...`
//! Commands: synth, train, eval-seg, eval-cls, concepts, visualize.
//! Every configuration key can be set in the config file or overridden by
//! the flag of the same name; `conceptseg help` lists them.

mod commands;
mod config;

use conceptseg::error::Error;
use config::RunConfig;
use std::process::ExitCode;

const COMMANDS: &str = "commands:
  synth       generate a synthetic image-caption dataset with masks
  train       train the text encoder against a frozen vision provider
  eval-seg    zero-shot segmentation evaluation (mIoU)
  eval-cls    zero-shot classification evaluation (accuracy)
  concepts    extract concepts and token spans from a caption file
  visualize   PCA dense-feature visualizations at multiple resolutions
  help        show this message and all configuration keys";

fn parse_args(args: &[String]) -> Result<RunConfig, Error> {
    let mut config = RunConfig::default();
    let mut i = 0;
    // First pass: apply config files so flags override them.
    while i < args.len() {
        if args[i] == "--config" {
            let path = args
                .get(i + 1)
                .ok_or_else(|| Error::Config("--config needs a path".into()))?;
            config.load_file(std::path::Path::new(path))?;
            i += 2;
        } else {
            i += 1;
        }
    }
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if arg == "--config" {
            i += 2;
            continue;
        }
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key value, got {arg:?}")))?;
        let value = args
            .get(i + 1)
            .ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
        config.set(key, value)?;
        i += 2;
    }
    Ok(config)
}

fn run() -> Result<(), Error> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        eprintln!("{COMMANDS}\n\n{}", RunConfig::usage());
        return Err(Error::Config("no command given".into()));
    };
    if command == "help" || command == "--help" || command == "-h" {
        println!("{COMMANDS}\n\n{}", RunConfig::usage());
        return Ok(());
    }
    let config = parse_args(&args[1..])?;
    let summary = match command.as_str() {
        "synth" => commands::cmd_synth(&config)?,
        "train" => commands::cmd_train(&config)?,
        "eval-seg" => commands::cmd_eval_seg(&config)?,
        "eval-cls" => commands::cmd_eval_cls(&config)?,
        "concepts" => commands::cmd_concepts(&config)?,
        "visualize" => commands::cmd_visualize(&config)?,
        other => {
            return Err(Error::Config(format!(
                "unknown command {other:?}; try `conceptseg help`"
            )))
        }
    };
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match &e {
                Error::Config(_) | Error::Param(_) => "config",
                Error::NotFound(_) => "not-found",
                Error::Format(_) | Error::Version { .. } => "format",
                Error::Io(_) => "io",
                Error::NonFiniteLoss { .. } => "non-finite-loss",
                _ => "error",
            };
            let line = serde_json::json!({"error": kind, "message": e.to_string()});
            eprintln!("{line}");
            match kind {
                "config" => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
