mod args;
mod commands;
mod manifest;

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use serde::de::DeserializeOwned;
use serde::Serialize;

use args::{Cli, Command};

/// Failure split by exit code: bad input is 2, anything that fails while running is 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn usage(msg: impl std::fmt::Display) -> Self {
        CliError::Usage(msg.to_string())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<dynacq::Error> for CliError {
    fn from(e: dynacq::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Applies the keys of a `--config` JSON object on top of the parsed flags.
pub fn resolve<T: Serialize + DeserializeOwned>(args: &T, config: Option<&Path>) -> CliResult<T> {
    let Some(path) = config else {
        return serde_json::from_value(serde_json::to_value(args)?).map_err(CliError::usage);
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("config {}: {}", path.display(), e)))?;
    let over: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {}", path.display(), e)))?;
    let serde_json::Value::Object(over) = over else {
        return Err(CliError::usage(format!("config {} must be a JSON object", path.display())));
    };
    let mut base = serde_json::to_value(args)?;
    let obj = base.as_object_mut().expect("args serialize to an object");
    for (k, v) in over {
        obj.insert(k, v);
    }
    serde_json::from_value(base).map_err(|e| CliError::usage(format!("config {}: {}", path.display(), e)))
}

fn report(kind: &str, message: &str) {
    let err = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{}", err);
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{}", e);
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    let res = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Refine(a) => commands::refine(a),
        Command::Eval(a) => commands::eval(a),
        Command::StackEval(a) => commands::stack_eval(a),
        Command::Export(a) => commands::export(a),
        Command::Metrics(a) => commands::metrics(a),
    };
    match res {
        Ok(summary) => {
            println!("{}", summary);
            ExitCode::SUCCESS
        }
        Err(CliError::Usage(m)) => {
            report("usage", &m);
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            report("runtime", &format!("{:#}", e));
            ExitCode::from(1)
        }
    }
}
