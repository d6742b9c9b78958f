//! `casa-nlu` command-line tool.

mod commands;
mod config;
mod heatmap;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};

use config::RunConfig;

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

const COMMANDS: &[(&str, &str)] = &[
    ("gen-data", "Generate a synthetic conversational corpus as JSONL"),
    ("train", "Train one model per seed and report seed-averaged metrics"),
    ("eval", "Evaluate checkpoints and print a metrics report"),
    ("ablate", "Train and evaluate a grid of history-signal configurations"),
    ("viz-attention", "Export per-signal turn attention for one turn, optionally as a heatmap"),
];

fn cli() -> Command {
    let mut app = Command::new("casa-nlu")
        .about("Context-aware intent classification and slot labeling for multi-turn dialogue")
        .version(clap::crate_version!())
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(name, about) in COMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value file; command-line options override it"),
        );
        for k in config::keys(name) {
            sub = sub.arg(Arg::new(k.name).long(k.name).value_name("VALUE").help(k.help));
        }
        app = app.subcommand(sub);
    }
    app
}

fn resolve(name: &str, m: &ArgMatches) -> Result<RunConfig, Failure> {
    let overrides: Vec<(String, String)> = config::keys(name)
        .iter()
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    RunConfig::resolve(name, m.get_one::<PathBuf>("config").map(PathBuf::as_path), overrides)
}

fn run(name: &str, m: &ArgMatches) -> Result<(), Failure> {
    let cfg = resolve(name, m)?;
    match name {
        "gen-data" => commands::gen_data(&cfg),
        "train" => commands::train_cmd(&cfg),
        "eval" => commands::eval_cmd(&cfg),
        "ablate" => commands::ablate_cmd(&cfg),
        "viz-attention" => commands::viz_cmd(&cfg),
        other => Err(Failure::Config(format!("unknown command {other}"))),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("casa-nlu {name}: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
