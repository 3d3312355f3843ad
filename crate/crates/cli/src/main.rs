mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use serde::Deserialize;

use args::{Cli, Command, Layer};

/// Exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage = 2,
    Data = 3,
    Runtime = 4,
}

impl Kind {
    fn label(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Data => "data",
            Kind::Runtime => "runtime",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub fn fail(kind: Kind, error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        kind,
        error: error.into(),
    }
}

pub fn usage(message: impl Into<String>) -> Failure {
    fail(Kind::Usage, anyhow::anyhow!(message.into()))
}

/// Attach an exit class (and optionally context) to any error.
pub trait Classify<T> {
    fn or_fail(self, kind: Kind, context: &str) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_fail(self, kind: Kind, context: &str) -> Outcome<T> {
        self.map_err(|e| fail(kind, e.into().context(context.to_owned())))
    }
}

/// The `--config` file split by subcommand.
#[derive(Debug, Default)]
pub struct ConfigFile {
    pub service: toml::Table,
    pub gen_pools: args::GenPoolsArgs,
    pub simulate: args::SimulateArgs,
    pub report: args::ReportArgs,
    pub synth: args::SynthArgs,
}

fn section<T: for<'de> Deserialize<'de> + Default>(table: &mut toml::Table, key: &str) -> Outcome<T> {
    match table.remove(key) {
        None => Ok(T::default()),
        Some(v) => v
            .try_into()
            .map_err(|e: toml::de::Error| usage(format!("config section [{key}]: {e}"))),
    }
}

fn load_config(path: Option<&std::path::Path>) -> Outcome<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).or_fail(Kind::Usage, &format!("cannot read config {}", path.display()))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| usage(format!("config {}: {e}", path.display())))?;
    Ok(ConfigFile {
        gen_pools: section(&mut table, "gen-pools")?,
        simulate: section(&mut table, "simulate")?,
        report: section(&mut table, "report")?,
        synth: section(&mut table, "synth-data")?,
        service: table,
    })
}

fn run(cli: Cli) -> Outcome {
    let file = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Serve(a) => commands::serve(a, file.service),
        Command::GenPools(a) => commands::gen_pools(a.under(file.gen_pools)),
        Command::Simulate(a) => commands::simulate(a.under(file.simulate)),
        Command::Report(a) => commands::report(a.under(file.report)),
        Command::Replay(a) => commands::replay(a),
        Command::SynthData(a) => commands::synth_data(a.under(file.synth)),
    }
}

fn report_failure(kind: Kind, message: String, usage_text: Option<String>) -> ExitCode {
    let mut line = serde_json::json!({
        "error": kind.label(),
        "exit_code": kind as u8,
        "message": message,
    });
    if let Some(u) = usage_text {
        line["usage"] = serde_json::Value::String(u);
    }
    eprintln!("{line}");
    ExitCode::from(kind as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&message).trim_start_matches("error: ").to_owned();
            return report_failure(Kind::Usage, first, Some(usage_line()));
        }
    };
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log).unwrap_or_else(|_| "info".into());
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let usage_text = (f.kind == Kind::Usage).then(usage_line);
            report_failure(f.kind, format!("{:#}", f.error), usage_text)
        }
    }
}

fn usage_line() -> String {
    use clap::CommandFactory;
    Cli::command().render_usage().to_string()
}
