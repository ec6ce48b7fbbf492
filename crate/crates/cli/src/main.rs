//! Command-line front end for skillq.

mod commands;
mod config;
mod records;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use skillq::Error;

use commands::{Command, Context};
use config::{ConfigDocument, Format};
use records::{Record, Report, Tag};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("validation checks failed: {}", .0.join(", "))]
    ValidationFailed(Vec<String>),
}

impl CliError {
    fn reason(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Core(e) => e.reason(),
            CliError::Io(_) => "io",
            CliError::ValidationFailed(_) => "validation_failed",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Unstable { .. }) => 2,
            CliError::Core(Error::Tolerance { .. } | Error::AssignmentViolation { .. }) | CliError::ValidationFailed(_) => 3,
            _ => 1,
        }
    }

    fn record(&self) -> Record {
        let mut r = Record::error("error", self.reason(), self.to_string());
        if let CliError::Core(Error::Unstable { witness, margin }) = self {
            r.value["witness"] = serde_json::json!(witness);
            r.value["margin"] = serde_json::json!(margin);
        }
        if let CliError::ValidationFailed(names) = self {
            r.value["failed"] = serde_json::json!(names);
        }
        r
    }
}

#[derive(Debug, Parser)]
#[command(name = "skillq", version, about = "Analyze and simulate skill-based queueing and matching systems")]
struct Cli {
    /// Configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    command: Command,
    /// Overrides the simulation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Writes the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the output format.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Sets a config value, e.g. `--set system.classes.0.arrival=1.1` or `--set analysis.truncation=6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Default number of simulation threads.
    #[arg(long, env = "SKILLQ_THREADS", default_value_t = 1)]
    threads: usize,
}

fn load(cli: &Cli) -> Result<ConfigDocument, CliError> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", cli.config.display())))?;
    ConfigDocument::parse(&text, &cli.overrides)
}

/// Output settings, taken from the document once it has been read.
struct Output {
    format: Format,
    precision: usize,
}

fn execute(cli: &Cli, rep: &mut Report, out: &mut Output) -> Result<(), CliError> {
    let doc = load(cli)?;
    out.format = cli.format.unwrap_or(doc.output.format);
    out.precision = doc.output.precision;
    let spec = doc.build_system()?;
    let mut sim = doc.simulation.config(cli.threads);
    if let Some(seed) = cli.seed {
        sim.seed = seed;
    }
    sim.validate()?;
    rep.push("command", cli.command.name(), Tag::Input);
    rep.push("config_version", doc.version, Tag::Input);
    rep.push("kind", spec.kind().name(), Tag::Input);
    rep.push("seed", sim.seed, Tag::Input);
    let ctx = Context { doc: &doc, spec, sim };
    commands::run(cli.command, &ctx, rep)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let mut rep = Report::default();
    let mut out = Output { format: cli.format.unwrap_or(Format::Records), precision: 6 };
    let code = match execute(&cli, &mut rep, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("skillq: {e}");
            rep.records.push(e.record());
            e.exit_code()
        }
    };
    let (format, precision) = (out.format, out.precision);
    let written = match &cli.out {
        Some(path) => File::create(path).and_then(|f| rep.write(&mut BufWriter::new(f), format, precision)),
        None => rep.write(&mut io::stdout().lock(), format, precision),
    };
    if let Err(e) = written {
        eprintln!("skillq: cannot write report: {e}");
        return ExitCode::from(1);
    }
    let _ = io::stderr().flush();
    ExitCode::from(code)
}
