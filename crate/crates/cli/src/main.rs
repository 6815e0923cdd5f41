//! `unpad`: machine-readable reports over the ragged-batch training
//! models in `unpad-core`.
//!
//! Reports go to stdout (`--out` redirects them to a file); progress notes
//! go to stderr so piping stdout stays clean. Exit codes: 0 on success,
//! 1 for validation failures (the report is replaced by an error
//! document), 2 for flag and usage errors. One top-level `--seed` drives
//! every random draw, `--config <path>` supplies subcommand parameters
//! from JSON, and explicit flags override config values. Environment
//! variables are never read, so a command line plus its files fully pins
//! a run.

mod commands;
mod inputs;
mod report;

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use report::Format;

/// Validation failure carrying the message for the error report.
#[derive(Debug)]
pub struct CliError {
    message: String,
}

impl CliError {
    pub fn new(message: impl Into<String>) -> Self {
        Self { message: message.into() }
    }

    pub fn from_display(e: impl fmt::Display) -> Self {
        Self { message: e.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Deserializes the per-command override block; `None` means no config
/// file was given. Unknown keys are rejected by the target struct.
pub fn command_config<C: serde::de::DeserializeOwned + Default>(
    cfg: Option<&Value>,
) -> Result<C, CliError> {
    match cfg {
        None => Ok(C::default()),
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| CliError::new(format!("invalid config: {e}"))),
    }
}

#[derive(Parser)]
#[command(
    name = "unpad",
    version,
    about = "Reports over ragged-batch training models: padding waste, attention parity, \
             kernel scheduling, load balance, pipeline simulation, optimizer chunking, \
             fusion accounting."
)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Write the report to this file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Report serialization.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    /// JSON object of parameter overrides for the chosen subcommand.
    /// Explicit flags win over config values; config values win over
    /// defaults. Unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample sequence lengths from a histogram and report padding waste.
    GenLengths(commands::GenLengthsArgs),
    /// Padding redundancy of a lengths file.
    Redundancy(commands::RedundancyArgs),
    /// Compare padded and unpadded attention on random ragged batches.
    AttentionCheck(commands::AttentionCheckArgs),
    /// Group sequences into length buckets and schedule them on lanes.
    ScheduleFmha(commands::ScheduleFmhaArgs),
    /// Sort-and-interleave padding exchange across workers.
    Balance(commands::BalanceArgs),
    /// Serial vs overlapped pipeline makespans for a scenario file.
    SimulatePipeline(commands::SimulatePipelineArgs),
    /// Chunked kernel-launch plans for an optimizer tensor list.
    PlanLamb(commands::PlanLambArgs),
    /// Kernel counts on the encoder graph before and after fusion rules.
    FusionReport(commands::FusionReportArgs),
    /// Check deterministic embedding-backward equivalence.
    EmbedCheck(commands::EmbedCheckArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenLengths(_) => "gen-lengths",
            Command::Redundancy(_) => "redundancy",
            Command::AttentionCheck(_) => "attention-check",
            Command::ScheduleFmha(_) => "schedule-fmha",
            Command::Balance(_) => "balance",
            Command::SimulatePipeline(_) => "simulate-pipeline",
            Command::PlanLamb(_) => "plan-lamb",
            Command::FusionReport(_) => "fusion-report",
            Command::EmbedCheck(_) => "embed-check",
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Option<Value>, CliError> {
    let Some(path) = path else { return Ok(None) };
    let text = inputs::read_text(path)?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::new(format!("invalid config JSON in {}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(CliError::new(format!(
            "config {} must be a JSON object",
            path.display()
        )));
    }
    Ok(Some(value))
}

fn dispatch(cli: &Cli, cfg: Option<&Value>) -> Result<report::ReportBody, CliError> {
    let seed = cli.seed;
    match &cli.command {
        Command::GenLengths(a) => commands::gen_lengths(a, cfg, seed),
        Command::Redundancy(a) => commands::redundancy(a, cfg, seed),
        Command::AttentionCheck(a) => commands::attention_check(a, cfg, seed),
        Command::ScheduleFmha(a) => commands::schedule_fmha(a, cfg, seed),
        Command::Balance(a) => commands::balance_cmd(a, cfg, seed),
        Command::SimulatePipeline(a) => commands::simulate_pipeline(a, cfg, seed),
        Command::PlanLamb(a) => commands::plan_lamb(a, cfg, seed),
        Command::FusionReport(a) => commands::fusion_report(a, cfg, seed),
        Command::EmbedCheck(a) => commands::embed_check(a, cfg, seed),
    }
}

fn write_report(out: &Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::new(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|()| stdout.flush())
                .map_err(|e| CliError::new(format!("cannot write to stdout: {e}")))
        }
    }
}

fn fail(cli: &Cli, err: &CliError) -> ExitCode {
    let doc = report::error_envelope(cli.command.name(), &err.message);
    let text = report::render(&doc, cli.format);
    let _ = write_report(&cli.out, &text);
    eprintln!("error: {err}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli.config) {
        Ok(v) => v,
        Err(e) => return fail(&cli, &e),
    };
    match dispatch(&cli, cfg.as_ref()) {
        Ok(body) => {
            let doc = report::envelope(cli.command.name(), &body);
            let text = report::render(&doc, cli.format);
            match write_report(&cli.out, &text) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Err(e) => fail(&cli, &e),
    }
}
