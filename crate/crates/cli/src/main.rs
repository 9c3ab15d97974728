//! `emuchain`: emulation, discrepancy, history matching, uncertainty
//! propagation and decision support for expensive simulators, as a pipeline
//! of small commands over JSON/CSV artifacts.
//!
//! Exit codes: 0 success, 1 domain error (structured JSON on stderr),
//! 2 usage error. Every successful analysis step appends to the hash-linked
//! audit chain in the lock file (`--lock`, default `analysis.lock.json`).

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use emuchain_core::ledger::AuditRecord;
use emuchain_core::Error as CoreError;

use artifacts::{hash_files, CliError, CliResult, LockFile, RunLog};

#[derive(Debug, Parser)]
#[command(
    name = "emuchain",
    version,
    about = "Emulate expensive simulators, quantify what the emulation misses, and decide under the resulting uncertainty"
)]
struct Cli {
    /// Lock file holding the uncertainty manifest and the audit chain
    #[arg(long, global = true, default_value = "analysis.lock.json")]
    lock: PathBuf,
    /// Why this step was run; recorded verbatim in the audit chain
    #[arg(long, global = true, default_value = "")]
    rationale: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a space-filling design over an input space
    Design(commands::DesignArgs),
    /// Evaluate an external simulator over a design
    Run(commands::RunArgs),
    /// Fit an emulator to completed runs
    Fit(commands::FitArgs),
    /// Validate an emulator (leave-one-out or held-out runs)
    Validate(commands::ValidateArgs),
    /// Assess structural discrepancy, or declare an external error budget
    Discrepancy(commands::DiscrepancyArgs),
    /// History-match candidate inputs against observations
    Match(commands::MatchArgs),
    /// Sample forecasts over the retained input region
    Forecast(commands::ForecastArgs),
    /// Push samples through a graph of emulated models
    Propagate(commands::PropagateArgs),
    /// Reject decision candidates by expected-utility bounds
    Decide(commands::DecideArgs),
    /// Identify certainly-not-dominated decisions across attributes
    Pareto(commands::ParetoArgs),
    /// Solve a sequential decision tree by backward induction
    Tree(commands::TreeArgs),
    /// Inspect the tamper-evident audit chain
    #[command(subcommand)]
    Audit(commands::AuditCmd),
    /// Assemble the final report from computed sections
    Report(commands::ReportArgs),
}

fn dispatch(cli: &Cli) -> CliResult<Option<RunLog>> {
    match &cli.command {
        Command::Design(a) => commands::design(a).map(Some),
        Command::Run(a) => commands::run(a).map(Some),
        Command::Fit(a) => commands::fit_cmd(a).map(Some),
        Command::Validate(a) => commands::validate(a).map(Some),
        Command::Discrepancy(a) => commands::discrepancy(a).map(Some),
        Command::Match(a) => commands::match_cmd(a).map(Some),
        Command::Forecast(a) => commands::forecast(a).map(Some),
        Command::Propagate(a) => commands::propagate(a).map(Some),
        Command::Decide(a) => commands::decide(a, &cli.lock).map(Some),
        Command::Pareto(a) => commands::pareto(a).map(Some),
        Command::Tree(a) => commands::tree(a).map(Some),
        // Reading the audit trail must not itself grow the audit trail.
        Command::Audit(cmd) => commands::audit(cmd, &cli.lock).map(|()| None),
        Command::Report(a) => commands::report(a, &cli.lock).map(Some),
    }
}

/// Coarse machine-readable class for a domain error.
fn error_kind(e: &CoreError) -> &'static str {
    match e {
        CoreError::InvalidSpace(_) => "invalid_space",
        CoreError::InvalidDesign(_) | CoreError::DesignRow { .. } => "invalid_design",
        CoreError::DimensionMismatch { .. } => "dimension_mismatch",
        CoreError::ProcessSpawn { .. }
        | CoreError::MalformedOutput { .. }
        | CoreError::SimulatorTimeout { .. }
        | CoreError::SimulatorExited { .. } => "simulator",
        CoreError::FitFailed(_)
        | CoreError::RankDeficientBasis(_)
        | CoreError::KernelNotPositiveDefinite(_)
        | CoreError::NegativeVariance { .. } => "emulator",
        CoreError::Discrepancy(_) | CoreError::CovarianceNotPsd { .. } => "discrepancy",
        CoreError::Calibration(_) => "calibration",
        CoreError::UnknownOutput { .. } => "unknown_output",
        CoreError::InvalidGraph(_) => "invalid_graph",
        CoreError::Decision(_) => "decision",
        CoreError::UtilityDomain(_) => "utility_domain",
        CoreError::InvalidTree(_) => "invalid_tree",
        CoreError::ManifestIncomplete(_) => "manifest_incomplete",
        CoreError::AuditChainBroken { .. } => "audit_chain_broken",
        CoreError::DocumentFormat { .. } => "document_format",
        CoreError::Io { .. } => "io",
    }
}

/// Record a completed step: hash its inputs and outputs and extend the
/// chain. The lock file is created on first use.
fn append_audit(cli: &Cli, log: &RunLog) -> CliResult<()> {
    let mut lock = LockFile::load_or_default(&cli.lock)?;
    let record = AuditRecord {
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        operation: log.operation.clone(),
        input_hashes: hash_files(&log.inputs),
        seed: log.seed,
        output_hashes: hash_files(&log.outputs),
        rationale: cli.rationale.clone(),
    };
    lock.chain.append(record).map_err(CliError::Domain)?;
    lock.save(&cli.lock)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // EMUCHAIN_THREADS caps every rayon-parallel loop in the process.
    if let Ok(v) = std::env::var("EMUCHAIN_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => log::warn!("ignoring EMUCHAIN_THREADS={v:?}: expected a positive integer"),
        }
    }
    let cli = Cli::parse();
    let outcome = dispatch(&cli).and_then(|log| {
        if let Some(log) = &log {
            append_audit(&cli, log)?;
        }
        Ok(())
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Domain(e)) => {
            let payload = serde_json::json!({
                "error": {
                    "kind": error_kind(&e),
                    "message": e.to_string(),
                }
            });
            eprintln!("{payload}");
            ExitCode::from(1)
        }
    }
}
