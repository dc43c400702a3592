//! `ig` — command-line front end: ingest trace corpora, run the analysis
//! loop, validate report grounding, evaluate competing reports with the
//! judge harness, drive the patch-evaluate loop, and expose the stats kit.
//!
//! Every command validates its inputs, writes outputs atomically, and on
//! failure prints one machine-parsable JSON error line to stderr and
//! exits nonzero.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "ig",
    version,
    about = "Corpus-level diagnostics over LLM-agent execution traces"
)]
pub struct Cli {
    /// Flat JSON config file; flags override file values, environment
    /// variables (IG_LLM_BASE_URL, IG_LLM_API_KEY) override the file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: CommandKind,
}

#[derive(Debug, Subcommand)]
pub enum CommandKind {
    /// Ingest a JSONL trace corpus into a store directory.
    Ingest(IngestArgs),
    /// Run the analysis loop over an ingested store and emit report.json.
    Analyze(AnalyzeArgs),
    /// Check every quote, id, and prevalence claim in a report against
    /// the store; exits nonzero when any violation is found.
    Validate(ValidateArgs),
    /// Judge-based evaluation over report.json files.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the analyze-patch-evaluate loop from a loop config file.
    Loop(LoopArgs),
    /// Replay adapter for `ig loop`: answers one adapter request on
    /// stdin from a scripted trajectory file.
    LoopStub(LoopStubArgs),
    /// Run one statistical test from a JSON payload and print the result.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Input corpus: one JSON trace object per line.
    pub input: PathBuf,
    /// Store directory to create or overwrite.
    #[arg(long, value_name = "DIR")]
    pub store_dir: PathBuf,
    /// Long-trace chunk threshold in tokens.
    #[arg(long, value_name = "TOKENS")]
    pub chunk_threshold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Store directory produced by `ig ingest`.
    #[arg(long, value_name = "DIR")]
    pub store_dir: PathBuf,
    /// The analysis question driving the run.
    #[arg(long)]
    pub query: String,
    /// Analysis mode: full, orchestrator_only, or generic_subagents.
    #[arg(long, default_value = "full")]
    pub mode: String,
    /// Seed for all sampling in the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scripted mock backend (JSON file); omits all network traffic.
    #[arg(long, value_name = "FILE")]
    pub mock_script: Option<PathBuf>,
    /// Output path for the report.
    #[arg(long, default_value = "report.json", value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// The report.json to check.
    pub report: PathBuf,
    /// Store directory the report was generated from.
    #[arg(long, value_name = "DIR")]
    pub store_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Pool findings from all reports and build the union-gold cluster set.
    Cluster(EvalClusterArgs),
    /// Coverage of each report against a union-gold cluster set.
    Coverage(EvalCoverageArgs),
    /// Position-swapped pairwise tournament across systems.
    Pairwise(EvalPairwiseArgs),
    /// Per-dimension rubric scoring against the union-gold clusters.
    Rubric(EvalRubricArgs),
    /// Combine per-benchmark artifacts into the summary table.
    Summarize(EvalSummarizeArgs),
}

#[derive(Debug, Args)]
pub struct EvalClusterArgs {
    /// Reports as SYSTEM:FOLD:PATH (repeatable).
    #[arg(long = "report", value_name = "SYS:FOLD:PATH", required = true)]
    pub reports: Vec<String>,
    /// Scripted mock backend for the judge.
    #[arg(long, value_name = "FILE")]
    pub mock_script: Option<PathBuf>,
    /// Output path for the union-gold cluster set.
    #[arg(long, default_value = "gold.json", value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalCoverageArgs {
    /// Union-gold cluster set from `ig eval cluster`.
    #[arg(long, value_name = "FILE")]
    pub gold: PathBuf,
    /// Reports as SYSTEM:FOLD:PATH (repeatable).
    #[arg(long = "report", value_name = "SYS:FOLD:PATH", required = true)]
    pub reports: Vec<String>,
    /// Output path; stdout only when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalPairwiseArgs {
    /// Reports as SYSTEM:FOLD:PATH (repeatable).
    #[arg(long = "report", value_name = "SYS:FOLD:PATH", required = true)]
    pub reports: Vec<String>,
    /// Scripted mock backend for the judge.
    #[arg(long, value_name = "FILE")]
    pub mock_script: Option<PathBuf>,
    /// Output path for the judged rounds and win rates.
    #[arg(long, default_value = "rounds.json", value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalRubricArgs {
    /// Union-gold cluster set from `ig eval cluster`.
    #[arg(long, value_name = "FILE")]
    pub gold: PathBuf,
    /// Reports as SYSTEM:FOLD:PATH (repeatable).
    #[arg(long = "report", value_name = "SYS:FOLD:PATH", required = true)]
    pub reports: Vec<String>,
    /// Scripted mock backend for the judge.
    #[arg(long, value_name = "FILE")]
    pub mock_script: Option<PathBuf>,
    /// Output path for the per-system rubric means.
    #[arg(long, default_value = "scores.json", value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalSummarizeArgs {
    /// Per-benchmark artifact triple NAME:coverage.json:rounds.json:scores.json
    /// (repeatable).
    #[arg(long = "bench", value_name = "NAME:COV:ROUNDS:SCORES", required = true)]
    pub benches: Vec<String>,
    /// Also write the rendered table to a file.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LoopArgs {
    /// Loop config JSON: thresholds, mode, scaffold0, adapter commands.
    #[arg(long, value_name = "FILE")]
    pub config_file: PathBuf,
    /// History output path (overrides history_path from the file).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LoopStubArgs {
    /// Trajectory JSON: {"val": [...], "test": [...], "fail_at": [...]}.
    #[arg(long, value_name = "FILE")]
    pub trajectory: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// JSON payload file, or '-' for stdin:
    /// {"test": "welch"|"perm"|"chi2"|"cramers_v"|"odds_ratio", ...}.
    pub payload: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            let line = serde_json::json!({"error": e.to_string()});
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    // every flag in the tree must carry help text; the --help output is
    // the flag registry
    #[test]
    fn no_undocumented_flags() {
        fn walk(cmd: &clap::Command, path: String) {
            for arg in cmd.get_arguments() {
                if arg.get_id() == "help" || arg.get_id() == "version" {
                    continue;
                }
                assert!(
                    arg.get_help().is_some(),
                    "undocumented flag --{} on `{path}`",
                    arg.get_id()
                );
            }
            for sub in cmd.get_subcommands() {
                assert!(
                    sub.get_about().is_some(),
                    "undocumented subcommand `{path} {}`",
                    sub.get_name()
                );
                walk(sub, format!("{path} {}", sub.get_name()));
            }
        }
        let cmd = Cli::command();
        walk(&cmd, "ig".to_string());
    }

    #[test]
    fn cli_parses_representative_lines() {
        Cli::try_parse_from(["ig", "ingest", "traces.jsonl", "--store-dir", "store"]).unwrap();
        Cli::try_parse_from([
            "ig",
            "analyze",
            "--store-dir",
            "store",
            "--query",
            "why fail?",
            "--mode",
            "orchestrator_only",
            "--seed",
            "7",
        ])
        .unwrap();
        Cli::try_parse_from([
            "ig",
            "eval",
            "cluster",
            "--report",
            "ig:0:report.json",
            "--report",
            "rlm:0:other.json",
        ])
        .unwrap();
        Cli::try_parse_from(["ig", "stats", "-"]).unwrap();
    }
}
