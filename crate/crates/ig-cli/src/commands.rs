//! Command implementations behind the clap surface.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use ig_core::agents::{run_analysis, validate_grounding, AnalysisRequest, InsightReport};
use ig_core::config::{AnalysisMode, RunConfig};
use ig_core::eval::{
    composite, coverage, head_to_head, judge_rounds, pool_and_cluster, rubric_scores,
    schedule_tournament, summary_table, win_rate, BenchmarkSummary, GoldSet, RubricMeans,
    RubricScore,
};
use ig_core::gateway::http::HttpBackend;
use ig_core::gateway::mock::{MockBackend, MockScript};
use ig_core::gateway::Gateway;
use ig_core::patcher::{
    run_loop, AdapterRequest, LoopAdapters, LoopFileConfig, ProcessAdapter, ReplayTrajectory,
    StepAdapter,
};
use ig_core::search::{build_index, HashingEmbedder};
use ig_core::stats::{
    chi_square, cramers_v, odds_ratio, permutation_test, welch_t, ContingencyTable,
    PermutationMode,
};
use ig_core::store::{atomic_write, TraceStore};
use ig_core::tools::{SummaryCache, ToolContext};

use crate::{
    AnalyzeArgs, Cli, CommandKind, EvalCommand, IngestArgs, LoopArgs, LoopStubArgs, StatsArgs,
    ValidateArgs,
};

pub fn run(cli: Cli) -> Result<ExitCode> {
    let config = RunConfig::load(cli.config.as_deref()).map_err(anyhow::Error::msg)?;
    match cli.command {
        CommandKind::Ingest(args) => ingest(args, config),
        CommandKind::Analyze(args) => analyze(args, config),
        CommandKind::Validate(args) => validate(args, config),
        CommandKind::Eval(cmd) => eval(cmd, config),
        CommandKind::Loop(args) => loop_cmd(args),
        CommandKind::LoopStub(args) => loop_stub(args),
        CommandKind::Stats(args) => stats(args),
    }
}

fn write_atomic_json(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    atomic_write(path, text.as_bytes())
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn build_gateway(config: &RunConfig, mock_script: Option<&Path>) -> Result<Gateway> {
    let script_path = mock_script.or(config.mock_script.as_deref());
    let backend: Box<dyn ig_core::gateway::Backend> = match script_path {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading mock script {}", path.display()))?;
            let script = MockScript::from_json(&text)
                .with_context(|| format!("parsing mock script {}", path.display()))?;
            Box::new(MockBackend::new(script))
        }
        None => {
            let base_url = config
                .llm_base_url
                .clone()
                .context("no LLM backend: set --mock-script or IG_LLM_BASE_URL")?;
            Box::new(HttpBackend::new(
                base_url,
                config.llm_api_key.clone().unwrap_or_default(),
            ))
        }
    };
    Ok(Gateway::new(
        backend,
        config.routes.clone(),
        config.gateway_config(),
    ))
}

fn ingest(args: IngestArgs, mut config: RunConfig) -> Result<ExitCode> {
    if let Some(t) = args.chunk_threshold {
        config.chunk_threshold_tokens = t;
    }
    let file = fs::File::open(&args.input)
        .with_context(|| format!("opening {}", args.input.display()))?;
    let mut store = TraceStore::ingest_jsonl(
        std::io::BufReader::new(file),
        config.chunk_threshold_tokens,
    )?;
    store.persist_to(&args.store_dir)?;
    let schema = store.build_schema_cache()?;
    let summary = json!({
        "store_dir": args.store_dir,
        "n_traces": store.len(),
        "columns": schema.columns.iter().map(|c| json!({
            "name": c.name,
            "type": c.inferred_type,
            "null_rate": c.null_rate,
            "distinct": c.distinct_count,
        })).collect::<Vec<_>>(),
        "notable_correlations": schema.correlations.len(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

fn analyze(args: AnalyzeArgs, mut config: RunConfig) -> Result<ExitCode> {
    let mode: AnalysisMode = args.mode.parse().map_err(anyhow::Error::msg)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.mode = mode;
    let store = TraceStore::open(&args.store_dir, config.chunk_threshold_tokens)
        .with_context(|| format!("opening store {}", args.store_dir.display()))?;
    if store.is_empty() {
        bail!("store {} holds no traces", args.store_dir.display());
    }
    let embedder = HashingEmbedder::default();
    let index = build_index(&store.snapshot(), &embedder)?;
    let gateway = build_gateway(&config, args.mock_script.as_deref())?;
    let summaries = SummaryCache::default();
    let ctx = ToolContext {
        store: &store,
        index: &index,
        gateway: &gateway,
        config: &config,
        embedder: &embedder,
        summaries: &summaries,
    };
    let mut request = AnalysisRequest::new(args.query);
    request.mode = mode;
    request.seed = config.seed;
    request.limits = config.limits.clone();
    request.scout_sample_size = config.scout_sample_size;
    let run = run_analysis(&ctx, &request)?;
    let rendered = ig_core::agents::render_report(&run.report);
    write_atomic_json(&args.out, &rendered)?;
    println!(
        "{}",
        json!({
            "report": args.out,
            "findings": run.report.findings.len(),
            "rounds": run.report.run_stats.rounds,
            "cost_usd": run.report.run_stats.cost_usd,
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn validate(args: ValidateArgs, config: RunConfig) -> Result<ExitCode> {
    let report: InsightReport = serde_json::from_str(
        &fs::read_to_string(&args.report)
            .with_context(|| format!("reading {}", args.report.display()))?,
    )
    .context("report is not a valid report.json")?;
    let store = TraceStore::open(&args.store_dir, config.chunk_threshold_tokens)?;
    let violations = validate_grounding(&report, &store);
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "report": args.report,
            "violations": violations,
        }))?
    );
    if violations.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::FAILURE)
    }
}

/// SYSTEM:FOLD:PATH triples from the command line.
fn parse_report_specs(specs: &[String]) -> Result<Vec<(String, u32, InsightReport)>> {
    let mut out = Vec::new();
    for spec in specs {
        let mut parts = spec.splitn(3, ':');
        let (system, fold, path) = match (parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(f), Some(p)) => (s, f, p),
            _ => bail!("bad report spec '{spec}' (want SYSTEM:FOLD:PATH)"),
        };
        let fold: u32 = fold
            .parse()
            .with_context(|| format!("bad fold in report spec '{spec}'"))?;
        let report: InsightReport = serde_json::from_str(
            &fs::read_to_string(path).with_context(|| format!("reading {path}"))?,
        )
        .with_context(|| format!("parsing report {path}"))?;
        out.push((system.to_string(), fold, report));
    }
    Ok(out)
}

fn eval(cmd: EvalCommand, config: RunConfig) -> Result<ExitCode> {
    match cmd {
        EvalCommand::Cluster(args) => {
            let reports = parse_report_specs(&args.reports)?;
            let refs: Vec<(String, u32, &InsightReport)> = reports
                .iter()
                .map(|(s, f, r)| (s.clone(), *f, r))
                .collect();
            let gateway = build_gateway(&config, args.mock_script.as_deref())?;
            let gold = pool_and_cluster(&refs, &gateway, config.prompts_dir.as_deref())?;
            write_atomic_json(&args.out, &serde_json::to_string_pretty(&gold)?)?;
            println!(
                "{}",
                json!({"gold": args.out, "clusters": gold.clusters.len()})
            );
            Ok(ExitCode::SUCCESS)
        }
        EvalCommand::Coverage(args) => {
            let gold: GoldSet = serde_json::from_str(&fs::read_to_string(&args.gold)?)
                .context("parsing gold cluster set")?;
            let reports = parse_report_specs(&args.reports)?;
            let mut per_system: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (system, _fold, report) in &reports {
                per_system
                    .entry(system.clone())
                    .or_default()
                    .push(coverage(report, &gold)?);
            }
            let result = json!({
                "per_system": per_system.iter().map(|(system, folds)| {
                    (system.clone(), json!({
                        "folds": folds,
                        "mean": folds.iter().sum::<f64>() / folds.len() as f64,
                    }))
                }).collect::<serde_json::Map<_, _>>(),
            });
            let text = serde_json::to_string_pretty(&result)?;
            if let Some(out) = &args.out {
                write_atomic_json(out, &text)?;
            }
            println!("{text}");
            Ok(ExitCode::SUCCESS)
        }
        EvalCommand::Pairwise(args) => {
            let reports = parse_report_specs(&args.reports)?;
            let mut systems: Vec<(String, usize)> = Vec::new();
            let mut by_key: BTreeMap<(String, u32), InsightReport> = BTreeMap::new();
            for (system, fold, report) in reports {
                match systems.iter_mut().find(|(s, _)| s == &system) {
                    Some((_, count)) => *count += 1,
                    None => systems.push((system.clone(), 1)),
                }
                by_key.insert((system, fold), report);
            }
            let gateway = build_gateway(&config, args.mock_script.as_deref())?;
            let slots = schedule_tournament(&systems)?;
            let rounds = judge_rounds(&slots, &by_key, &gateway, config.prompts_dir.as_deref())?;
            let mut win_rates: BTreeMap<String, f64> = BTreeMap::new();
            for (system, _) in &systems {
                win_rates.insert(system.clone(), win_rate(&rounds, system)?);
            }
            let (names, matrix) = head_to_head(&rounds);
            let result = json!({
                "rounds": rounds,
                "win_rates": win_rates,
                "head_to_head": {"systems": names, "matrix": matrix},
            });
            write_atomic_json(&args.out, &serde_json::to_string_pretty(&result)?)?;
            println!("{}", json!({"rounds": args.out, "judged": slots.len()}));
            Ok(ExitCode::SUCCESS)
        }
        EvalCommand::Rubric(args) => {
            let gold: GoldSet = serde_json::from_str(&fs::read_to_string(&args.gold)?)
                .context("parsing gold cluster set")?;
            let reports = parse_report_specs(&args.reports)?;
            let gateway = build_gateway(&config, args.mock_script.as_deref())?;
            let mut pooled: BTreeMap<String, Vec<RubricScore>> = BTreeMap::new();
            for (system, _fold, report) in &reports {
                let scores =
                    rubric_scores(report, &gold.clusters, &gateway, config.prompts_dir.as_deref())?;
                pooled.entry(system.clone()).or_default().extend(scores);
            }
            let result = json!({
                "per_system": pooled.iter().map(|(system, scores)| {
                    let means = RubricMeans::from_scores(scores);
                    (system.clone(), json!({
                        "mechanism": means.mechanism,
                        "specificity": means.specificity,
                        "actionability": means.actionability,
                        "composite": composite(scores),
                        "n_scored": scores.len(),
                    }))
                }).collect::<serde_json::Map<_, _>>(),
            });
            write_atomic_json(&args.out, &serde_json::to_string_pretty(&result)?)?;
            println!("{}", json!({"scores": args.out}));
            Ok(ExitCode::SUCCESS)
        }
        EvalCommand::Summarize(args) => {
            let mut benchmarks = Vec::new();
            for bench in &args.benches {
                let parts: Vec<&str> = bench.splitn(4, ':').collect();
                if parts.len() != 4 {
                    bail!("bad bench spec '{bench}' (want NAME:COV:ROUNDS:SCORES)");
                }
                benchmarks.push(load_benchmark_summary(
                    parts[0],
                    Path::new(parts[1]),
                    Path::new(parts[2]),
                    Path::new(parts[3]),
                )?);
            }
            let table = summary_table(&benchmarks);
            if let Some(out) = &args.out {
                write_atomic_json(out, &table)?;
            }
            print!("{table}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_benchmark_summary(
    name: &str,
    coverage_path: &Path,
    rounds_path: &Path,
    scores_path: &Path,
) -> Result<BenchmarkSummary> {
    let cov: Value = serde_json::from_str(&fs::read_to_string(coverage_path)?)?;
    let rounds: Value = serde_json::from_str(&fs::read_to_string(rounds_path)?)?;
    let scores: Value = serde_json::from_str(&fs::read_to_string(scores_path)?)?;
    let mut summary = BenchmarkSummary {
        benchmark: name.to_string(),
        ..BenchmarkSummary::default()
    };
    if let Some(map) = cov.get("per_system").and_then(Value::as_object) {
        for (system, entry) in map {
            if let Some(mean) = entry.get("mean").and_then(Value::as_f64) {
                summary.coverage.insert(system.clone(), mean);
            }
        }
    }
    if let Some(map) = rounds.get("win_rates").and_then(Value::as_object) {
        for (system, wr) in map {
            if let Some(wr) = wr.as_f64() {
                summary.win_rate.insert(system.clone(), wr);
            }
        }
    }
    if let Some(map) = scores.get("per_system").and_then(Value::as_object) {
        for (system, entry) in map {
            summary.rubric.insert(
                system.clone(),
                RubricMeans {
                    mechanism: entry.get("mechanism").and_then(Value::as_f64).unwrap_or(0.0),
                    specificity: entry
                        .get("specificity")
                        .and_then(Value::as_f64)
                        .unwrap_or(0.0),
                    actionability: entry
                        .get("actionability")
                        .and_then(Value::as_f64)
                        .unwrap_or(0.0),
                },
            );
        }
    }
    Ok(summary)
}

fn loop_cmd(args: LoopArgs) -> Result<ExitCode> {
    let file: LoopFileConfig = serde_json::from_str(
        &fs::read_to_string(&args.config_file)
            .with_context(|| format!("reading {}", args.config_file.display()))?,
    )
    .context("parsing loop config")?;
    file.config.validate()?;
    let history_path: Option<PathBuf> = args
        .out
        .clone()
        .or(file.history_path.clone())
        .or_else(|| Some(PathBuf::from("loop.json")));
    let adapters = ig_core::patcher::process_adapters(&file.adapters)?;
    let by_step: BTreeMap<&str, &ProcessAdapter> = adapters
        .iter()
        .map(|(step, adapter)| (step.as_str(), adapter))
        .collect();
    let set = LoopAdapters {
        runner: *by_step.get("run").expect("validated"),
        analyzer: *by_step.get("analyze").expect("validated"),
        patcher: *by_step.get("patch").expect("validated"),
        evaluator: *by_step.get("evaluate").expect("validated"),
    };
    let history = run_loop(
        &file.config,
        &file.scaffold0,
        &set,
        history_path.as_deref(),
    )?;
    println!(
        "{}",
        json!({
            "history": history_path,
            "rounds": history.records.len(),
            "terminated": history.terminated,
            "final_val": history.records.last().map(|r| r.val_score),
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn loop_stub(args: LoopStubArgs) -> Result<ExitCode> {
    let trajectory: ReplayTrajectory = serde_json::from_str(
        &fs::read_to_string(&args.trajectory)
            .with_context(|| format!("reading {}", args.trajectory.display()))?,
    )
    .context("parsing trajectory")?;
    let mut input = String::new();
    std::io::stdin().read_to_string(&mut input)?;
    let request: AdapterRequest =
        serde_json::from_str(&input).context("parsing adapter request from stdin")?;
    let response = trajectory.call(&request)?;
    println!("{}", serde_json::to_string(&response)?);
    Ok(ExitCode::SUCCESS)
}

fn stats(args: StatsArgs) -> Result<ExitCode> {
    let payload_text = if args.payload == "-" {
        let mut buf = String::new();
        std::io::stdin().read_to_string(&mut buf)?;
        buf
    } else {
        fs::read_to_string(&args.payload)
            .with_context(|| format!("reading {}", args.payload))?
    };
    let payload: Value = serde_json::from_str(&payload_text).context("parsing payload JSON")?;
    let result = run_stats_payload(&payload)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(ExitCode::SUCCESS)
}

fn table_from(payload: &Value) -> Result<ContingencyTable> {
    let counts: Vec<Vec<u64>> = serde_json::from_value(
        payload
            .get("table")
            .cloned()
            .context("payload needs a 'table' of counts")?,
    )
    .context("'table' must be a matrix of non-negative integers")?;
    Ok(ContingencyTable::new(counts)?)
}

fn run_stats_payload(payload: &Value) -> Result<Value> {
    let test = payload
        .get("test")
        .and_then(Value::as_str)
        .context("payload needs a 'test' field")?;
    let num = |key: &str| -> Result<f64> {
        payload
            .get(key)
            .and_then(Value::as_f64)
            .with_context(|| format!("payload needs numeric '{key}'"))
    };
    match test {
        "welch" => {
            let result = welch_t(
                num("mean_a")?,
                num("sd_a")?,
                num("n_a")? as u64,
                num("mean_b")?,
                num("sd_b")?,
                num("n_b")? as u64,
            )?;
            Ok(serde_json::to_value(result)?)
        }
        "perm" => {
            let a: Vec<f64> = serde_json::from_value(
                payload.get("group_a").cloned().context("needs 'group_a'")?,
            )?;
            let b: Vec<f64> = serde_json::from_value(
                payload.get("group_b").cloned().context("needs 'group_b'")?,
            )?;
            let mode = match payload.get("mode").and_then(Value::as_str) {
                None | Some("exact") => PermutationMode::Exact,
                Some("monte_carlo") => PermutationMode::MonteCarlo {
                    samples: payload
                        .get("samples")
                        .and_then(Value::as_u64)
                        .unwrap_or(10_000),
                    seed: payload.get("seed").and_then(Value::as_u64).unwrap_or(0),
                },
                Some(other) => bail!("unknown permutation mode '{other}'"),
            };
            Ok(serde_json::to_value(permutation_test(&a, &b, mode)?)?)
        }
        "chi2" => Ok(serde_json::to_value(chi_square(&table_from(payload)?)?)?),
        "cramers_v" => Ok(json!({"cramers_v": cramers_v(&table_from(payload)?)?})),
        "odds_ratio" => Ok(json!({"odds_ratio": odds_ratio(&table_from(payload)?)?})),
        other => bail!("unknown test '{other}'"),
    }
}
