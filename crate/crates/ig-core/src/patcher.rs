//! Analyze -> patch -> evaluate round controller with validation-set
//! saturation: the loop stops when validation fails to beat the best
//! score so far by epsilon for `patience` consecutive rounds, or at the
//! round cap. The runner, analyzer, patcher, and evaluator are external
//! adapters speaking JSON over stdio; history persists after every round
//! so a killed loop resumes at round granularity.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::store::atomic_write;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("adapter '{step}' failed: {message}")]
    Adapter { step: String, message: String },
    #[error("adapter '{step}' health probe failed: {message}")]
    Unhealthy { step: String, message: String },
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("bad loop config: {0}")]
    BadConfig(String),
    #[error("history file mismatch: {0}")]
    HistoryMismatch(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    /// Analyzer produces a report each round; the patcher consumes it.
    WithReport,
    /// No analysis input: the patcher sees only the scaffold.
    PurePatcher,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub epsilon: f64,
    pub patience: usize,
    pub max_rounds: usize,
    pub mode: LoopMode,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            epsilon: 0.01,
            patience: 2,
            max_rounds: 5,
            mode: LoopMode::WithReport,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        if self.epsilon <= 0.0 {
            return Err(LoopError::BadConfig("epsilon must be positive".to_string()));
        }
        if self.patience < 1 {
            return Err(LoopError::BadConfig("patience must be >= 1".to_string()));
        }
        if self.max_rounds < 1 {
            return Err(LoopError::BadConfig("max_rounds must be >= 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub scaffold_ref: String,
    /// Absent in pure-patcher mode and at round 0.
    pub report_ref: Option<String>,
    pub val_score: f64,
    pub test_score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopHistory {
    pub config: LoopConfig,
    pub records: Vec<RoundRecord>,
    /// "saturation", "max_rounds", "max_rounds+patience", or "aborted: …".
    pub terminated: Option<String>,
}

impl LoopHistory {
    pub fn val_scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_score).collect()
    }
}

/// Stop when the round index reaches max_rounds, or when the last
/// `patience` post-baseline rounds each failed to exceed the best score
/// seen before that round by more than epsilon. The baseline (round 0)
/// never counts toward patience.
pub fn should_stop(val_scores: &[f64], config: &LoopConfig) -> bool {
    let rounds_done = val_scores.len().saturating_sub(1);
    if rounds_done >= config.max_rounds {
        return true;
    }
    saturated(val_scores, config)
}

fn saturated(val_scores: &[f64], config: &LoopConfig) -> bool {
    let rounds_done = val_scores.len().saturating_sub(1);
    if rounds_done < config.patience {
        return false;
    }
    let mut stagnant = 0;
    for r in (1..=rounds_done).rev() {
        let best_before = val_scores[..r]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if val_scores[r] > best_before + config.epsilon {
            break;
        }
        stagnant += 1;
        if stagnant >= config.patience {
            return true;
        }
    }
    false
}

fn termination_reason(val_scores: &[f64], config: &LoopConfig) -> String {
    let rounds_done = val_scores.len().saturating_sub(1);
    let hit_cap = rounds_done >= config.max_rounds;
    let hit_saturation = saturated(val_scores, config);
    match (hit_cap, hit_saturation) {
        (true, true) => "max_rounds+patience".to_string(),
        (true, false) => "max_rounds".to_string(),
        _ => "saturation".to_string(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterRequest {
    pub step: String,
    pub round: usize,
    pub inputs: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterResponse {
    pub ok: bool,
    #[serde(default)]
    pub outputs: Value,
    #[serde(default)]
    pub error: Option<String>,
}

/// One external stage of the loop.
pub trait StepAdapter: Send + Sync {
    fn call(&self, request: &AdapterRequest) -> Result<AdapterResponse, LoopError>;
}

/// Adapter that spawns a command per request, writing the request JSON to
/// stdin and reading one response JSON from stdout.
pub struct ProcessAdapter {
    pub step: String,
    pub command: Vec<String>,
}

impl StepAdapter for ProcessAdapter {
    fn call(&self, request: &AdapterRequest) -> Result<AdapterResponse, LoopError> {
        let program = self.command.first().ok_or_else(|| LoopError::BadConfig(
            format!("adapter '{}' has an empty command", self.step),
        ))?;
        let mut child = Command::new(program)
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| LoopError::Adapter {
                step: self.step.clone(),
                message: format!("spawn failed: {e}"),
            })?;
        {
            let stdin = child.stdin.as_mut().expect("piped stdin");
            stdin.write_all(serde_json::to_string(request)?.as_bytes())?;
        }
        let output = child.wait_with_output().map_err(|e| LoopError::Adapter {
            step: self.step.clone(),
            message: e.to_string(),
        })?;
        if !output.status.success() {
            return Err(LoopError::Adapter {
                step: self.step.clone(),
                message: format!("exit status {}", output.status),
            });
        }
        let response: AdapterResponse =
            serde_json::from_slice(&output.stdout).map_err(|e| LoopError::Adapter {
                step: self.step.clone(),
                message: format!("bad response JSON: {e}"),
            })?;
        Ok(response)
    }
}

pub struct LoopAdapters<'a> {
    pub runner: &'a dyn StepAdapter,
    pub analyzer: &'a dyn StepAdapter,
    pub patcher: &'a dyn StepAdapter,
    pub evaluator: &'a dyn StepAdapter,
}

fn call_ok(
    adapter: &dyn StepAdapter,
    step: &str,
    round: usize,
    inputs: Value,
) -> Result<Value, LoopError> {
    let response = adapter.call(&AdapterRequest {
        step: step.to_string(),
        round,
        inputs,
    })?;
    if !response.ok {
        return Err(LoopError::Adapter {
            step: step.to_string(),
            message: response
                .error
                .unwrap_or_else(|| "adapter reported failure".to_string()),
        });
    }
    Ok(response.outputs)
}

fn health_probe(adapters: &LoopAdapters) -> Result<(), LoopError> {
    for (step, adapter) in [
        ("run", adapters.runner),
        ("analyze", adapters.analyzer),
        ("patch", adapters.patcher),
        ("evaluate", adapters.evaluator),
    ] {
        let response = adapter
            .call(&AdapterRequest {
                step: "health".to_string(),
                round: 0,
                inputs: json!({}),
            })
            .map_err(|e| LoopError::Unhealthy {
                step: step.to_string(),
                message: e.to_string(),
            })?;
        if !response.ok {
            return Err(LoopError::Unhealthy {
                step: step.to_string(),
                message: response.error.unwrap_or_default(),
            });
        }
    }
    Ok(())
}

fn eval_scores(outputs: &Value) -> Result<(f64, Option<f64>), LoopError> {
    let val = outputs
        .get("val_score")
        .and_then(Value::as_f64)
        .ok_or_else(|| LoopError::Adapter {
            step: "evaluate".to_string(),
            message: "missing numeric val_score".to_string(),
        })?;
    if !(0.0..=1.0).contains(&val) {
        return Err(LoopError::ScoreOutOfRange(val));
    }
    let test = outputs.get("test_score").and_then(Value::as_f64);
    if let Some(t) = test {
        if !(0.0..=1.0).contains(&t) {
            return Err(LoopError::ScoreOutOfRange(t));
        }
    }
    Ok((val, test))
}

fn persist(history: &LoopHistory, path: Option<&Path>) -> Result<(), LoopError> {
    if let Some(path) = path {
        atomic_write(path, serde_json::to_string_pretty(history)?.as_bytes())?;
    }
    Ok(())
}

/// Run (or resume) the loop. When `history_path` exists its records are
/// reloaded and completed rounds are skipped, so a crash costs at most
/// the round in flight. An adapter failure aborts with history intact.
pub fn run_loop(
    config: &LoopConfig,
    scaffold0: &str,
    adapters: &LoopAdapters,
    history_path: Option<&Path>,
) -> Result<LoopHistory, LoopError> {
    config.validate()?;
    health_probe(adapters)?;

    let mut history = match history_path {
        Some(path) if path.exists() => {
            let loaded: LoopHistory =
                serde_json::from_str(&std::fs::read_to_string(path)?)?;
            let same = loaded.config.epsilon == config.epsilon
                && loaded.config.patience == config.patience
                && loaded.config.max_rounds == config.max_rounds
                && loaded.config.mode == config.mode;
            if !same {
                return Err(LoopError::HistoryMismatch(
                    "existing history was produced under a different config".to_string(),
                ));
            }
            loaded
        }
        _ => LoopHistory {
            config: config.clone(),
            records: Vec::new(),
            terminated: None,
        },
    };
    if history.terminated.is_some() {
        return Ok(history);
    }

    // round 0: evaluate the unmodified scaffold
    if history.records.is_empty() {
        let outputs = call_ok(
            adapters.evaluator,
            "evaluate",
            0,
            json!({"scaffold_ref": scaffold0, "split": "validation"}),
        )?;
        let (val, test) = eval_scores(&outputs)?;
        history.records.push(RoundRecord {
            round: 0,
            scaffold_ref: scaffold0.to_string(),
            report_ref: None,
            val_score: val,
            test_score: test,
        });
        persist(&history, history_path)?;
    }

    loop {
        let scores = history.val_scores();
        if should_stop(&scores, config) {
            history.terminated = Some(termination_reason(&scores, config));
            persist(&history, history_path)?;
            return Ok(history);
        }
        let round = history.records.len();
        let current = history
            .records
            .last()
            .expect("round 0 recorded")
            .scaffold_ref
            .clone();

        let result: Result<RoundRecord, LoopError> = (|| {
            let run_out = call_ok(
                adapters.runner,
                "run",
                round,
                json!({"scaffold_ref": current}),
            )?;
            let traces_ref = run_out
                .get("traces_ref")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            let report_ref = match config.mode {
                LoopMode::WithReport => {
                    let out = call_ok(
                        adapters.analyzer,
                        "analyze",
                        round,
                        json!({"traces_ref": traces_ref}),
                    )?;
                    out.get("report_ref")
                        .and_then(Value::as_str)
                        .map(str::to_string)
                }
                LoopMode::PurePatcher => None,
            };
            let patch_out = call_ok(
                adapters.patcher,
                "patch",
                round,
                json!({"scaffold_ref": current, "report_ref": report_ref}),
            )?;
            let next_scaffold = patch_out
                .get("scaffold_ref")
                .and_then(Value::as_str)
                .ok_or_else(|| LoopError::Adapter {
                    step: "patch".to_string(),
                    message: "missing scaffold_ref".to_string(),
                })?
                .to_string();
            let eval_out = call_ok(
                adapters.evaluator,
                "evaluate",
                round,
                json!({"scaffold_ref": next_scaffold, "split": "validation"}),
            )?;
            let (val, test) = eval_scores(&eval_out)?;
            Ok(RoundRecord {
                round,
                scaffold_ref: next_scaffold,
                report_ref,
                val_score: val,
                test_score: test,
            })
        })();

        match result {
            Ok(record) => {
                history.records.push(record);
                persist(&history, history_path)?;
            }
            Err(e) => {
                history.terminated = Some(format!("aborted: {e}"));
                persist(&history, history_path)?;
                return Err(e);
            }
        }
    }
}

/// Replay adapter config: per-round scores and refs, for dry runs and
/// tests of the loop mechanics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayTrajectory {
    pub val: Vec<f64>,
    #[serde(default)]
    pub test: Vec<f64>,
    /// Steps that fail instead of responding (e.g. "analyze@2").
    #[serde(default)]
    pub fail_at: Vec<String>,
}

impl ReplayTrajectory {
    pub fn respond(&self, request: &AdapterRequest) -> AdapterResponse {
        if self
            .fail_at
            .iter()
            .any(|f| f == &format!("{}@{}", request.step, request.round))
        {
            return AdapterResponse {
                ok: false,
                outputs: json!({}),
                error: Some("scripted failure".to_string()),
            };
        }
        let outputs = match request.step.as_str() {
            "health" => json!({}),
            "run" => json!({"traces_ref": format!("traces-r{}", request.round)}),
            "analyze" => json!({"report_ref": format!("report-r{}", request.round)}),
            "patch" => json!({"scaffold_ref": format!("scaffold-r{}", request.round)}),
            "evaluate" => {
                let val = self.val.get(request.round).copied().unwrap_or(0.0);
                match self.test.get(request.round) {
                    Some(t) => json!({"val_score": val, "test_score": t}),
                    None => json!({"val_score": val}),
                }
            }
            _ => json!({}),
        };
        AdapterResponse {
            ok: true,
            outputs,
            error: None,
        }
    }
}

impl StepAdapter for ReplayTrajectory {
    fn call(&self, request: &AdapterRequest) -> Result<AdapterResponse, LoopError> {
        Ok(self.respond(request))
    }
}

/// Adapter set backed by one replay trajectory, with a call log.
pub struct ReplayAdapters {
    pub trajectory: ReplayTrajectory,
    pub calls: std::sync::Mutex<Vec<String>>,
}

impl ReplayAdapters {
    pub fn new(trajectory: ReplayTrajectory) -> ReplayAdapters {
        ReplayAdapters {
            trajectory,
            calls: std::sync::Mutex::new(Vec::new()),
        }
    }

    pub fn call_log(&self) -> Vec<String> {
        self.calls.lock().expect("log poisoned").clone()
    }
}

impl StepAdapter for ReplayAdapters {
    fn call(&self, request: &AdapterRequest) -> Result<AdapterResponse, LoopError> {
        self.calls
            .lock()
            .expect("log poisoned")
            .push(format!("{}@{}", request.step, request.round));
        Ok(self.trajectory.respond(request))
    }
}

/// Convenience for building adapter sets from config commands.
pub fn process_adapters(
    commands: &BTreeMap<String, Vec<String>>,
) -> Result<Vec<(String, ProcessAdapter)>, LoopError> {
    let mut out = Vec::new();
    for step in ["run", "analyze", "patch", "evaluate"] {
        let command = commands.get(step).cloned().ok_or_else(|| {
            LoopError::BadConfig(format!("missing adapter command for '{step}'"))
        })?;
        out.push((
            step.to_string(),
            ProcessAdapter {
                step: step.to_string(),
                command,
            },
        ));
    }
    Ok(out)
}

/// Loop config file shape consumed by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopFileConfig {
    #[serde(flatten)]
    pub config: LoopConfig,
    pub scaffold0: String,
    pub adapters: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub history_path: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> LoopConfig {
        LoopConfig::default()
    }

    // published validation trajectories and their stop rounds
    const TRAJECTORIES: [(&str, &[f64], usize, &str); 4] = [
        (
            "ig",
            &[0.46, 0.78, 0.84, 0.86, 0.86, 0.84],
            5,
            "max_rounds+patience",
        ),
        ("rlm", &[0.22, 0.82, 0.80, 0.82], 3, "saturation"),
        ("cc_subagents", &[0.24, 0.86, 0.68, 0.78], 3, "saturation"),
        ("pure_patcher", &[0.42, 0.72, 0.56, 0.48], 3, "saturation"),
    ];

    #[test]
    fn published_trajectories_stop_at_recorded_rounds() {
        for (name, scores, stop_round, reason) in TRAJECTORIES {
            for r in 1..stop_round {
                assert!(
                    !should_stop(&scores[..=r], &cfg()),
                    "{name}: stopped early at round {r}"
                );
            }
            assert!(
                should_stop(&scores[..=stop_round], &cfg()),
                "{name}: did not stop at round {stop_round}"
            );
            assert_eq!(
                termination_reason(&scores[..=stop_round], &cfg()),
                reason,
                "{name}"
            );
        }
    }

    #[test]
    fn best_so_far_reading_not_previous_round() {
        // 0.80 -> 0.82 improves on the previous round but not on the best
        // (0.82 at round 1), so it still counts as stagnant
        let scores = [0.22, 0.82, 0.80, 0.82];
        assert!(should_stop(&scores, &cfg()));
    }

    #[test]
    fn baseline_does_not_count_toward_patience() {
        // round 1 improves over a weak baseline: nothing stagnant yet
        assert!(!should_stop(&[0.10, 0.50], &cfg()));
        // flat from the start: rounds 1 and 2 both fail to beat best+eps
        assert!(should_stop(&[0.50, 0.50, 0.50], &cfg()));
    }

    #[test]
    fn replayed_loop_reproduces_full_history() {
        let adapters = ReplayAdapters::new(ReplayTrajectory {
            val: vec![0.46, 0.78, 0.84, 0.86, 0.86, 0.84],
            test: vec![0.41, 0.77, 0.81, 0.80, 0.84, 0.80],
            fail_at: vec![],
        });
        let set = LoopAdapters {
            runner: &adapters,
            analyzer: &adapters,
            patcher: &adapters,
            evaluator: &adapters,
        };
        let history = run_loop(&cfg(), "scaffold-r0", &set, None).unwrap();
        assert_eq!(history.records.len(), 6);
        assert_eq!(history.terminated.as_deref(), Some("max_rounds+patience"));
        assert_eq!(history.records[5].test_score, Some(0.80));
        assert!(history.records[1].report_ref.is_some());
    }

    #[test]
    fn pure_patcher_never_calls_analyzer() {
        let adapters = ReplayAdapters::new(ReplayTrajectory {
            val: vec![0.42, 0.72, 0.56, 0.48],
            test: vec![],
            fail_at: vec![],
        });
        let set = LoopAdapters {
            runner: &adapters,
            analyzer: &adapters,
            patcher: &adapters,
            evaluator: &adapters,
        };
        let config = LoopConfig {
            mode: LoopMode::PurePatcher,
            ..cfg()
        };
        let history = run_loop(&config, "s0", &set, None).unwrap();
        assert_eq!(history.records.len(), 4);
        let log = adapters.call_log();
        assert!(
            log.iter().all(|c| !c.starts_with("analyze@")),
            "analyzer was invoked: {log:?}"
        );
        assert!(history.records.iter().all(|r| r.report_ref.is_none()));
    }

    #[test]
    fn out_of_range_score_is_rejected() {
        let adapters = ReplayAdapters::new(ReplayTrajectory {
            val: vec![1.2],
            test: vec![],
            fail_at: vec![],
        });
        let set = LoopAdapters {
            runner: &adapters,
            analyzer: &adapters,
            patcher: &adapters,
            evaluator: &adapters,
        };
        let err = run_loop(&cfg(), "s0", &set, None).unwrap_err();
        assert!(matches!(err, LoopError::ScoreOutOfRange(_)));
    }

    #[test]
    fn adapter_failure_aborts_with_history_intact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loop.json");
        let adapters = ReplayAdapters::new(ReplayTrajectory {
            val: vec![0.46, 0.78, 0.84, 0.86, 0.86, 0.84],
            test: vec![],
            fail_at: vec!["patch@3".to_string()],
        });
        let set = LoopAdapters {
            runner: &adapters,
            analyzer: &adapters,
            patcher: &adapters,
            evaluator: &adapters,
        };
        assert!(run_loop(&cfg(), "scaffold-r0", &set, Some(&path)).is_err());
        let saved: LoopHistory =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(saved.records.len(), 3); // rounds 0..2 completed
        assert!(saved.terminated.as_deref().unwrap().starts_with("aborted"));
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let trajectory = ReplayTrajectory {
            val: vec![0.46, 0.78, 0.84, 0.86, 0.86, 0.84],
            test: vec![],
            fail_at: vec![],
        };
        // uninterrupted reference
        let reference = {
            let adapters = ReplayAdapters::new(trajectory.clone());
            let set = LoopAdapters {
                runner: &adapters,
                analyzer: &adapters,
                patcher: &adapters,
                evaluator: &adapters,
            };
            run_loop(&cfg(), "scaffold-r0", &set, None).unwrap()
        };
        // killed after round 2, then resumed
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loop.json");
        {
            let failing = ReplayAdapters::new(ReplayTrajectory {
                fail_at: vec!["run@3".to_string()],
                ..trajectory.clone()
            });
            let set = LoopAdapters {
                runner: &failing,
                analyzer: &failing,
                patcher: &failing,
                evaluator: &failing,
            };
            let _ = run_loop(&cfg(), "scaffold-r0", &set, Some(&path));
        }
        // clear the abort marker as an operator would before retrying
        let mut aborted: LoopHistory =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        aborted.terminated = None;
        std::fs::write(&path, serde_json::to_string(&aborted).unwrap()).unwrap();
        let resumed = {
            let adapters = ReplayAdapters::new(trajectory);
            let set = LoopAdapters {
                runner: &adapters,
                analyzer: &adapters,
                patcher: &adapters,
                evaluator: &adapters,
            };
            run_loop(&cfg(), "scaffold-r0", &set, Some(&path)).unwrap()
        };
        assert_eq!(
            serde_json::to_string(&reference.records).unwrap(),
            serde_json::to_string(&resumed.records).unwrap()
        );
        assert_eq!(reference.terminated, resumed.terminated);
    }

    #[test]
    fn history_length_bounded_by_max_rounds_plus_one() {
        let adapters = ReplayAdapters::new(ReplayTrajectory {
            val: (0..20).map(|i| 0.04 * i as f64).collect(),
            test: vec![],
            fail_at: vec![],
        });
        let set = LoopAdapters {
            runner: &adapters,
            analyzer: &adapters,
            patcher: &adapters,
            evaluator: &adapters,
        };
        let history = run_loop(&cfg(), "s0", &set, None).unwrap();
        assert!(history.records.len() <= cfg().max_rounds + 1);
        assert_eq!(history.terminated.as_deref(), Some("max_rounds"));
    }

    #[test]
    fn config_validation() {
        assert!(LoopConfig {
            epsilon: 0.0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(LoopConfig {
            patience: 0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(LoopConfig {
            max_rounds: 0,
            ..cfg()
        }
        .validate()
        .is_err());
    }
}
