//! Run configuration: flat JSON file, environment overrides for the LLM
//! endpoint, CLI flags on top. Unset fields take the production defaults
//! (chunk threshold 50k tokens, top-k 20, extraction concurrency 50,
//! per-call timeout 300 s, 500-turn limits).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gateway::{default_routes, GatewayConfig, ModelRoute, PriceTable, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisMode {
    Full,
    OrchestratorOnly,
    GenericSubagents,
}

impl Default for AnalysisMode {
    fn default() -> Self {
        AnalysisMode::Full
    }
}

impl std::str::FromStr for AnalysisMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(AnalysisMode::Full),
            "orchestrator_only" => Ok(AnalysisMode::OrchestratorOnly),
            "generic_subagents" => Ok(AnalysisMode::GenericSubagents),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Limits {
    pub max_orchestrator_turns: usize,
    pub max_subagent_turns: usize,
    /// Max scouts dispatched per batch.
    pub scout_batch: usize,
    /// Max investigators dispatched per batch (prioritize capacity).
    pub investigator_batch: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_orchestrator_turns: 500,
            max_subagent_turns: 500,
            scout_batch: 4,
            investigator_batch: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub store_dir: Option<PathBuf>,
    pub mock_script: Option<PathBuf>,
    pub llm_base_url: Option<String>,
    pub llm_api_key: Option<String>,
    pub routes: BTreeMap<Role, ModelRoute>,
    pub prices: PriceTable,
    pub seed: u64,
    pub mode: AnalysisMode,
    pub limits: Limits,
    /// Pairwise association cutoff for the schema cache.
    pub notable_threshold: f64,
    pub chunk_threshold_tokens: usize,
    pub top_k: usize,
    pub extraction_concurrency: usize,
    pub timeout_s: u64,
    pub retry_attempts: u32,
    pub retry_base_ms: u64,
    /// Cap on any single tool result injected into agent context.
    pub inject_cap_tokens: usize,
    /// Token budget for one cohort comparison (split across both sides).
    pub compare_token_budget: usize,
    /// Traces sampled per scout.
    pub scout_sample_size: usize,
    /// Override directory for prompt assets; built-ins used when absent.
    pub prompts_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            store_dir: None,
            mock_script: None,
            llm_base_url: None,
            llm_api_key: None,
            routes: default_routes(),
            prices: PriceTable::default_prices(),
            seed: 0,
            mode: AnalysisMode::Full,
            limits: Limits::default(),
            notable_threshold: 0.3,
            chunk_threshold_tokens: 50_000,
            top_k: 20,
            extraction_concurrency: 50,
            timeout_s: 300,
            retry_attempts: 3,
            retry_base_ms: 1000,
            inject_cap_tokens: 20_000,
            compare_token_budget: 60_000,
            scout_sample_size: 200,
            prompts_dir: None,
        }
    }
}

impl RunConfig {
    /// Read a flat JSON config file, then apply environment overrides.
    pub fn load(path: Option<&Path>) -> Result<RunConfig, String> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
                serde_json::from_str(&text)
                    .map_err(|e| format!("bad config {}: {e}", p.display()))?
            }
            None => RunConfig::default(),
        };
        config.apply_env();
        Ok(config)
    }

    /// Environment variables override file values.
    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var(crate::gateway::http::ENV_BASE_URL) {
            self.llm_base_url = Some(v);
        }
        if let Ok(v) = std::env::var(crate::gateway::http::ENV_API_KEY) {
            self.llm_api_key = Some(v);
        }
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            timeout_s: self.timeout_s,
            retry_attempts: self.retry_attempts,
            retry_base_ms: self.retry_base_ms,
            prices: self.prices.clone(),
        }
    }
}

/// Built-in prompt assets, overridable by files in `prompts_dir`.
pub mod prompts {
    use std::path::Path;

    pub const ORCHESTRATOR: &str = include_str!("../assets/prompts/orchestrator.txt");
    pub const SCOUT: &str = include_str!("../assets/prompts/scout.txt");
    pub const INVESTIGATOR: &str = include_str!("../assets/prompts/investigator.txt");
    pub const GENERIC: &str = include_str!("../assets/prompts/generic.txt");
    pub const JUDGE_CLUSTER: &str = include_str!("../assets/prompts/judge_cluster.txt");
    pub const JUDGE_RUBRIC: &str = include_str!("../assets/prompts/judge_rubric.txt");
    pub const JUDGE_PAIRWISE: &str = include_str!("../assets/prompts/judge_pairwise.txt");
    pub const CANONICAL_QUESTION: &str = include_str!("../assets/prompts/canonical_question.txt");
    pub const PATCHER: &str = include_str!("../assets/prompts/patcher.txt");

    /// Load `<name>.txt` from the override dir, falling back to built-ins.
    pub fn load(name: &str, prompts_dir: Option<&Path>) -> String {
        if let Some(dir) = prompts_dir {
            if let Ok(text) = std::fs::read_to_string(dir.join(format!("{name}.txt"))) {
                return text;
            }
        }
        builtin(name).to_string()
    }

    pub fn builtin(name: &str) -> &'static str {
        match name {
            "orchestrator" => ORCHESTRATOR,
            "scout" => SCOUT,
            "investigator" => INVESTIGATOR,
            "generic" => GENERIC,
            "judge_cluster" => JUDGE_CLUSTER,
            "judge_rubric" => JUDGE_RUBRIC,
            "judge_pairwise" => JUDGE_PAIRWISE,
            "canonical_question" => CANONICAL_QUESTION,
            "patcher" => PATCHER,
            _ => "",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_production_table() {
        let c = RunConfig::default();
        assert_eq!(c.chunk_threshold_tokens, 50_000);
        assert_eq!(c.top_k, 20);
        assert_eq!(c.extraction_concurrency, 50);
        assert_eq!(c.timeout_s, 300);
        assert_eq!(c.limits.max_orchestrator_turns, 500);
        assert_eq!(c.limits.max_subagent_turns, 500);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let parsed: RunConfig =
            serde_json::from_str(r#"{"seed": 7, "top_k": 5}"#).unwrap();
        assert_eq!(parsed.seed, 7);
        assert_eq!(parsed.top_k, 5);
        assert_eq!(parsed.chunk_threshold_tokens, 50_000);
    }

    #[test]
    fn every_role_is_routed_by_default() {
        let c = RunConfig::default();
        for role in Role::ALL {
            assert!(c.routes.contains_key(&role), "missing route for {role}");
        }
    }

    #[test]
    fn builtin_prompts_are_nonempty() {
        for name in [
            "orchestrator",
            "scout",
            "investigator",
            "generic",
            "judge_cluster",
            "judge_rubric",
            "judge_pairwise",
            "canonical_question",
            "patcher",
        ] {
            assert!(!prompts::builtin(name).is_empty(), "{name} prompt empty");
        }
    }
}
