//! Single chokepoint for model calls: per-role routing, bounded batch
//! concurrency, retries, JSON extraction with one repair round, and
//! token/cost accounting. Backends are pluggable; the scripted mock in
//! [`mock`] drives every offline test.

pub mod http;
pub mod mock;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokens::approximate_tokens;

/// Routed agent/task roles. Every role has exactly one model route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Orchestrator,
    Scout,
    Investigator,
    CohortCompare,
    Extraction,
    Summarization,
    Judge,
    Patcher,
    /// Untyped subagent used by the generic-subagents ablation; routed
    /// separately so the call ledger can prove no typed role was used.
    Generic,
}

impl Role {
    pub const ALL: [Role; 9] = [
        Role::Orchestrator,
        Role::Scout,
        Role::Investigator,
        Role::CohortCompare,
        Role::Extraction,
        Role::Summarization,
        Role::Judge,
        Role::Patcher,
        Role::Generic,
    ];
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Role::Orchestrator => "orchestrator",
            Role::Scout => "scout",
            Role::Investigator => "investigator",
            Role::CohortCompare => "cohort_compare",
            Role::Extraction => "extraction",
            Role::Summarization => "summarization",
            Role::Judge => "judge",
            Role::Patcher => "patcher",
            Role::Generic => "generic",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRoute {
    pub model_name: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelPrice {
    /// USD per million input tokens.
    pub input_per_mtok: f64,
    /// USD per million output tokens.
    pub output_per_mtok: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PriceTable(pub BTreeMap<String, ModelPrice>);

impl PriceTable {
    /// Published list prices used when a config gives none.
    pub fn default_prices() -> PriceTable {
        let mut t = BTreeMap::new();
        t.insert(
            "claude-opus-4-6".to_string(),
            ModelPrice {
                input_per_mtok: 15.0,
                output_per_mtok: 75.0,
            },
        );
        t.insert(
            "claude-haiku-4-5".to_string(),
            ModelPrice {
                input_per_mtok: 1.0,
                output_per_mtok: 5.0,
            },
        );
        PriceTable(t)
    }

    pub fn cost(&self, model: &str, input_tokens: u64, output_tokens: u64) -> f64 {
        match self.0.get(model) {
            Some(p) => {
                input_tokens as f64 * p.input_per_mtok / 1_000_000.0
                    + output_tokens as f64 * p.output_per_mtok / 1_000_000.0
            }
            None => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallOutcome {
    Ok,
    Timeout,
    ParseError,
    BackendError,
}

/// One physical backend invocation. Every call lands in the ledger,
/// including failed ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: Role,
    pub model: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub wall_ms: u64,
    pub outcome: CallOutcome,
    pub cost_usd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpectedFormat {
    FreeText,
    Json,
}

#[derive(Debug, Clone)]
pub struct Completion {
    pub text: String,
    /// Present when the caller asked for JSON and extraction succeeded.
    pub parsed_json: Option<serde_json::Value>,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no route configured for role {0}")]
    UnroutedRole(Role),
    #[error("prompt must not be empty")]
    EmptyPrompt,
    #[error("max_parallel must be at least 1")]
    BadParallelism,
    #[error("call timed out after {0} s")]
    Timeout(u64),
    #[error("backend error after {attempts} attempts: {message}")]
    Backend { attempts: u32, message: String },
    #[error("response was not parseable JSON after repair: {raw_prefix}")]
    Parse { raw_prefix: String },
}

impl GatewayError {
    pub fn outcome(&self) -> CallOutcome {
        match self {
            GatewayError::Timeout(_) => CallOutcome::Timeout,
            GatewayError::Parse { .. } => CallOutcome::ParseError,
            _ => CallOutcome::BackendError,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackendRequest {
    pub role: Role,
    pub model: String,
    pub prompt: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub timeout: Duration,
}

#[derive(Debug, Clone)]
pub struct BackendResponse {
    pub text: String,
    /// Provider-reported token counts when available; estimated otherwise.
    pub input_tokens: Option<u64>,
    pub output_tokens: Option<u64>,
}

#[derive(Debug, Clone)]
pub enum BackendFailure {
    Timeout,
    Error(String),
}

pub trait Backend: Send + Sync {
    fn run(&self, req: &BackendRequest) -> Result<BackendResponse, BackendFailure>;
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    /// Per-call timeout in seconds.
    pub timeout_s: u64,
    /// Total attempts for backend errors (exponential backoff between).
    pub retry_attempts: u32,
    pub retry_base_ms: u64,
    pub prices: PriceTable,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            timeout_s: 300,
            retry_attempts: 3,
            retry_base_ms: 1000,
            prices: PriceTable::default_prices(),
        }
    }
}

/// Default role-to-model routing.
pub fn default_routes() -> BTreeMap<Role, ModelRoute> {
    let opus = |_| ModelRoute {
        model_name: "claude-opus-4-6".to_string(),
        max_output_tokens: 16_000,
        temperature: 0.0,
    };
    let haiku = ModelRoute {
        model_name: "claude-haiku-4-5".to_string(),
        max_output_tokens: 8_000,
        temperature: 0.0,
    };
    let mut routes: BTreeMap<Role, ModelRoute> = BTreeMap::new();
    for role in Role::ALL {
        let route = match role {
            Role::Extraction | Role::Summarization => haiku.clone(),
            other => opus(other),
        };
        routes.insert(role, route);
    }
    routes
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    routes: BTreeMap<Role, ModelRoute>,
    config: GatewayConfig,
    ledger: Mutex<Vec<CallRecord>>,
}

impl Gateway {
    pub fn new(
        backend: Box<dyn Backend>,
        routes: BTreeMap<Role, ModelRoute>,
        config: GatewayConfig,
    ) -> Gateway {
        Gateway {
            backend,
            routes,
            config,
            ledger: Mutex::new(Vec::new()),
        }
    }

    pub fn route(&self, role: Role) -> Result<&ModelRoute, GatewayError> {
        self.routes.get(&role).ok_or(GatewayError::UnroutedRole(role))
    }

    fn record(&self, rec: CallRecord) {
        self.ledger.lock().expect("ledger poisoned").push(rec);
    }

    /// Snapshot of the call ledger.
    pub fn records(&self) -> Vec<CallRecord> {
        self.ledger.lock().expect("ledger poisoned").clone()
    }

    /// One backend invocation with retry-on-backend-error, recorded in the
    /// ledger whatever the outcome.
    fn call_once_with_retries(
        &self,
        role: Role,
        prompt: &str,
    ) -> Result<BackendResponse, GatewayError> {
        let route = self.route(role)?.clone();
        let req = BackendRequest {
            role,
            model: route.model_name.clone(),
            prompt: prompt.to_string(),
            max_output_tokens: route.max_output_tokens,
            temperature: route.temperature,
            timeout: Duration::from_secs(self.config.timeout_s),
        };
        let est_input = approximate_tokens(prompt) as u64;
        let mut last_err: Option<GatewayError> = None;
        for attempt in 0..self.config.retry_attempts {
            let start = Instant::now();
            let result = self.backend.run(&req);
            let wall_ms = start.elapsed().as_millis() as u64;
            match result {
                Ok(resp) => {
                    let input_tokens = resp.input_tokens.unwrap_or(est_input);
                    let output_tokens = resp
                        .output_tokens
                        .unwrap_or_else(|| approximate_tokens(&resp.text) as u64);
                    self.record(CallRecord {
                        role,
                        model: route.model_name.clone(),
                        input_tokens,
                        output_tokens,
                        wall_ms,
                        outcome: CallOutcome::Ok,
                        cost_usd: self
                            .config
                            .prices
                            .cost(&route.model_name, input_tokens, output_tokens),
                    });
                    return Ok(resp);
                }
                Err(BackendFailure::Timeout) => {
                    self.record(CallRecord {
                        role,
                        model: route.model_name.clone(),
                        input_tokens: est_input,
                        output_tokens: 0,
                        wall_ms,
                        outcome: CallOutcome::Timeout,
                        cost_usd: self.config.prices.cost(&route.model_name, est_input, 0),
                    });
                    // a timed-out call already burned the full window
                    return Err(GatewayError::Timeout(self.config.timeout_s));
                }
                Err(BackendFailure::Error(message)) => {
                    self.record(CallRecord {
                        role,
                        model: route.model_name.clone(),
                        input_tokens: est_input,
                        output_tokens: 0,
                        wall_ms,
                        outcome: CallOutcome::BackendError,
                        cost_usd: self.config.prices.cost(&route.model_name, est_input, 0),
                    });
                    last_err = Some(GatewayError::Backend {
                        attempts: attempt + 1,
                        message,
                    });
                    if attempt + 1 < self.config.retry_attempts {
                        std::thread::sleep(Duration::from_millis(
                            self.config.retry_base_ms << attempt,
                        ));
                    }
                }
            }
        }
        Err(last_err.unwrap_or(GatewayError::Backend {
            attempts: self.config.retry_attempts,
            message: "no attempts made".to_string(),
        }))
    }

    /// Complete a prompt. With `ExpectedFormat::Json` the first balanced
    /// top-level JSON value is extracted and parsed strictly; a parse
    /// failure triggers exactly one repair call before surfacing.
    pub fn complete(
        &self,
        role: Role,
        prompt: &str,
        format: ExpectedFormat,
    ) -> Result<Completion, GatewayError> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let resp = self.call_once_with_retries(role, prompt)?;
        match format {
            ExpectedFormat::FreeText => Ok(Completion {
                text: resp.text,
                parsed_json: None,
            }),
            ExpectedFormat::Json => {
                if let Some(value) = extract_json(&resp.text) {
                    return Ok(Completion {
                        text: resp.text,
                        parsed_json: Some(value),
                    });
                }
                let repair_prompt = format!(
                    "{prompt}\n\nYour previous response could not be parsed as JSON. \
                     Respond again with VALID JSON only. No prose before or after the JSON."
                );
                let resp2 = self.call_once_with_retries(role, &repair_prompt)?;
                match extract_json(&resp2.text) {
                    Some(value) => Ok(Completion {
                        text: resp2.text,
                        parsed_json: Some(value),
                    }),
                    None => {
                        let raw_prefix: String = resp2.text.chars().take(120).collect();
                        // mark the failed parse in the ledger
                        self.record(CallRecord {
                            role,
                            model: self.route(role)?.model_name.clone(),
                            input_tokens: 0,
                            output_tokens: 0,
                            wall_ms: 0,
                            outcome: CallOutcome::ParseError,
                            cost_usd: 0.0,
                        });
                        Err(GatewayError::Parse { raw_prefix })
                    }
                }
            }
        }
    }

    /// Complete many prompts with at most `max_parallel` calls in flight.
    /// Results come back in input order; per-item failures never poison
    /// the batch.
    pub fn complete_batch(
        &self,
        role: Role,
        prompts: &[String],
        format: ExpectedFormat,
        max_parallel: usize,
    ) -> Result<Vec<Result<Completion, GatewayError>>, GatewayError> {
        if max_parallel == 0 {
            return Err(GatewayError::BadParallelism);
        }
        if prompts.is_empty() {
            return Ok(Vec::new());
        }
        let workers = max_parallel.min(prompts.len());
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<Completion, GatewayError>>>> =
            prompts.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= prompts.len() {
                        break;
                    }
                    let result = self.complete(role, &prompts[i], format);
                    *slots[i].lock().expect("slot poisoned") = Some(result);
                });
            }
        });
        Ok(slots
            .into_iter()
            .map(|slot| {
                slot.into_inner()
                    .expect("slot poisoned")
                    .expect("worker filled every claimed slot")
            })
            .collect())
    }

    pub fn usage_report(&self) -> UsageReport {
        usage_report(&self.records())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RoleUsage {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost_usd: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct UsageReport {
    pub per_role: BTreeMap<Role, RoleUsage>,
    pub total_calls: u64,
    pub total_cost_usd: f64,
}

/// Aggregate a set of call records; sums are exact over the records given.
pub fn usage_report(records: &[CallRecord]) -> UsageReport {
    let mut report = UsageReport::default();
    for rec in records {
        let entry = report.per_role.entry(rec.role).or_default();
        entry.calls += 1;
        entry.input_tokens += rec.input_tokens;
        entry.output_tokens += rec.output_tokens;
        entry.cost_usd += rec.cost_usd;
        report.total_calls += 1;
        report.total_cost_usd += rec.cost_usd;
    }
    report
}

/// Extract the first balanced top-level JSON value (object or array) from
/// free text, honoring strings and escapes. Returns `None` when nothing
/// parses.
pub fn extract_json(text: &str) -> Option<serde_json::Value> {
    let bytes = text.as_bytes();
    let start = bytes.iter().position(|&b| b == b'{' || b == b'[')?;
    let open = bytes[start];
    let close = if open == b'{' { b'}' } else { b']' };
    let mut depth = 0i64;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            _ if b == open => depth += 1,
            _ if b == close => {
                depth -= 1;
                if depth == 0 {
                    return serde_json::from_str(&text[start..=i]).ok();
                }
            }
            _ => {}
        }
    }
    None
}
