//! Deterministic scripted backend: ordered rules matched first-rule-wins
//! on role and prompt substring. Replaying the same prompt sequence always
//! yields the same response sequence.

use serde::{Deserialize, Serialize};

use super::{Backend, BackendFailure, BackendRequest, BackendResponse, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulatedFailure {
    Timeout,
    BackendError,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockRule {
    /// Match any role when absent.
    #[serde(default)]
    pub role: Option<Role>,
    /// Substring the prompt must contain ("" matches everything).
    pub prompt_contains: String,
    #[serde(default)]
    pub response: Option<String>,
    /// Injected failure instead of a response.
    #[serde(default)]
    pub simulate: Option<SimulatedFailure>,
}

impl MockRule {
    pub fn response(role: Option<Role>, prompt_contains: &str, response: &str) -> MockRule {
        MockRule {
            role,
            prompt_contains: prompt_contains.to_string(),
            response: Some(response.to_string()),
            simulate: None,
        }
    }

    pub fn failure(role: Option<Role>, prompt_contains: &str, failure: SimulatedFailure) -> MockRule {
        MockRule {
            role,
            prompt_contains: prompt_contains.to_string(),
            response: None,
            simulate: Some(failure),
        }
    }

    fn matches(&self, role: Role, prompt: &str) -> bool {
        self.role.map_or(true, |r| r == role) && prompt.contains(&self.prompt_contains)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    pub default_response: String,
}

impl MockScript {
    pub fn new(rules: Vec<MockRule>, default_response: &str) -> MockScript {
        MockScript {
            rules,
            default_response: default_response.to_string(),
        }
    }

    pub fn from_json(json: &str) -> Result<MockScript, serde_json::Error> {
        serde_json::from_str(json)
    }

    pub fn respond(&self, role: Role, prompt: &str) -> Result<String, BackendFailure> {
        for rule in &self.rules {
            if rule.matches(role, prompt) {
                return match (&rule.simulate, &rule.response) {
                    (Some(SimulatedFailure::Timeout), _) => Err(BackendFailure::Timeout),
                    (Some(SimulatedFailure::BackendError), _) => {
                        Err(BackendFailure::Error("injected backend error".to_string()))
                    }
                    (None, Some(resp)) => Ok(resp.clone()),
                    (None, None) => Ok(self.default_response.clone()),
                };
            }
        }
        Ok(self.default_response.clone())
    }
}

pub struct MockBackend {
    script: MockScript,
}

impl MockBackend {
    pub fn new(script: MockScript) -> MockBackend {
        MockBackend { script }
    }
}

impl Backend for MockBackend {
    fn run(&self, req: &BackendRequest) -> Result<BackendResponse, BackendFailure> {
        self.script.respond(req.role, &req.prompt).map(|text| BackendResponse {
            text,
            input_tokens: None,
            output_tokens: None,
        })
    }
}
