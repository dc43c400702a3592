//! HTTP chat-completions backend. The endpoint and key come from
//! IG_LLM_BASE_URL / IG_LLM_API_KEY (or explicit config); the request and
//! response shapes follow the common chat-completions wire format.

use serde::Deserialize;

use super::{Backend, BackendFailure, BackendRequest, BackendResponse};

pub const ENV_BASE_URL: &str = "IG_LLM_BASE_URL";
pub const ENV_API_KEY: &str = "IG_LLM_API_KEY";

#[derive(Debug, Clone)]
pub struct HttpBackend {
    base_url: String,
    api_key: String,
}

impl HttpBackend {
    pub fn new(base_url: String, api_key: String) -> HttpBackend {
        HttpBackend { base_url, api_key }
    }

    /// Construct from IG_LLM_BASE_URL / IG_LLM_API_KEY.
    pub fn from_env() -> Result<HttpBackend, String> {
        let base_url = std::env::var(ENV_BASE_URL)
            .map_err(|_| format!("{ENV_BASE_URL} is not set"))?;
        let api_key = std::env::var(ENV_API_KEY).unwrap_or_default();
        Ok(HttpBackend { base_url, api_key })
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Debug, Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

impl Backend for HttpBackend {
    fn run(&self, req: &BackendRequest) -> Result<BackendResponse, BackendFailure> {
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": req.model,
            "max_tokens": req.max_output_tokens,
            "temperature": req.temperature,
            "messages": [{"role": "user", "content": req.prompt}],
        });
        let agent = ureq::AgentBuilder::new().timeout(req.timeout).build();
        let response = agent
            .post(&url)
            .set("authorization", &format!("Bearer {}", self.api_key))
            .set("content-type", "application/json")
            .send_json(body);
        match response {
            Ok(resp) => {
                let parsed: ChatResponse = resp
                    .into_json()
                    .map_err(|e| BackendFailure::Error(format!("bad response body: {e}")))?;
                let text = parsed
                    .choices
                    .first()
                    .map(|c| c.message.content.clone())
                    .ok_or_else(|| BackendFailure::Error("response had no choices".to_string()))?;
                let (input_tokens, output_tokens) = parsed
                    .usage
                    .map(|u| (u.prompt_tokens, u.completion_tokens))
                    .unwrap_or((None, None));
                Ok(BackendResponse {
                    text,
                    input_tokens,
                    output_tokens,
                })
            }
            Err(ureq::Error::Transport(t))
                if t.kind() == ureq::ErrorKind::Io
                    && t.to_string().to_lowercase().contains("timed out") =>
            {
                Err(BackendFailure::Timeout)
            }
            Err(e) => Err(BackendFailure::Error(e.to_string())),
        }
    }
}
