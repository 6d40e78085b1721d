use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::mock::{MockConfig, MockProvider};
use super::{Payload, TemplateId};
use crate::error::{Error, Result};
use crate::retry::with_backoff;

/// One call to the language model.
#[derive(Debug)]
pub struct AgentRequest<'a> {
    pub template: TemplateId,
    /// Fully rendered prompt, including any parse-retry reminder.
    pub prompt: &'a str,
    /// The structured values the prompt was rendered from.
    pub payload: &'a Payload,
    /// 0 for the first attempt, incremented on each parse retry.
    pub attempt: usize,
}

pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &AgentRequest<'_>) -> Result<String>;

    /// Test providers may ask to see the held-out item when ranking.
    fn wants_oracle_hint(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Mock,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub backend: Backend,
    pub model: String,
    /// Chat-completion endpoint for the http backend.
    pub endpoint: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub temperature: Option<f64>,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub mock: MockConfig,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Mock,
            model: "mock".into(),
            endpoint: String::new(),
            timeout_secs: 60,
            max_retries: 3,
            temperature: Some(0.0),
            api_key_env: None,
            mock: MockConfig::default(),
        }
    }
}

impl ProviderConfig {
    pub fn build(&self) -> Result<Arc<dyn LlmProvider>> {
        Ok(match self.backend {
            Backend::Mock => Arc::new(MockProvider::new(self.mock)),
            Backend::Http => Arc::new(HttpProvider::new(self.clone())?),
        })
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: Option<String>,
}

/// OpenAI-style chat-completion client.
pub struct HttpProvider {
    config: ProviderConfig,
    client: reqwest::blocking::Client,
    token: Option<String>,
    backoff_base: Duration,
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(Error::InvalidInput(
                "http provider needs an endpoint".into(),
            ));
        }
        let token = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::InvalidInput(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            config,
            client,
            token,
            backoff_base: Duration::from_secs(1),
        })
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }
}

impl LlmProvider for HttpProvider {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &AgentRequest<'_>) -> Result<String> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [ChatMessage {
                role: "user",
                content: request.prompt,
            }],
            temperature: self.config.temperature,
        };
        with_backoff(self.config.max_retries, self.backoff_base, |_| {
            let mut req = self.client.post(&self.config.endpoint).json(&body);
            if let Some(token) = &self.token {
                req = req.bearer_auth(token);
            }
            let resp = req.send().map_err(|e| Error::Transport(e.to_string()))?;
            let status = resp.status();
            let text = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
            if status.is_server_error() || status.as_u16() == 429 {
                return Err(Error::Transport(format!("{status}: {text}")));
            }
            if !status.is_success() {
                return Err(Error::InvalidInput(format!(
                    "provider returned {status}: {text}"
                )));
            }
            let parsed: ChatResponse = serde_json::from_str(&text)
                .map_err(|e| Error::Transport(format!("malformed completion envelope: {e}")))?;
            parsed
                .choices
                .into_iter()
                .next()
                .and_then(|c| c.message.content)
                .ok_or_else(|| Error::Transport("completion had no content".into()))
        })
    }
}
