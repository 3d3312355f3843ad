//! Answerer agents as seen by the service: in-process baselines or remote
//! agents reached over HTTP with the same request/response contract.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use guesswhich_core::agents::{
    make_baseline_answerer, AgentError, AnswerRequest, AnswerResponse, Answerer, BaselineKind, ImageAttributes,
    PROTOCOL_VERSION,
};
use serde::{Deserialize, Serialize};

/// How to obtain the agent of one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentSpec {
    Truthful,
    Noisy {
        flip_prob: f64,
        seed: u64,
    },
    Scripted {
        #[serde(default)]
        table: HashMap<String, String>,
        default: String,
    },
    /// Remote agent: `POST url` with an `AnswerRequest` body.
    Http { url: String },
}

#[derive(Clone)]
pub enum AgentHandle {
    Local(Arc<dyn Answerer>),
    Http(HttpAgent),
}

impl std::fmt::Debug for AgentHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AgentHandle::Local(a) => write!(f, "Local({})", a.name()),
            AgentHandle::Http(h) => write!(f, "Http({})", h.url),
        }
    }
}

impl AgentHandle {
    pub fn build(spec: &AgentSpec, attributes: Arc<ImageAttributes>, timeout: Duration) -> Result<Self, AgentError> {
        let kind = match spec {
            AgentSpec::Truthful => BaselineKind::Truthful,
            AgentSpec::Noisy { flip_prob, seed } => BaselineKind::Noisy {
                flip_prob: *flip_prob,
                seed: *seed,
            },
            AgentSpec::Scripted { table, default } => BaselineKind::Scripted {
                table: table.clone(),
                default: default.clone(),
            },
            AgentSpec::Http { url } => return Ok(AgentHandle::Http(HttpAgent::new(url.clone(), timeout)?)),
        };
        Ok(AgentHandle::Local(Arc::from(make_baseline_answerer(kind, attributes)?)))
    }

    pub async fn answer(&self, req: AnswerRequest) -> Result<AnswerResponse, AgentError> {
        match self {
            AgentHandle::Local(a) => {
                let a = Arc::clone(a);
                tokio::task::spawn_blocking(move || a.answer(&req))
                    .await
                    .map_err(|e| AgentError::Unavailable(format!("agent task failed: {e}")))?
            }
            AgentHandle::Http(h) => h.answer(&req).await,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpAgent {
    client: reqwest::Client,
    url: String,
}

impl HttpAgent {
    pub fn new(url: String, timeout: Duration) -> Result<Self, AgentError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| AgentError::InvalidParameter(format!("http client: {e}")))?;
        Ok(Self { client, url })
    }

    pub async fn answer(&self, req: &AnswerRequest) -> Result<AnswerResponse, AgentError> {
        let resp = self.client.post(&self.url).json(req).send().await.map_err(|e| {
            if e.is_timeout() {
                AgentError::Timeout
            } else {
                AgentError::Unavailable(e.to_string())
            }
        })?;
        if !resp.status().is_success() {
            return Err(AgentError::Unavailable(format!("agent returned {}", resp.status())));
        }
        let body = resp.bytes().await.map_err(|e| AgentError::Unavailable(e.to_string()))?;
        let parsed: AnswerResponse =
            serde_json::from_slice(&body).map_err(|e| AgentError::MalformedResponse(e.to_string()))?;
        if parsed.protocol_version != PROTOCOL_VERSION {
            return Err(AgentError::MalformedResponse(format!(
                "protocol version {} (expected {PROTOCOL_VERSION})",
                parsed.protocol_version
            )));
        }
        Ok(parsed)
    }
}
