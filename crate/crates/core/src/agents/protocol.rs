use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ImageId, SessionId};

/// Version of the answerer request/response messages.
pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

/// How the agent finds the secret image: by id, or by an inline feature
/// vector for agents that have no image store of their own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SecretImageRef {
    Id { image_id: ImageId },
    Features { vector: Vec<f32> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub protocol_version: u32,
    pub session_id: SessionId,
    pub caption: String,
    pub history: Vec<QaPair>,
    pub question: String,
    pub secret_image_ref: SecretImageRef,
}

impl AnswerRequest {
    pub fn validate(&self, dialog_rounds: u32) -> Result<(), AgentError> {
        if self.protocol_version != PROTOCOL_VERSION {
            return Err(AgentError::InvalidRequest(format!(
                "unsupported protocol version {}",
                self.protocol_version
            )));
        }
        if self.question.trim().is_empty() {
            return Err(AgentError::InvalidRequest("question is empty".into()));
        }
        if self.history.len() >= dialog_rounds as usize {
            return Err(AgentError::InvalidRequest(format!(
                "history has {} turns, dialog allows {dialog_rounds}",
                self.history.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub protocol_version: u32,
    pub session_id: SessionId,
    pub answer: String,
    pub latency_ms: u64,
}

impl AnswerResponse {
    /// Check a response against the request it answers.
    pub fn validate_for(&self, req: &AnswerRequest) -> Result<(), AgentError> {
        if self.protocol_version != PROTOCOL_VERSION {
            return Err(AgentError::MalformedResponse(format!(
                "unsupported protocol version {}",
                self.protocol_version
            )));
        }
        if self.session_id != req.session_id {
            return Err(AgentError::MalformedResponse(format!(
                "response for session {} does not match request {}",
                self.session_id, req.session_id
            )));
        }
        if self.answer.trim().is_empty() {
            return Err(AgentError::MalformedResponse("empty answer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("agent did not answer before the deadline")]
    Timeout,
    #[error("agent unavailable: {0}")]
    Unavailable(String),
    #[error("malformed agent response: {0}")]
    MalformedResponse(String),
    #[error("invalid answer request: {0}")]
    InvalidRequest(String),
    #[error("invalid agent parameter: {0}")]
    InvalidParameter(String),
}

/// An answerer ("Alice"): sees the secret image and answers one question
/// given the caption and the dialog so far.
pub trait Answerer: Send + Sync {
    fn name(&self) -> &str;

    fn answer(&self, req: &AnswerRequest) -> Result<AnswerResponse, AgentError>;
}

impl<A: Answerer + ?Sized> Answerer for Box<A> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn answer(&self, req: &AnswerRequest) -> Result<AnswerResponse, AgentError> {
        (**self).answer(req)
    }
}

impl<A: Answerer + ?Sized> Answerer for std::sync::Arc<A> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn answer(&self, req: &AnswerRequest) -> Result<AnswerResponse, AgentError> {
        (**self).answer(req)
    }
}
