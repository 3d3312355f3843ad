//! Answerer agents, simulated questioners and the AI-AI game runner.
//!
//! Every answerer speaks the same request/response contract
//! ([`AnswerRequest`] / [`AnswerResponse`]); requests carry the full dialog
//! history, so agents can be stateless and the orchestrator can redeliver a
//! job without coordination.

mod attributes;
mod baseline;
mod protocol;
mod questioner;
mod runner;

pub use attributes::{parse_binary_question, ImageAttributes};
pub use baseline::{
    make_baseline_answerer, BaselineKind, NoisyAnswerer, ScriptedAnswerer, TruthfulAnswerer, DEFAULT_ANSWER,
};
pub use protocol::{AgentError, AnswerRequest, AnswerResponse, Answerer, QaPair, SecretImageRef, PROTOCOL_VERSION};
pub use questioner::{Questioner, QuestionerPolicy, GENERIC_QUESTIONS};
pub use runner::{run_ai_ai_game, simulate_games, GameLabels, RunError, SimulationSpec};
