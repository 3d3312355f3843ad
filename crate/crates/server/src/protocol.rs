//! Client wire protocol.
//!
//! Every message in either direction is one JSON text frame of the form
//! `{"type": ..., "session_id": ..., "seq": ..., "payload": {...}}`. The
//! session here is the worker's assignment session; individual games are
//! identified inside payloads. Server `seq` is per session, starts at 1
//! and increases by one per message; client `seq` must increase too, and a
//! repeated or older client `seq` is ignored.

use guesswhich_core::analytics::SurveyResponse;
use guesswhich_core::game::GameState;
use guesswhich_core::payout::PayoutBreakdown;
use guesswhich_core::{ImageId, SessionId, WorkerId};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload")]
pub enum ClientMessage {
    JoinQueue { worker_id: WorkerId },
    CaptionGuess { image_id: ImageId },
    Question { text: String },
    RoundGuess { image_id: ImageId },
    FinalGuess { image_id: ImageId },
    SurveySubmit { ratings: SurveyResponse },
    Resume { worker_id: WorkerId, resume_token: String },
}

impl ClientMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ClientMessage::JoinQueue { .. } => "JoinQueue",
            ClientMessage::CaptionGuess { .. } => "CaptionGuess",
            ClientMessage::Question { .. } => "Question",
            ClientMessage::RoundGuess { .. } => "RoundGuess",
            ClientMessage::FinalGuess { .. } => "FinalGuess",
            ClientMessage::SurveySubmit { .. } => "SurveySubmit",
            ClientMessage::Resume { .. } => "Resume",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEnvelope {
    /// Empty until the server has assigned a session.
    #[serde(default)]
    pub session_id: Option<SessionId>,
    pub seq: u64,
    #[serde(flatten)]
    pub message: ClientMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: ImageId,
    /// Fetch path on the service, e.g. `/images/<id>`.
    pub url: String,
}

impl ImageRef {
    pub fn for_id(id: &ImageId) -> Self {
        Self {
            id: id.clone(),
            url: format!("/images/{id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuessKind {
    Caption,
    Round,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundView {
    pub round: u32,
    pub question: String,
    pub answer: Option<String>,
    pub round_guess: Option<ImageId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalGuessView {
    pub image_id: ImageId,
    pub correct: bool,
}

/// Everything a reconnecting client needs to rebuild its view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSnapshot {
    pub game_session_id: SessionId,
    pub game_index: u32,
    pub games_total: u32,
    pub images: Vec<ImageRef>,
    pub caption: String,
    pub dialog_rounds: u32,
    pub state: GameState,
    pub caption_guess: Option<ImageId>,
    pub rounds: Vec<RoundView>,
    pub final_guesses: Vec<FinalGuessView>,
    /// True while an answer is being generated.
    pub answer_pending: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentPhase {
    Playing,
    SurveyPending,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload")]
pub enum ServerMessage {
    QueueStatus {
        position: usize,
    },
    AssignmentStart {
        assignment_id: String,
        games: u32,
        resume_token: String,
        resume_window_ms: u64,
    },
    GameStart {
        game_session_id: SessionId,
        game_index: u32,
        images: Vec<ImageRef>,
        caption: String,
        dialog_rounds: u32,
    },
    Typing {
        round: u32,
    },
    Answer {
        round: u32,
        text: String,
        /// Set when the agent failed and the canned answer was substituted.
        fallback: bool,
    },
    GuessAck {
        kind: GuessKind,
        round: u32,
        image_id: ImageId,
        state: GameState,
    },
    GuessFeedback {
        image_id: ImageId,
        correct: bool,
        guesses_so_far: u32,
    },
    GameEnd {
        game_session_id: SessionId,
        rank: u32,
        bonus_delta: f64,
    },
    SurveyRequest {
        dimensions: Vec<String>,
    },
    AssignmentComplete {
        payout: PayoutBreakdown,
    },
    SessionSnapshot {
        assignment_id: String,
        phase: AssignmentPhase,
        games_completed: u32,
        bonus_so_far: f64,
        game: Option<GameSnapshot>,
        /// Server seq of the last message before this snapshot.
        last_seq: u64,
    },
    Error {
        code: ErrorCode,
        message: String,
        /// Client seq of the offending message, when there was one.
        ref_seq: Option<u64>,
    },
}

impl ServerMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ServerMessage::QueueStatus { .. } => "QueueStatus",
            ServerMessage::AssignmentStart { .. } => "AssignmentStart",
            ServerMessage::GameStart { .. } => "GameStart",
            ServerMessage::Typing { .. } => "Typing",
            ServerMessage::Answer { .. } => "Answer",
            ServerMessage::GuessAck { .. } => "GuessAck",
            ServerMessage::GuessFeedback { .. } => "GuessFeedback",
            ServerMessage::GameEnd { .. } => "GameEnd",
            ServerMessage::SurveyRequest { .. } => "SurveyRequest",
            ServerMessage::AssignmentComplete { .. } => "AssignmentComplete",
            ServerMessage::SessionSnapshot { .. } => "SessionSnapshot",
            ServerMessage::Error { .. } => "Error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    SchemaError,
    SessionNotFound,
    IllegalTransition,
    RepeatWorker,
    NoPoolsAvailable,
    TokenExpired,
    InvalidSurvey,
    InactivityTimeout,
    NotJoined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerEnvelope {
    pub session_id: Option<SessionId>,
    pub seq: u64,
    #[serde(flatten)]
    pub message: ServerMessage,
}

/// Parse one client text frame.
pub fn parse_client(text: &str) -> Result<ClientEnvelope, serde_json::Error> {
    serde_json::from_str(text)
}
