//! The per-game state machine.
//!
//! A game moves through
//! `AwaitingCaptionGuess -> Dialog(1) -> ... -> Dialog(k) -> FinalGuessing -> Complete`.
//! Each dialog round is itself three steps: a question, the agent's answer,
//! and the player's best guess. The game never ends early: a correct round
//! guess is recorded but the dialog continues through all rounds, and the
//! player only learns whether a guess is right during the final phase.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ImageId, SessionId, WorkerId};
use crate::pool::ShellProvenance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GameConfig {
    pub dialog_rounds: u32,
    pub pool_size: u32,
    pub caption_guess_required: bool,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            dialog_rounds: 9,
            pool_size: 20,
            caption_guess_required: true,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<(), GameError> {
        if self.dialog_rounds < 1 {
            return Err(GameError::InvalidConfig("dialog_rounds must be >= 1".into()));
        }
        if self.pool_size < 2 {
            return Err(GameError::InvalidConfig("pool_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// One game's pool: the secret image, its caption and the full ordered set
/// of candidate images shown to the questioner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub pool_id: String,
    pub secret_id: ImageId,
    #[serde(default)]
    pub caption: String,
    pub image_ids: Vec<ImageId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shell_provenance: Option<ShellProvenance>,
}

impl PoolSpec {
    pub fn validate(&self) -> Result<(), GameError> {
        if self.image_ids.len() < 2 {
            return Err(GameError::InvalidPool(format!(
                "pool {} has {} images, need at least 2",
                self.pool_id,
                self.image_ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(self.image_ids.len());
        for id in &self.image_ids {
            if !seen.insert(id) {
                return Err(GameError::InvalidPool(format!(
                    "pool {} lists image {id} twice",
                    self.pool_id
                )));
            }
        }
        if !seen.contains(&self.secret_id) {
            return Err(GameError::InvalidPool(format!(
                "pool {} does not contain its secret {}",
                self.pool_id, self.secret_id
            )));
        }
        Ok(())
    }

    pub fn contains(&self, id: &ImageId) -> bool {
        self.image_ids.contains(id)
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogStep {
    AwaitingQuestion,
    AwaitingAnswer,
    AwaitingRoundGuess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GameState {
    AwaitingCaptionGuess,
    Dialog { round: u32, step: DialogStep },
    FinalGuessing,
    Complete,
    /// Player left or timed out; never produced by [`GameSession::apply`].
    Abandoned,
}

impl GameState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, GameState::Complete | GameState::Abandoned)
    }

    /// True when the game is waiting on the human rather than the agent.
    pub fn awaits_player(&self) -> bool {
        match self {
            GameState::AwaitingCaptionGuess | GameState::FinalGuessing => true,
            GameState::Dialog { step, .. } => *step != DialogStep::AwaitingAnswer,
            GameState::Complete | GameState::Abandoned => false,
        }
    }
}

impl fmt::Display for GameState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GameState::AwaitingCaptionGuess => write!(f, "AwaitingCaptionGuess"),
            GameState::Dialog { round, step } => write!(f, "Dialog({round}, {step:?})"),
            GameState::FinalGuessing => write!(f, "FinalGuessing"),
            GameState::Complete => write!(f, "Complete"),
            GameState::Abandoned => write!(f, "Abandoned"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GameEvent {
    CaptionGuess { image_id: ImageId },
    QuestionAsked { text: String },
    AnswerReceived { text: String },
    RoundGuess { image_id: ImageId },
    FinalGuess { image_id: ImageId },
}

impl GameEvent {
    pub fn name(&self) -> &'static str {
        match self {
            GameEvent::CaptionGuess { .. } => "CaptionGuess",
            GameEvent::QuestionAsked { .. } => "QuestionAsked",
            GameEvent::AnswerReceived { .. } => "AnswerReceived",
            GameEvent::RoundGuess { .. } => "RoundGuess",
            GameEvent::FinalGuess { .. } => "FinalGuess",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogRound {
    /// 1-based round number.
    pub index: u32,
    pub question: String,
    pub answer: Option<String>,
    pub round_guess: Option<ImageId>,
    pub asked_at_ms: u64,
    pub answered_at_ms: Option<u64>,
    pub guessed_at_ms: Option<u64>,
}

impl DialogRound {
    pub fn is_complete(&self) -> bool {
        self.answer.is_some() && self.round_guess.is_some()
    }
}

/// What an accepted event did; lets callers react without re-inspecting state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Applied {
    CaptionGuessRecorded { correct: bool },
    QuestionRecorded { round: u32 },
    AnswerRecorded { round: u32 },
    RoundGuessRecorded { round: u32, correct: bool },
    FinalGuessIncorrect { guesses_so_far: u32 },
    Completed { rank: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GameError {
    #[error("invalid game config: {0}")]
    InvalidConfig(String),
    #[error("invalid pool: {0}")]
    InvalidPool(String),
    #[error("pool has {actual} images but config requires {expected}")]
    PoolMismatch { expected: u32, actual: usize },
    #[error("event {event} is not legal in state {state}")]
    IllegalTransition { state: String, event: String },
    #[error("image {0} is not in the pool")]
    UnknownImage(ImageId),
    #[error("image {0} was already guessed in the final phase")]
    DuplicateFinalGuess(ImageId),
    #[error("{0} text must not be empty")]
    EmptyText(&'static str),
    #[error("secret image is not the last final guess")]
    SecretNotTerminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSession {
    pub session_id: SessionId,
    pub config: GameConfig,
    pub pool: PoolSpec,
    pub player_ref: WorkerId,
    pub agent_ref: String,
    pub state: GameState,
    pub caption_guess: Option<ImageId>,
    pub rounds: Vec<DialogRound>,
    pub final_guesses: Vec<ImageId>,
    pub induced_rank: Option<u32>,
}

impl GameSession {
    pub fn new(
        session_id: SessionId,
        config: GameConfig,
        pool: PoolSpec,
        player_ref: WorkerId,
        agent_ref: impl Into<String>,
    ) -> Result<Self, GameError> {
        config.validate()?;
        pool.validate()?;
        if pool.image_ids.len() != config.pool_size as usize {
            return Err(GameError::PoolMismatch {
                expected: config.pool_size,
                actual: pool.image_ids.len(),
            });
        }
        let state = if config.caption_guess_required {
            GameState::AwaitingCaptionGuess
        } else {
            GameState::Dialog {
                round: 1,
                step: DialogStep::AwaitingQuestion,
            }
        };
        Ok(Self {
            session_id,
            config,
            pool,
            player_ref,
            agent_ref: agent_ref.into(),
            state,
            caption_guess: None,
            rounds: Vec::new(),
            final_guesses: Vec::new(),
            induced_rank: None,
        })
    }

    pub fn secret(&self) -> &ImageId {
        &self.pool.secret_id
    }

    /// Check whether `event` would be accepted, without mutating anything.
    pub fn check(&self, event: &GameEvent) -> Result<(), GameError> {
        let illegal = || GameError::IllegalTransition {
            state: self.state.to_string(),
            event: event.name().to_owned(),
        };
        match (event, self.state) {
            (GameEvent::CaptionGuess { image_id }, GameState::AwaitingCaptionGuess) => {
                self.require_in_pool(image_id)
            }
            (
                GameEvent::QuestionAsked { text },
                GameState::Dialog {
                    step: DialogStep::AwaitingQuestion,
                    ..
                },
            ) => require_text(text, "question"),
            (
                GameEvent::AnswerReceived { text },
                GameState::Dialog {
                    step: DialogStep::AwaitingAnswer,
                    ..
                },
            ) => require_text(text, "answer"),
            (
                GameEvent::RoundGuess { image_id },
                GameState::Dialog {
                    step: DialogStep::AwaitingRoundGuess,
                    ..
                },
            ) => self.require_in_pool(image_id),
            (GameEvent::FinalGuess { image_id }, GameState::FinalGuessing) => {
                self.require_in_pool(image_id)?;
                if self.final_guesses.contains(image_id) {
                    return Err(GameError::DuplicateFinalGuess(image_id.clone()));
                }
                Ok(())
            }
            _ => Err(illegal()),
        }
    }

    /// Apply one event at time `at_ms`. On error the session is unchanged.
    pub fn apply(&mut self, event: &GameEvent, at_ms: u64) -> Result<Applied, GameError> {
        self.check(event)?;
        let applied = match (event, self.state) {
            (GameEvent::CaptionGuess { image_id }, GameState::AwaitingCaptionGuess) => {
                self.caption_guess = Some(image_id.clone());
                self.state = GameState::Dialog {
                    round: 1,
                    step: DialogStep::AwaitingQuestion,
                };
                Applied::CaptionGuessRecorded {
                    correct: image_id == self.secret(),
                }
            }
            (GameEvent::QuestionAsked { text }, GameState::Dialog { round, .. }) => {
                self.rounds.push(DialogRound {
                    index: round,
                    question: text.clone(),
                    answer: None,
                    round_guess: None,
                    asked_at_ms: at_ms,
                    answered_at_ms: None,
                    guessed_at_ms: None,
                });
                self.state = GameState::Dialog {
                    round,
                    step: DialogStep::AwaitingAnswer,
                };
                Applied::QuestionRecorded { round }
            }
            (GameEvent::AnswerReceived { text }, GameState::Dialog { round, .. }) => {
                let current = self.rounds.last_mut().expect("question precedes answer");
                current.answer = Some(text.clone());
                current.answered_at_ms = Some(at_ms);
                self.state = GameState::Dialog {
                    round,
                    step: DialogStep::AwaitingRoundGuess,
                };
                Applied::AnswerRecorded { round }
            }
            (GameEvent::RoundGuess { image_id }, GameState::Dialog { round, .. }) => {
                let correct = image_id == self.secret();
                let current = self.rounds.last_mut().expect("answer precedes guess");
                current.round_guess = Some(image_id.clone());
                current.guessed_at_ms = Some(at_ms);
                self.state = if round >= self.config.dialog_rounds {
                    GameState::FinalGuessing
                } else {
                    GameState::Dialog {
                        round: round + 1,
                        step: DialogStep::AwaitingQuestion,
                    }
                };
                Applied::RoundGuessRecorded { round, correct }
            }
            (GameEvent::FinalGuess { image_id }, GameState::FinalGuessing) => {
                self.final_guesses.push(image_id.clone());
                if image_id == self.secret() {
                    let rank = self.final_guesses.len() as u32;
                    self.induced_rank = Some(rank);
                    self.state = GameState::Complete;
                    Applied::Completed { rank }
                } else {
                    Applied::FinalGuessIncorrect {
                        guesses_so_far: self.final_guesses.len() as u32,
                    }
                }
            }
            _ => unreachable!("check() accepted an event the transition table rejects"),
        };
        Ok(applied)
    }

    /// Mark an unfinished game as abandoned. No-op on terminal games.
    pub fn abandon(&mut self) {
        if !self.state.is_terminal() {
            self.state = GameState::Abandoned;
        }
    }

    /// Round guesses that hit the secret, and the number of round guesses
    /// made. The caption guess counts as a round guess when
    /// `count_caption_guess` is set.
    pub fn round_guess_tally(&self, count_caption_guess: bool) -> (u32, u32) {
        let mut matched = 0;
        let mut total = 0;
        if count_caption_guess {
            if let Some(g) = &self.caption_guess {
                total += 1;
                matched += u32::from(g == self.secret());
            }
        }
        for g in self.rounds.iter().filter_map(|r| r.round_guess.as_ref()) {
            total += 1;
            matched += u32::from(g == self.secret());
        }
        (matched, total)
    }

    /// The question currently awaiting an answer, if any.
    pub fn pending_question(&self) -> Option<&str> {
        match self.state {
            GameState::Dialog {
                step: DialogStep::AwaitingAnswer,
                ..
            } => self.rounds.last().map(|r| r.question.as_str()),
            _ => None,
        }
    }

    /// Completed (question, answer) pairs, oldest first.
    pub fn history(&self) -> Vec<(String, String)> {
        self.rounds
            .iter()
            .filter_map(|r| r.answer.as_ref().map(|a| (r.question.clone(), a.clone())))
            .collect()
    }

    fn require_in_pool(&self, id: &ImageId) -> Result<(), GameError> {
        if self.pool.contains(id) {
            Ok(())
        } else {
            Err(GameError::UnknownImage(id.clone()))
        }
    }
}

fn require_text(text: &str, what: &'static str) -> Result<(), GameError> {
    if text.trim().is_empty() {
        Err(GameError::EmptyText(what))
    } else {
        Ok(())
    }
}

/// Rank of the secret induced by the player's successive final guesses:
/// one plus the number of wrong guesses before the secret was clicked.
pub fn induce_final_rank(final_guesses: &[ImageId], secret_id: &ImageId) -> Result<u32, GameError> {
    let mut seen = HashSet::with_capacity(final_guesses.len());
    for g in final_guesses {
        if !seen.insert(g) {
            return Err(GameError::DuplicateFinalGuess(g.clone()));
        }
    }
    match final_guesses.last() {
        Some(last) if last == secret_id => Ok(final_guesses.len() as u32),
        _ => Err(GameError::SecretNotTerminal),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn pool_of(n: usize, secret: usize) -> PoolSpec {
        let image_ids: Vec<ImageId> = (0..n).map(|i| ImageId::new(format!("img{i:02}"))).collect();
        PoolSpec {
            pool_id: "p0".into(),
            secret_id: image_ids[secret].clone(),
            caption: "a dog on a couch".into(),
            image_ids,
            shell_provenance: None,
        }
    }

    fn fresh() -> GameSession {
        GameSession::new(
            SessionId::new("s1"),
            GameConfig::default(),
            pool_of(20, 7),
            WorkerId::new("w1"),
            "truthful",
        )
        .unwrap()
    }

    fn id(i: usize) -> ImageId {
        ImageId::new(format!("img{i:02}"))
    }

    fn play_dialog(s: &mut GameSession, guess: usize) {
        for t in 1..=s.config.dialog_rounds {
            s.apply(&GameEvent::QuestionAsked { text: format!("q{t}?") }, 0).unwrap();
            s.apply(&GameEvent::AnswerReceived { text: "yes".into() }, 0).unwrap();
            s.apply(&GameEvent::RoundGuess { image_id: id(guess) }, 0).unwrap();
        }
    }

    #[test]
    fn new_session_starts_awaiting_caption_guess() {
        let s = fresh();
        assert_eq!(s.state, GameState::AwaitingCaptionGuess);
        assert!(s.rounds.is_empty());
        assert!(s.final_guesses.is_empty());
        assert_eq!(s.induced_rank, None);
    }

    #[test]
    fn pool_size_mismatch_is_rejected() {
        let err = GameSession::new(
            SessionId::new("s"),
            GameConfig::default(),
            pool_of(19, 0),
            WorkerId::new("w"),
            "a",
        )
        .unwrap_err();
        assert_eq!(err, GameError::PoolMismatch { expected: 20, actual: 19 });
    }

    #[test]
    fn malformed_pools_are_rejected() {
        let mut p = pool_of(20, 0);
        p.image_ids[3] = p.image_ids[4].clone();
        assert!(matches!(p.validate(), Err(GameError::InvalidPool(_))));
        let mut p = pool_of(20, 0);
        p.secret_id = ImageId::new("elsewhere");
        assert!(matches!(p.validate(), Err(GameError::InvalidPool(_))));
    }

    #[test]
    fn final_guess_before_dialog_is_illegal() {
        let mut s = fresh();
        let before = s.clone();
        let err = s.apply(&GameEvent::FinalGuess { image_id: id(1) }, 0).unwrap_err();
        assert!(matches!(err, GameError::IllegalTransition { ref state, ref event }
            if state == "AwaitingCaptionGuess" && event == "FinalGuess"));
        assert_eq!(s, before);
    }

    #[test]
    fn correct_caption_guess_does_not_end_the_game() {
        let mut s = fresh();
        let applied = s.apply(&GameEvent::CaptionGuess { image_id: id(7) }, 0).unwrap();
        assert_eq!(applied, Applied::CaptionGuessRecorded { correct: true });
        assert_eq!(s.state, GameState::Dialog { round: 1, step: DialogStep::AwaitingQuestion });
        play_dialog(&mut s, 7);
        assert_eq!(s.rounds.len(), 9);
        assert_eq!(s.state, GameState::FinalGuessing);
    }

    #[test]
    fn four_wrong_final_guesses_give_rank_five() {
        let mut s = fresh();
        s.apply(&GameEvent::CaptionGuess { image_id: id(0) }, 0).unwrap();
        play_dialog(&mut s, 0);
        for i in 0..4 {
            let a = s.apply(&GameEvent::FinalGuess { image_id: id(i) }, 0).unwrap();
            assert_eq!(a, Applied::FinalGuessIncorrect { guesses_so_far: i as u32 + 1 });
        }
        let a = s.apply(&GameEvent::FinalGuess { image_id: id(7) }, 0).unwrap();
        assert_eq!(a, Applied::Completed { rank: 5 });
        assert_eq!(s.state, GameState::Complete);
        assert_eq!(s.induced_rank, Some(5));
    }

    #[test]
    fn duplicate_and_unknown_final_guesses_are_rejected() {
        let mut s = fresh();
        s.apply(&GameEvent::CaptionGuess { image_id: id(0) }, 0).unwrap();
        play_dialog(&mut s, 0);
        s.apply(&GameEvent::FinalGuess { image_id: id(3) }, 0).unwrap();
        assert_eq!(
            s.apply(&GameEvent::FinalGuess { image_id: id(3) }, 0),
            Err(GameError::DuplicateFinalGuess(id(3)))
        );
        assert_eq!(
            s.apply(&GameEvent::FinalGuess { image_id: ImageId::new("nope") }, 0),
            Err(GameError::UnknownImage(ImageId::new("nope")))
        );
    }

    #[test]
    fn blank_questions_are_rejected() {
        let mut s = fresh();
        s.apply(&GameEvent::CaptionGuess { image_id: id(0) }, 0).unwrap();
        assert_eq!(
            s.apply(&GameEvent::QuestionAsked { text: "  \t".into() }, 0),
            Err(GameError::EmptyText("question"))
        );
    }

    #[test]
    fn second_question_before_answer_is_illegal() {
        let mut s = fresh();
        s.apply(&GameEvent::CaptionGuess { image_id: id(0) }, 0).unwrap();
        s.apply(&GameEvent::QuestionAsked { text: "is it red?".into() }, 0).unwrap();
        assert!(matches!(
            s.apply(&GameEvent::QuestionAsked { text: "again?".into() }, 0),
            Err(GameError::IllegalTransition { .. })
        ));
        assert_eq!(s.pending_question(), Some("is it red?"));
    }

    #[test]
    fn caption_guess_can_be_skipped_by_config() {
        let cfg = GameConfig { caption_guess_required: false, ..GameConfig::default() };
        let s = GameSession::new(SessionId::new("s"), cfg, pool_of(20, 0), WorkerId::new("w"), "a")
            .unwrap();
        assert_eq!(s.state, GameState::Dialog { round: 1, step: DialogStep::AwaitingQuestion });
    }

    #[test]
    fn rank_induction() {
        let s = id(9);
        assert_eq!(induce_final_rank(std::slice::from_ref(&s), &s), Ok(1));
        assert_eq!(
            induce_final_rank(&[id(1), id(2), id(3), id(4), s.clone()], &s),
            Ok(5)
        );
        assert_eq!(
            induce_final_rank(&[id(1), s.clone(), id(2)], &s),
            Err(GameError::SecretNotTerminal)
        );
        assert_eq!(induce_final_rank(&[], &s), Err(GameError::SecretNotTerminal));
    }

    #[test]
    fn round_guess_tally_counts_caption_guess_optionally() {
        let mut s = fresh();
        s.apply(&GameEvent::CaptionGuess { image_id: id(7) }, 0).unwrap();
        play_dialog(&mut s, 1);
        assert_eq!(s.round_guess_tally(true), (1, 10));
        assert_eq!(s.round_guess_tally(false), (0, 9));
    }
}
