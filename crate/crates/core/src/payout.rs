//! Assignment payout: a fixed base pay plus a two-part performance bonus.
//!
//! The round bonus is linear in the fraction of round guesses that hit the
//! secret across the whole assignment. The rank bonus is linear in the
//! normalized final rank `(n - rank) / (n - 1)`, averaged over games. Both
//! saturate at their caps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::survey::SurveyResponse;
use crate::game::{GameSession, GameState};
use crate::ids::WorkerId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BonusConfig {
    pub base_pay: f64,
    pub round_bonus_cap: f64,
    pub rank_bonus_cap: f64,
    /// Whether the pre-dialog caption guess counts as a round guess.
    pub count_caption_guess: bool,
}

impl Default for BonusConfig {
    fn default() -> Self {
        Self {
            base_pay: 5.00,
            round_bonus_cap: 1.00,
            rank_bonus_cap: 2.00,
            count_caption_guess: true,
        }
    }
}

impl BonusConfig {
    pub fn validate(&self) -> Result<(), PayoutError> {
        for (name, v) in [
            ("base_pay", self.base_pay),
            ("round_bonus_cap", self.round_bonus_cap),
            ("rank_bonus_cap", self.rank_bonus_cap),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PayoutError::InvalidConfig(format!("{name} must be a non-negative amount")));
            }
        }
        Ok(())
    }
}

/// One worker's block of games (one HIT).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub assignment_id: String,
    pub worker_id: WorkerId,
    pub condition: String,
    pub game_sessions: Vec<GameSession>,
    pub survey: Option<SurveyResponse>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PayoutBreakdown {
    pub base: f64,
    pub round_bonus: f64,
    pub rank_bonus: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PayoutError {
    #[error("assignment has {incomplete} game(s) that are not complete")]
    IncompleteAssignment { incomplete: usize },
    #[error("invalid bonus config: {0}")]
    InvalidConfig(String),
}

/// Normalized rank score in [0, 1]: 1 for rank 1, 0 for rank n.
pub fn rank_score(rank: u32, pool_size: u32) -> f64 {
    if pool_size < 2 {
        return 0.0;
    }
    let rank = rank.clamp(1, pool_size);
    f64::from(pool_size - rank) / f64::from(pool_size - 1)
}

pub fn compute_payout(assignment: &Assignment, cfg: &BonusConfig) -> Result<PayoutBreakdown, PayoutError> {
    cfg.validate()?;
    let incomplete = assignment
        .game_sessions
        .iter()
        .filter(|s| s.state != GameState::Complete)
        .count();
    if incomplete > 0 {
        return Err(PayoutError::IncompleteAssignment { incomplete });
    }

    let (matched, total) = assignment
        .game_sessions
        .iter()
        .map(|s| s.round_guess_tally(cfg.count_caption_guess))
        .fold((0u32, 0u32), |(m, t), (dm, dt)| (m + dm, t + dt));
    let round_bonus = if total == 0 {
        0.0
    } else {
        cfg.round_bonus_cap * f64::from(matched) / f64::from(total)
    };

    let games = assignment.game_sessions.len();
    let rank_bonus = if games == 0 {
        0.0
    } else {
        let sum: f64 = assignment
            .game_sessions
            .iter()
            .map(|s| rank_score(s.induced_rank.unwrap_or(s.config.pool_size), s.config.pool_size))
            .sum();
        cfg.rank_bonus_cap * sum / games as f64
    };

    Ok(PayoutBreakdown {
        base: cfg.base_pay,
        round_bonus,
        rank_bonus,
        total: cfg.base_pay + round_bonus + rank_bonus,
    })
}

/// The part of the assignment bonus earned by one finished game, assuming
/// the assignment runs `games_in_assignment` games of the same config. The
/// deltas of a fully completed assignment sum to its round plus rank bonus.
pub fn game_bonus_delta(session: &GameSession, games_in_assignment: u32, cfg: &BonusConfig) -> f64 {
    if games_in_assignment == 0 {
        return 0.0;
    }
    let per_game_guesses = session.config.dialog_rounds + u32::from(cfg.count_caption_guess);
    let total_guesses = f64::from(per_game_guesses * games_in_assignment);
    let (matched, _) = session.round_guess_tally(cfg.count_caption_guess);
    let round_part = cfg.round_bonus_cap * f64::from(matched) / total_guesses;
    let rank_part = match session.induced_rank {
        Some(rank) => {
            cfg.rank_bonus_cap * rank_score(rank, session.config.pool_size) / f64::from(games_in_assignment)
        }
        None => 0.0,
    };
    round_part + rank_part
}
