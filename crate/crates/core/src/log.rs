//! Persisted game-log records and replay verification.
//!
//! A record is self-contained: it carries the game config, the pool and
//! the ordered event list, so [`replay_record`] can re-drive the state
//! machine and check the stored outcome without any other input. Records
//! are stored one JSON object per line. The field-level schema is
//! documented in `docs/game-log-schema.md`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{Applied, GameConfig, GameError, GameEvent, GameSession, GameState, PoolSpec};
use crate::ids::{ImageId, SessionId, WorkerId};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameStatus {
    Complete,
    Abandoned,
}

/// How an answer reached the game: number of inference attempts and
/// whether the canned fallback was substituted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerDelivery {
    pub attempts: u32,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub seq: u32,
    pub at_ms: u64,
    pub event: GameEvent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivery: Option<AnswerDelivery>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameLogRecord {
    pub schema_version: u32,
    pub session_id: SessionId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment_id: Option<String>,
    pub worker_id: WorkerId,
    pub condition: String,
    pub agent_ref: String,
    /// 1-based position of this game within its assignment.
    pub game_index: u32,
    pub config: GameConfig,
    pub pool_id: String,
    pub secret_id: ImageId,
    pub caption: String,
    pub pool_image_ids: Vec<ImageId>,
    pub events: Vec<LoggedEvent>,
    pub status: GameStatus,
    pub induced_rank: Option<u32>,
    pub fallback_answers: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl GameLogRecord {
    pub fn pool(&self) -> PoolSpec {
        PoolSpec {
            pool_id: self.pool_id.clone(),
            secret_id: self.secret_id.clone(),
            caption: self.caption.clone(),
            image_ids: self.pool_image_ids.clone(),
            shell_provenance: None,
        }
    }

    /// Round guesses in order, caption guess first when present.
    pub fn round_guesses(&self) -> Vec<ImageId> {
        self.events
            .iter()
            .filter_map(|e| match &e.event {
                GameEvent::CaptionGuess { image_id } | GameEvent::RoundGuess { image_id } => Some(image_id.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn questions(&self) -> impl Iterator<Item = &str> {
        self.events.iter().filter_map(|e| match &e.event {
            GameEvent::QuestionAsked { text } => Some(text.as_str()),
            _ => None,
        })
    }

    pub fn is_fallback_contaminated(&self) -> bool {
        self.fallback_answers > 0
    }
}

/// Labels attached to a record that the game session itself does not carry.
#[derive(Debug, Clone, Default)]
pub struct RecordMeta {
    pub assignment_id: Option<String>,
    pub condition: String,
    pub game_index: u32,
    pub diagnostic: Option<String>,
}

/// A game session plus the ordered log of the events it accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct Recorder {
    session: GameSession,
    events: Vec<LoggedEvent>,
    fallback_answers: u32,
}

impl Recorder {
    pub fn new(session: GameSession) -> Self {
        Self {
            session,
            events: Vec::new(),
            fallback_answers: 0,
        }
    }

    pub fn apply(
        &mut self,
        event: GameEvent,
        at_ms: u64,
        delivery: Option<AnswerDelivery>,
    ) -> Result<Applied, GameError> {
        let applied = self.session.apply(&event, at_ms)?;
        if delivery.is_some_and(|d| d.fallback) {
            self.fallback_answers += 1;
        }
        self.events.push(LoggedEvent {
            seq: self.events.len() as u32,
            at_ms,
            event,
            delivery,
        });
        Ok(applied)
    }

    pub fn abandon(&mut self) {
        self.session.abandon();
    }

    pub fn session(&self) -> &GameSession {
        &self.session
    }

    pub fn events(&self) -> &[LoggedEvent] {
        &self.events
    }

    pub fn to_record(&self, meta: RecordMeta) -> GameLogRecord {
        let s = &self.session;
        GameLogRecord {
            schema_version: SCHEMA_VERSION,
            session_id: s.session_id.clone(),
            assignment_id: meta.assignment_id,
            worker_id: s.player_ref.clone(),
            condition: meta.condition,
            agent_ref: s.agent_ref.clone(),
            game_index: meta.game_index,
            config: s.config,
            pool_id: s.pool.pool_id.clone(),
            secret_id: s.pool.secret_id.clone(),
            caption: s.pool.caption.clone(),
            pool_image_ids: s.pool.image_ids.clone(),
            events: self.events.clone(),
            status: if s.state == GameState::Complete {
                GameStatus::Complete
            } else {
                GameStatus::Abandoned
            },
            induced_rank: s.induced_rank,
            fallback_answers: self.fallback_answers,
            diagnostic: meta.diagnostic,
        }
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),
    #[error("cannot rebuild session: {0}")]
    Session(#[source] GameError),
    #[error("event seq {found} out of order, expected {expected}")]
    Sequence { expected: u32, found: u32 },
    #[error("event seq {seq} rejected by the game: {source}")]
    Rejected {
        seq: u32,
        #[source]
        source: GameError,
    },
    #[error("replayed outcome disagrees with record: {0}")]
    Mismatch(String),
}

/// Re-drive the game state machine over a record's events and check that
/// the stored status, rank and fallback count are exactly what the events
/// produce. Returns the replayed terminal session.
pub fn replay_record(record: &GameLogRecord) -> Result<GameSession, ReplayError> {
    if record.schema_version != SCHEMA_VERSION {
        return Err(ReplayError::SchemaVersion(record.schema_version));
    }
    let session = GameSession::new(
        record.session_id.clone(),
        record.config,
        record.pool(),
        record.worker_id.clone(),
        record.agent_ref.clone(),
    )
    .map_err(ReplayError::Session)?;
    let mut rec = Recorder::new(session);
    for (i, e) in record.events.iter().enumerate() {
        if e.seq != i as u32 {
            return Err(ReplayError::Sequence {
                expected: i as u32,
                found: e.seq,
            });
        }
        rec.apply(e.event.clone(), e.at_ms, e.delivery)
            .map_err(|source| ReplayError::Rejected { seq: e.seq, source })?;
    }
    if record.status == GameStatus::Abandoned {
        rec.abandon();
    }
    let s = rec.session();
    let replayed_status = if s.state == GameState::Complete {
        GameStatus::Complete
    } else {
        GameStatus::Abandoned
    };
    if replayed_status != record.status {
        return Err(ReplayError::Mismatch(format!(
            "status {:?} recorded, events end in {}",
            record.status, s.state
        )));
    }
    if s.induced_rank != record.induced_rank {
        return Err(ReplayError::Mismatch(format!(
            "induced_rank {:?} recorded, events give {:?}",
            record.induced_rank, s.induced_rank
        )));
    }
    if rec.fallback_answers != record.fallback_answers {
        return Err(ReplayError::Mismatch(format!(
            "fallback_answers {} recorded, events give {}",
            record.fallback_answers, rec.fallback_answers
        )));
    }
    Ok(rec.session)
}

#[derive(Debug, Error)]
pub enum LogReadError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record {record}: unsupported schema version {version}")]
    SchemaVersion { record: usize, version: u32 },
}

/// Read newline-delimited JSON records, skipping blank lines.
pub fn read_jsonl<T, R>(reader: R) -> Result<Vec<T>, LogReadError>
where
    T: serde::de::DeserializeOwned,
    R: BufRead,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| LogReadError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| LogReadError::Parse {
            line: line_no,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_game_logs<R: BufRead>(reader: R) -> Result<Vec<GameLogRecord>, LogReadError> {
    let records: Vec<GameLogRecord> = read_jsonl(reader)?;
    if let Some((i, r)) = records
        .iter()
        .enumerate()
        .find(|(_, r)| r.schema_version != SCHEMA_VERSION)
    {
        return Err(LogReadError::SchemaVersion {
            record: i + 1,
            version: r.schema_version,
        });
    }
    Ok(records)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::tests::pool_of;

    fn finished_record() -> GameLogRecord {
        let session = GameSession::new(
            SessionId::new("s"),
            GameConfig::default(),
            pool_of(20, 3),
            WorkerId::new("w"),
            "truthful",
        )
        .unwrap();
        let ids = session.pool.image_ids.clone();
        let mut rec = Recorder::new(session);
        let mut t = 0;
        let mut tick = || {
            t += 250;
            t
        };
        rec.apply(GameEvent::CaptionGuess { image_id: ids[0].clone() }, tick(), None).unwrap();
        for r in 1..=9 {
            rec.apply(GameEvent::QuestionAsked { text: format!("q{r}") }, tick(), None).unwrap();
            let delivery = AnswerDelivery { attempts: 1 + u32::from(r == 4), fallback: r == 6 };
            rec.apply(GameEvent::AnswerReceived { text: "no".into() }, tick(), Some(delivery)).unwrap();
            rec.apply(GameEvent::RoundGuess { image_id: ids[r].clone() }, tick(), None).unwrap();
        }
        rec.apply(GameEvent::FinalGuess { image_id: ids[0].clone() }, tick(), None).unwrap();
        rec.apply(GameEvent::FinalGuess { image_id: ids[3].clone() }, tick(), None).unwrap();
        rec.to_record(RecordMeta {
            condition: "truthful".into(),
            game_index: 1,
            ..RecordMeta::default()
        })
    }

    #[test]
    fn complete_record_replays() {
        let r = finished_record();
        assert_eq!(r.status, GameStatus::Complete);
        assert_eq!(r.induced_rank, Some(2));
        assert_eq!(r.fallback_answers, 1);
        assert_eq!(r.events.len(), 1 + 27 + 2);
        let s = replay_record(&r).unwrap();
        assert_eq!(s.rounds.len(), 9);
        assert_eq!(s.induced_rank, Some(2));
    }

    #[test]
    fn json_roundtrip_replays_identically() {
        let r = finished_record();
        let text = serde_json::to_string(&r).unwrap();
        let back: GameLogRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(replay_record(&back).unwrap(), replay_record(&r).unwrap());
    }

    #[test]
    fn tampered_rank_fails_verification() {
        let mut r = finished_record();
        r.induced_rank = Some(1);
        assert!(matches!(replay_record(&r), Err(ReplayError::Mismatch(_))));
    }

    #[test]
    fn reordered_events_fail() {
        let mut r = finished_record();
        r.events.swap(1, 2);
        assert!(matches!(replay_record(&r), Err(ReplayError::Sequence { .. })));
        let mut r = finished_record();
        r.events.swap(1, 2);
        r.events[1].seq = 1;
        r.events[2].seq = 2;
        assert!(matches!(replay_record(&r), Err(ReplayError::Rejected { seq: 1, .. })));
    }

    #[test]
    fn truncated_record_claiming_completion_fails() {
        let mut r = finished_record();
        r.events.pop();
        assert!(matches!(replay_record(&r), Err(ReplayError::Mismatch(_))));
        r.status = GameStatus::Abandoned;
        r.induced_rank = None;
        let s = replay_record(&r).unwrap();
        assert_eq!(s.state, GameState::Abandoned);
    }

    #[test]
    fn jsonl_reader_reports_line_numbers() {
        let r = finished_record();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[r.clone(), r.clone()]).unwrap();
        buf.extend_from_slice(b"\n{broken\n");
        let err = read_game_logs(buf.as_slice()).unwrap_err();
        assert!(matches!(err, LogReadError::Parse { line: 4, .. }));
    }
}
