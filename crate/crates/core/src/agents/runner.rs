use thiserror::Error;

use super::protocol::{AgentError, AnswerRequest, Answerer, QaPair, SecretImageRef, PROTOCOL_VERSION};
use super::attributes::ImageAttributes;
use super::questioner::{Questioner, QuestionerPolicy};
use crate::embedding::EmbeddingStore;
use crate::game::{Applied, GameConfig, GameError, GameEvent, GameSession, PoolSpec};
use crate::ids::{SessionId, WorkerId};
use crate::log::{AnswerDelivery, GameLogRecord, RecordMeta, Recorder};

/// Identity and bookkeeping labels for one simulated game.
#[derive(Debug, Clone)]
pub struct GameLabels {
    pub session_id: SessionId,
    pub worker_id: WorkerId,
    pub condition: String,
    pub agent_ref: String,
    pub assignment_id: Option<String>,
    pub game_index: u32,
    /// Logical clock origin; events are stamped one second apart.
    pub start_ms: u64,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Game(#[from] GameError),
    #[error("agent failed in round {round}: {source}")]
    Agent {
        round: u32,
        #[source]
        source: AgentError,
        /// The game up to the failure, marked abandoned.
        record: Box<GameLogRecord>,
    },
    #[error("questioner ranking never reached the secret")]
    IncompleteRanking,
}

const TICK_MS: u64 = 1000;

/// Play one AI-AI game and return its log record. The record has the same
/// schema as a human game; the condition label identifies the simulated
/// questioner.
pub fn run_ai_ai_game(
    questioner: &mut dyn Questioner,
    answerer: &dyn Answerer,
    pool: &PoolSpec,
    cfg: &GameConfig,
    labels: GameLabels,
) -> Result<GameLogRecord, RunError> {
    let session = GameSession::new(
        labels.session_id.clone(),
        *cfg,
        pool.clone(),
        labels.worker_id.clone(),
        labels.agent_ref.clone(),
    )?;
    let meta = RecordMeta {
        assignment_id: labels.assignment_id.clone(),
        condition: labels.condition.clone(),
        game_index: labels.game_index,
        diagnostic: None,
    };
    let mut rec = Recorder::new(session);
    let mut clock = labels.start_ms;
    let mut tick = || {
        clock += TICK_MS;
        clock
    };

    if cfg.caption_guess_required {
        rec.apply(GameEvent::CaptionGuess { image_id: questioner.caption_guess() }, tick(), None)?;
    }
    for round in 1..=cfg.dialog_rounds {
        let question = questioner.next_question(round);
        rec.apply(GameEvent::QuestionAsked { text: question.clone() }, tick(), None)?;
        let req = AnswerRequest {
            protocol_version: PROTOCOL_VERSION,
            session_id: labels.session_id.clone(),
            caption: pool.caption.clone(),
            history: rec
                .session()
                .history()
                .into_iter()
                .map(|(question, answer)| QaPair { question, answer })
                .collect(),
            question: question.clone(),
            secret_image_ref: SecretImageRef::Id {
                image_id: pool.secret_id.clone(),
            },
        };
        let answer = answerer
            .answer(&req)
            .and_then(|resp| resp.validate_for(&req).map(|_| resp.answer));
        let answer = match answer {
            Ok(a) => a,
            Err(source) => {
                rec.abandon();
                let record = rec.to_record(RecordMeta {
                    diagnostic: Some(format!("agent error in round {round}: {source}")),
                    ..meta
                });
                return Err(RunError::Agent {
                    round,
                    source,
                    record: Box::new(record),
                });
            }
        };
        questioner.observe_answer(&question, &answer);
        rec.apply(
            GameEvent::AnswerReceived { text: answer },
            tick(),
            Some(AnswerDelivery {
                attempts: 1,
                fallback: false,
            }),
        )?;
        rec.apply(GameEvent::RoundGuess { image_id: questioner.round_guess(round) }, tick(), None)?;
    }
    for image_id in questioner.final_ranking() {
        if let Applied::Completed { .. } = rec.apply(GameEvent::FinalGuess { image_id }, tick(), None)? {
            return Ok(rec.to_record(meta));
        }
    }
    Err(RunError::IncompleteRanking)
}

/// Inputs shared by every game of a simulated batch.
pub struct SimulationSpec<'a> {
    pub policy: &'a QuestionerPolicy,
    pub answerer: &'a dyn Answerer,
    pub pools: &'a [PoolSpec],
    pub config: GameConfig,
    pub store: Option<&'a EmbeddingStore>,
    pub attributes: Option<&'a ImageAttributes>,
    pub games: usize,
    pub games_per_assignment: u32,
    /// Mixed into session ids so batches with different seeds never collide.
    pub seed: u64,
}

/// Run `games` AI-AI games, cycling through `pools` in order. Consecutive
/// games are grouped into simulated assignments of `games_per_assignment`,
/// each with its own simulated worker, mirroring a human batch. Games that
/// fail on an agent error are kept as abandoned diagnostic records.
pub fn simulate_games(spec: &SimulationSpec<'_>) -> Result<Vec<GameLogRecord>, RunError> {
    if spec.pools.is_empty() || spec.games_per_assignment == 0 {
        return Err(RunError::Game(GameError::InvalidConfig(
            "simulation needs at least one pool and a positive assignment size".into(),
        )));
    }
    spec.policy
        .validate(&spec.config)
        .map_err(|e| GameError::InvalidConfig(e.to_string()))?;
    let condition = format!("sim:{}+{}", spec.policy.label(), spec.answerer.name());
    let per = spec.games_per_assignment as usize;
    let mut out = Vec::with_capacity(spec.games);
    for g in 0..spec.games {
        let pool = &spec.pools[g % spec.pools.len()];
        let mut questioner = spec
            .policy
            .instantiate(pool, spec.store, spec.attributes, g as u64)
            .map_err(|e| GameError::InvalidConfig(e.to_string()))?;
        let assignment = g / per;
        let labels = GameLabels {
            session_id: SessionId::new(format!("sim-{:016x}-{g:06}", spec.seed)),
            worker_id: WorkerId::new(format!("sim-worker-{assignment:05}")),
            condition: condition.clone(),
            agent_ref: spec.answerer.name().to_owned(),
            assignment_id: Some(format!("sim-{:016x}-a{assignment:05}", spec.seed)),
            game_index: (g % per) as u32 + 1,
            start_ms: g as u64 * 1_000_000,
        };
        match run_ai_ai_game(questioner.as_mut(), spec.answerer, pool, &spec.config, labels) {
            Ok(record) => out.push(record),
            Err(RunError::Agent { record, .. }) => out.push(*record),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::agents::{QuestionerPolicy, ScriptedAnswerer};
    use crate::game::tests::pool_of;
    use crate::log::replay_record;

    fn labels(i: u32) -> GameLabels {
        GameLabels {
            session_id: SessionId::new(format!("sim-{i}")),
            worker_id: WorkerId::new("sim-worker"),
            condition: "sim:scripted+scripted".into(),
            agent_ref: "scripted".into(),
            assignment_id: None,
            game_index: 1,
            start_ms: 0,
        }
    }

    struct Broken;

    impl Answerer for Broken {
        fn name(&self) -> &str {
            "broken"
        }

        fn answer(&self, _req: &AnswerRequest) -> Result<crate::agents::AnswerResponse, AgentError> {
            Err(AgentError::Unavailable("down".into()))
        }
    }

    #[test]
    fn scripted_game_is_reproducible_and_replays() {
        let pool = pool_of(20, 11);
        let policy = QuestionerPolicy::Scripted {
            questions: (1..=9).map(|i| format!("question {i}?")).collect(),
            seed: 42,
        };
        let answerer = ScriptedAnswerer::new(HashMap::from([("question 3?".into(), "yes".into())]), "no").unwrap();
        let run = || {
            let mut q = policy.instantiate(&pool, None, None, 0).unwrap();
            run_ai_ai_game(q.as_mut(), &answerer, &pool, &GameConfig::default(), labels(0)).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let s = replay_record(&a).unwrap();
        assert_eq!(s.rounds.len(), 9);
        assert_eq!(s.rounds[2].answer.as_deref(), Some("yes"));
    }

    #[test]
    fn agent_failure_yields_diagnostic_record() {
        let pool = pool_of(20, 0);
        let mut q = QuestionerPolicy::RandomGuesser { seed: 1 }
            .instantiate(&pool, None, None, 0)
            .unwrap();
        let err = run_ai_ai_game(q.as_mut(), &Broken, &pool, &GameConfig::default(), labels(1)).unwrap_err();
        let RunError::Agent { round, record, .. } = err else {
            panic!("expected agent error");
        };
        assert_eq!(round, 1);
        assert_eq!(record.status, crate::log::GameStatus::Abandoned);
        assert!(record.diagnostic.is_some());
        replay_record(&record).unwrap();
    }
}
