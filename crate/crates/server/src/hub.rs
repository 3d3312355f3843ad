//! The orchestrator state machine, free of I/O.
//!
//! [`Hub`] owns the worker queue, every live assignment and game, the
//! outstanding inference jobs and the persistence backlog. Every input
//! (client message, job outcome, disconnect, clock tick) is a method call
//! that returns the messages and jobs to emit, in order. The async runtime
//! in [`crate::service`] serializes calls behind one lock, which gives a
//! total order of events per session.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use guesswhich_core::agents::{AnswerRequest, AnswerResponse, QaPair, SecretImageRef, PROTOCOL_VERSION};
use guesswhich_core::analytics::{Dimension, SurveyRecord, SurveyResponse};
use guesswhich_core::game::{Applied, GameError};
use guesswhich_core::log::{AnswerDelivery, RecordMeta, Recorder, SCHEMA_VERSION};
use guesswhich_core::payout::{compute_payout, game_bonus_delta, Assignment as PayAssignment, BonusConfig};
use guesswhich_core::{GameConfig, GameEvent, GameLogRecord, GameSession, ImageId, PoolSpec, SessionId, WorkerId};
use thiserror::Error;

use crate::protocol::{
    AssignmentPhase, ClientEnvelope, ClientMessage, ErrorCode, FinalGuessView, GameSnapshot, GuessKind, ImageRef,
    RoundView, ServerEnvelope, ServerMessage,
};
use crate::store::{LogStore, StorageError};

pub const FALLBACK_ANSWER: &str = "I can't tell.";

#[derive(Debug, Clone, PartialEq)]
pub struct HubConfig {
    pub game: GameConfig,
    pub bonus: BonusConfig,
    pub games_per_assignment: u32,
    /// Agent variants; each assignment is played against one of them.
    pub conditions: Vec<String>,
    pub resume_window_ms: u64,
    pub agent_deadline_ms: u64,
    /// Inference attempts per question before the fallback answer.
    pub max_attempts: u32,
    /// Time allowed for each awaited human action.
    pub inactivity_timeout_ms: u64,
    /// Assignments allowed to run at once; later workers wait in the queue.
    pub max_active_assignments: usize,
    pub fallback_answer: String,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            game: GameConfig::default(),
            bonus: BonusConfig::default(),
            games_per_assignment: 10,
            conditions: vec!["default".into()],
            resume_window_ms: 5 * 60 * 1000,
            agent_deadline_ms: 10_000,
            max_attempts: 2,
            inactivity_timeout_ms: 5 * 60 * 1000,
            max_active_assignments: 1000,
            fallback_answer: FALLBACK_ANSWER.into(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum HubError {
    #[error("invalid hub configuration: {0}")]
    InvalidConfig(String),
    #[error("worker {0} already has an assignment")]
    RepeatWorker(WorkerId),
    #[error("assignment needs {needed} pools, only {available} loaded")]
    NoPoolsAvailable { needed: usize, available: usize },
    #[error("session not found: {0}")]
    SessionNotFound(String),
    #[error("resume token expired or invalid")]
    TokenExpired,
    #[error("unknown inference job {0}")]
    UnknownJob(u64),
}

impl HubError {
    pub fn code(&self) -> ErrorCode {
        match self {
            HubError::InvalidConfig(_) => ErrorCode::SchemaError,
            HubError::RepeatWorker(_) => ErrorCode::RepeatWorker,
            HubError::NoPoolsAvailable { .. } => ErrorCode::NoPoolsAvailable,
            HubError::SessionNotFound(_) | HubError::UnknownJob(_) => ErrorCode::SessionNotFound,
            HubError::TokenExpired => ErrorCode::TokenExpired,
        }
    }
}

/// An answer to generate. Redelivery of the same job is safe: agents see
/// the same self-contained request.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceJob {
    pub job_id: u64,
    pub game_session_id: SessionId,
    pub condition: String,
    pub round: u32,
    pub request: AnswerRequest,
    /// 1-based attempt number of this dispatch.
    pub attempt: u32,
    pub deadline_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum JobOutcome {
    Response(AnswerResponse),
    Timeout,
    Failure(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outbound {
    Client { worker: WorkerId, envelope: ServerEnvelope },
    Dispatch(InferenceJob),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Playing,
    /// A finished game's record is waiting to become durable.
    Persisting,
    SurveyPending,
    Complete,
    Abandoned,
}

#[derive(Debug)]
struct ActiveGame {
    recorder: Recorder,
    game_index: u32,
    pending_job: Option<u64>,
}

#[derive(Debug)]
struct AssignmentState {
    session_id: SessionId,
    worker: WorkerId,
    condition: String,
    resume_token: String,
    phase: Phase,
    finished: Vec<GameSession>,
    current: Option<ActiveGame>,
    disconnected_at: Option<u64>,
    last_activity_ms: u64,
    bonus_so_far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WorkerStatus {
    Queued,
    Active,
    Done,
}

#[derive(Debug)]
struct WorkerEntry {
    status: WorkerStatus,
    assignment: Option<SessionId>,
    out_seq: u64,
    last_client_seq: u64,
}

#[derive(Debug)]
struct JobState {
    job: InferenceJob,
    assignment: SessionId,
}

#[derive(Debug)]
enum PendingWrite {
    /// Completed game; GameEnd is sent once it is durable.
    GameEnd(SessionId, GameLogRecord),
    Abandoned(GameLogRecord),
    Survey(SessionId, SurveyRecord),
}

pub struct Hub<S: LogStore> {
    cfg: HubConfig,
    pools: Vec<PoolSpec>,
    store: S,
    workers: HashMap<WorkerId, WorkerEntry>,
    queue: VecDeque<WorkerId>,
    assignments: BTreeMap<SessionId, AssignmentState>,
    condition_counts: BTreeMap<String, u64>,
    jobs: HashMap<u64, JobState>,
    finalized_jobs: HashSet<u64>,
    next_job: u64,
    next_assignment: u64,
    backlog: VecDeque<PendingWrite>,
}

fn env(worker: &mut WorkerEntry, session: Option<&SessionId>, message: ServerMessage) -> ServerEnvelope {
    worker.out_seq += 1;
    ServerEnvelope {
        session_id: session.cloned(),
        seq: worker.out_seq,
        message,
    }
}

fn game_error_code(e: &GameError) -> ErrorCode {
    match e {
        GameError::IllegalTransition { .. } | GameError::DuplicateFinalGuess(_) => ErrorCode::IllegalTransition,
        _ => ErrorCode::SchemaError,
    }
}

impl<S: LogStore> Hub<S> {
    pub fn new(cfg: HubConfig, pools: Vec<PoolSpec>, store: S) -> Result<Self, HubError> {
        cfg.game.validate().map_err(|e| HubError::InvalidConfig(e.to_string()))?;
        cfg.bonus.validate().map_err(|e| HubError::InvalidConfig(e.to_string()))?;
        if cfg.conditions.is_empty() {
            return Err(HubError::InvalidConfig("at least one condition is required".into()));
        }
        if cfg.games_per_assignment == 0 || cfg.max_attempts == 0 || cfg.max_active_assignments == 0 {
            return Err(HubError::InvalidConfig(
                "games per assignment, attempts and active assignments must be positive".into(),
            ));
        }
        if cfg.fallback_answer.trim().is_empty() {
            return Err(HubError::InvalidConfig("fallback answer is empty".into()));
        }
        let mut ids = HashSet::new();
        for p in &pools {
            p.validate().map_err(|e| HubError::InvalidConfig(e.to_string()))?;
            if p.len() != cfg.game.pool_size as usize {
                return Err(HubError::InvalidConfig(format!(
                    "pool {} has {} images, config expects {}",
                    p.pool_id,
                    p.len(),
                    cfg.game.pool_size
                )));
            }
            if !ids.insert(p.pool_id.clone()) {
                return Err(HubError::InvalidConfig(format!("duplicate pool id {}", p.pool_id)));
            }
        }
        let mut workers = HashMap::new();
        for w in store.known_workers() {
            workers.insert(
                w,
                WorkerEntry {
                    status: WorkerStatus::Done,
                    assignment: None,
                    out_seq: 0,
                    last_client_seq: 0,
                },
            );
        }
        let condition_counts = cfg.conditions.iter().map(|c| (c.clone(), 0)).collect();
        Ok(Self {
            cfg,
            pools,
            store,
            workers,
            queue: VecDeque::new(),
            assignments: BTreeMap::new(),
            condition_counts,
            jobs: HashMap::new(),
            finalized_jobs: HashSet::new(),
            next_job: 1,
            next_assignment: 1,
            backlog: VecDeque::new(),
        })
    }

    pub fn config(&self) -> &HubConfig {
        &self.cfg
    }

    pub fn store(&self) -> &S {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut S {
        &mut self.store
    }

    /// Assignments created per condition.
    pub fn condition_counts(&self) -> &BTreeMap<String, u64> {
        &self.condition_counts
    }

    /// Seed the balancing counters, e.g. from assignments stored before a
    /// restart. Unknown conditions are ignored.
    pub fn restore_condition_counts(&mut self, counts: &BTreeMap<String, u64>) {
        for (c, n) in counts {
            if let Some(slot) = self.condition_counts.get_mut(c) {
                *slot = *n;
            }
        }
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn active_assignments(&self) -> usize {
        self.assignments
            .values()
            .filter(|a| !matches!(a.phase, Phase::Complete | Phase::Abandoned))
            .count()
    }

    pub fn pending_writes(&self) -> usize {
        self.backlog.len()
    }

    pub fn outstanding_jobs(&self) -> usize {
        self.jobs.len()
    }

    /// The live game session of a worker, if any.
    pub fn current_game(&self, worker: &WorkerId) -> Option<&GameSession> {
        let sid = self.workers.get(worker)?.assignment.as_ref()?;
        self.assignments.get(sid)?.current.as_ref().map(|g| g.recorder.session())
    }

    pub fn assignment_of(&self, worker: &WorkerId) -> Option<&SessionId> {
        self.workers.get(worker)?.assignment.as_ref()
    }

    fn worker_mut(&mut self, worker: &WorkerId) -> &mut WorkerEntry {
        self.workers.entry(worker.clone()).or_insert(WorkerEntry {
            status: WorkerStatus::Queued,
            assignment: None,
            out_seq: 0,
            last_client_seq: 0,
        })
    }

    fn to_worker(&mut self, worker: &WorkerId, message: ServerMessage) -> Outbound {
        let session = self.workers.get(worker).and_then(|w| w.assignment.clone());
        let envelope = env(self.worker_mut(worker), session.as_ref(), message);
        Outbound::Client {
            worker: worker.clone(),
            envelope,
        }
    }

    fn error_to(&mut self, worker: &WorkerId, code: ErrorCode, message: String, ref_seq: Option<u64>) -> Outbound {
        self.to_worker(
            worker,
            ServerMessage::Error {
                code,
                message,
                ref_seq,
            },
        )
    }

    fn least_filled_condition(&self) -> String {
        // Ties go to the earliest condition in config order.
        self.cfg
            .conditions
            .iter()
            .min_by_key(|c| self.condition_counts[*c])
            .expect("conditions non-empty")
            .clone()
    }

    /// Put a worker in line. A worker who ever held an assignment is
    /// refused, so nobody plays more than one assignment.
    pub fn enqueue_worker(&mut self, worker: &WorkerId, now_ms: u64) -> Result<Vec<Outbound>, HubError> {
        match self.workers.get(worker).map(|w| w.status) {
            Some(WorkerStatus::Active | WorkerStatus::Done) => return Err(HubError::RepeatWorker(worker.clone())),
            Some(WorkerStatus::Queued) if self.queue.contains(worker) => {
                let position = self.queue.iter().position(|w| w == worker).expect("queued") + 1;
                return Ok(vec![self.to_worker(worker, ServerMessage::QueueStatus { position })]);
            }
            _ => {}
        }
        let needed = self.cfg.games_per_assignment as usize;
        if self.pools.len() < needed {
            return Err(HubError::NoPoolsAvailable {
                needed,
                available: self.pools.len(),
            });
        }
        self.worker_mut(worker).status = WorkerStatus::Queued;
        self.queue.push_back(worker.clone());
        let position = self.queue.len();
        let mut out = vec![self.to_worker(worker, ServerMessage::QueueStatus { position })];
        out.extend(self.admit(now_ms));
        Ok(out)
    }

    /// Start assignments for queued workers while there is capacity.
    fn admit(&mut self, now_ms: u64) -> Vec<Outbound> {
        let mut out = Vec::new();
        while self.active_assignments() < self.cfg.max_active_assignments {
            let Some(worker) = self.queue.pop_front() else {
                break;
            };
            out.extend(self.start_assignment(&worker, now_ms));
        }
        out
    }

    fn start_assignment(&mut self, worker: &WorkerId, now_ms: u64) -> Vec<Outbound> {
        let condition = self.least_filled_condition();
        *self.condition_counts.get_mut(&condition).expect("known condition") += 1;
        let session_id = SessionId::new(format!("asg-{:06}", self.next_assignment));
        self.next_assignment += 1;
        let resume_token = uuid::Uuid::new_v4().simple().to_string();
        self.assignments.insert(
            session_id.clone(),
            AssignmentState {
                session_id: session_id.clone(),
                worker: worker.clone(),
                condition,
                resume_token: resume_token.clone(),
                phase: Phase::Playing,
                finished: Vec::new(),
                current: None,
                disconnected_at: None,
                last_activity_ms: now_ms,
                bonus_so_far: 0.0,
            },
        );
        let w = self.worker_mut(worker);
        w.status = WorkerStatus::Active;
        w.assignment = Some(session_id.clone());
        let mut out = vec![self.to_worker(
            worker,
            ServerMessage::AssignmentStart {
                assignment_id: session_id.to_string(),
                games: self.cfg.games_per_assignment,
                resume_token,
                resume_window_ms: self.cfg.resume_window_ms,
            },
        )];
        out.extend(self.start_game(&session_id, now_ms));
        out
    }

    fn start_game(&mut self, sid: &SessionId, now_ms: u64) -> Vec<Outbound> {
        let a = self.assignments.get_mut(sid).expect("assignment exists");
        let game_index = a.finished.len() as u32 + 1;
        let pool = self.pools[(game_index - 1) as usize].clone();
        let game_sid = SessionId::new(format!("{sid}-g{game_index:02}"));
        let session = GameSession::new(game_sid.clone(), self.cfg.game, pool.clone(), a.worker.clone(), a.condition.clone())
            .expect("pools validated against config at startup");
        a.current = Some(ActiveGame {
            recorder: Recorder::new(session),
            game_index,
            pending_job: None,
        });
        a.phase = Phase::Playing;
        a.last_activity_ms = now_ms;
        let worker = a.worker.clone();
        vec![self.to_worker(
            &worker,
            ServerMessage::GameStart {
                game_session_id: game_sid,
                game_index,
                images: pool.image_ids.iter().map(ImageRef::for_id).collect(),
                caption: pool.caption,
                dialog_rounds: self.cfg.game.dialog_rounds,
            },
        )]
    }

    /// Entry point for every client message from a connection bound to
    /// `worker`. Failures become `Error` messages to that worker and leave
    /// all state unchanged.
    pub fn route_client_message(&mut self, worker: &WorkerId, msg: ClientEnvelope, now_ms: u64) -> Vec<Outbound> {
        let seq = msg.seq;
        if let ClientMessage::Resume {
            worker_id,
            resume_token,
        } = &msg.message
        {
            if worker_id != worker {
                return vec![self.error_to(worker, ErrorCode::TokenExpired, "worker mismatch".into(), Some(seq))];
            }
            return match self.resume_session(worker, resume_token, now_ms) {
                Ok(out) => out,
                Err(e) => vec![self.error_to(worker, e.code(), e.to_string(), Some(seq))],
            };
        }
        {
            let w = self.worker_mut(worker);
            if seq <= w.last_client_seq {
                // Duplicate or stale delivery.
                return Vec::new();
            }
            w.last_client_seq = seq;
        }
        if let ClientMessage::JoinQueue { worker_id } = &msg.message {
            if worker_id != worker {
                return vec![self.error_to(worker, ErrorCode::SchemaError, "worker mismatch".into(), Some(seq))];
            }
            return match self.enqueue_worker(worker, now_ms) {
                Ok(out) => out,
                Err(e) => vec![self.error_to(worker, e.code(), e.to_string(), Some(seq))],
            };
        }
        let Some(sid) = self.workers.get(worker).and_then(|w| w.assignment.clone()) else {
            return vec![self.error_to(worker, ErrorCode::NotJoined, "no assignment for this worker".into(), Some(seq))];
        };
        if msg.session_id.as_ref() != Some(&sid) {
            return vec![self.error_to(
                worker,
                ErrorCode::SessionNotFound,
                format!("message addressed to {:?}, worker session is {sid}", msg.session_id),
                Some(seq),
            )];
        }
        match self.apply_client(&sid, msg.message, now_ms) {
            Ok(out) => out,
            Err((code, message)) => vec![self.error_to(worker, code, message, Some(seq))],
        }
    }

    fn apply_client(
        &mut self,
        sid: &SessionId,
        msg: ClientMessage,
        now_ms: u64,
    ) -> Result<Vec<Outbound>, (ErrorCode, String)> {
        let a = self.assignments.get_mut(sid).expect("worker's assignment exists");
        match (&msg, a.phase) {
            (ClientMessage::SurveySubmit { ratings }, Phase::SurveyPending) => {
                let ratings = *ratings;
                return self.submit_survey(sid, ratings, now_ms);
            }
            (_, Phase::Playing) => {}
            (_, phase) => {
                return Err((
                    ErrorCode::IllegalTransition,
                    format!("{} not accepted while assignment is {phase:?}", msg.kind()),
                ))
            }
        }
        let game = a.current.as_mut().expect("playing assignment has a game");
        let event = match msg {
            ClientMessage::CaptionGuess { image_id } => GameEvent::CaptionGuess { image_id },
            ClientMessage::Question { text } => GameEvent::QuestionAsked { text },
            ClientMessage::RoundGuess { image_id } => GameEvent::RoundGuess { image_id },
            ClientMessage::FinalGuess { image_id } => GameEvent::FinalGuess { image_id },
            other => {
                return Err((
                    ErrorCode::IllegalTransition,
                    format!("{} not accepted during a game", other.kind()),
                ))
            }
        };
        let applied = game
            .recorder
            .apply(event.clone(), now_ms, None)
            .map_err(|e| (game_error_code(&e), e.to_string()))?;
        a.last_activity_ms = now_ms;
        let worker = a.worker.clone();
        let state = game.recorder.session().state;
        let mut out = Vec::new();
        match (applied, event) {
            (Applied::CaptionGuessRecorded { .. }, GameEvent::CaptionGuess { image_id }) => {
                out.push(self.to_worker(
                    &worker,
                    ServerMessage::GuessAck {
                        kind: GuessKind::Caption,
                        round: 0,
                        image_id,
                        state,
                    },
                ));
            }
            (Applied::RoundGuessRecorded { round, .. }, GameEvent::RoundGuess { image_id }) => {
                out.push(self.to_worker(
                    &worker,
                    ServerMessage::GuessAck {
                        kind: GuessKind::Round,
                        round,
                        image_id,
                        state,
                    },
                ));
            }
            (Applied::QuestionRecorded { round }, GameEvent::QuestionAsked { text }) => {
                let job = self.new_job(sid, round, text, now_ms);
                out.push(self.to_worker(&worker, ServerMessage::Typing { round }));
                out.push(Outbound::Dispatch(job));
            }
            (Applied::FinalGuessIncorrect { guesses_so_far }, GameEvent::FinalGuess { image_id }) => {
                out.push(self.to_worker(
                    &worker,
                    ServerMessage::GuessFeedback {
                        image_id,
                        correct: false,
                        guesses_so_far,
                    },
                ));
            }
            (Applied::Completed { rank }, GameEvent::FinalGuess { image_id }) => {
                out.push(self.to_worker(
                    &worker,
                    ServerMessage::GuessFeedback {
                        image_id,
                        correct: true,
                        guesses_so_far: rank,
                    },
                ));
                out.extend(self.finish_game(sid, now_ms));
            }
            (applied, event) => unreachable!("{applied:?} cannot follow {}", event.name()),
        }
        Ok(out)
    }

    fn new_job(&mut self, sid: &SessionId, round: u32, question: String, now_ms: u64) -> InferenceJob {
        let a = self.assignments.get_mut(sid).expect("assignment exists");
        let game = a.current.as_mut().expect("game in progress");
        let session = game.recorder.session();
        let job_id = self.next_job;
        self.next_job += 1;
        let job = InferenceJob {
            job_id,
            game_session_id: session.session_id.clone(),
            condition: a.condition.clone(),
            round,
            request: AnswerRequest {
                protocol_version: PROTOCOL_VERSION,
                session_id: session.session_id.clone(),
                caption: session.pool.caption.clone(),
                history: session
                    .history()
                    .into_iter()
                    .map(|(question, answer)| QaPair { question, answer })
                    .collect(),
                question,
                secret_image_ref: SecretImageRef::Id {
                    image_id: session.pool.secret_id.clone(),
                },
            },
            attempt: 1,
            deadline_ms: now_ms + self.cfg.agent_deadline_ms,
        };
        game.pending_job = Some(job_id);
        self.jobs.insert(
            job_id,
            JobState {
                job: job.clone(),
                assignment: sid.clone(),
            },
        );
        job
    }

    /// Settle one attempt of an inference job. A response from any attempt
    /// is accepted while the job is open; a timeout or failure only counts
    /// for the latest attempt, so stale reports are ignored. Anything after
    /// the job is settled is ignored.
    pub fn complete_inference_job(
        &mut self,
        job_id: u64,
        attempt: u32,
        outcome: JobOutcome,
        now_ms: u64,
    ) -> Result<Vec<Outbound>, HubError> {
        if self.finalized_jobs.contains(&job_id) {
            return Ok(Vec::new());
        }
        let Some(state) = self.jobs.get(&job_id) else {
            return Err(HubError::UnknownJob(job_id));
        };
        let current = state.job.attempt;
        let answer = match outcome {
            JobOutcome::Response(resp) => match resp.validate_for(&state.job.request) {
                Ok(()) => Some(resp.answer),
                Err(e) if attempt == current => return Ok(self.retry_or_fallback(job_id, &e.to_string(), now_ms)),
                Err(_) => return Ok(Vec::new()),
            },
            JobOutcome::Timeout | JobOutcome::Failure(_) if attempt != current => return Ok(Vec::new()),
            JobOutcome::Timeout => return Ok(self.retry_or_fallback(job_id, "deadline exceeded", now_ms)),
            JobOutcome::Failure(reason) => return Ok(self.retry_or_fallback(job_id, &reason, now_ms)),
        };
        let answer = answer.expect("response branch");
        Ok(self.deliver_answer(
            job_id,
            answer,
            AnswerDelivery {
                attempts: current,
                fallback: false,
            },
            now_ms,
        ))
    }

    fn retry_or_fallback(&mut self, job_id: u64, reason: &str, now_ms: u64) -> Vec<Outbound> {
        let state = self.jobs.get_mut(&job_id).expect("open job");
        if state.job.attempt < self.cfg.max_attempts {
            state.job.attempt += 1;
            state.job.deadline_ms = now_ms + self.cfg.agent_deadline_ms;
            tracing::warn!(job_id, attempt = state.job.attempt, reason, "retrying inference job");
            return vec![Outbound::Dispatch(state.job.clone())];
        }
        tracing::warn!(job_id, reason, "inference failed; delivering fallback answer");
        let attempts = state.job.attempt;
        let fallback = self.cfg.fallback_answer.clone();
        self.deliver_answer(
            job_id,
            fallback,
            AnswerDelivery {
                attempts,
                fallback: true,
            },
            now_ms,
        )
    }

    fn deliver_answer(&mut self, job_id: u64, text: String, delivery: AnswerDelivery, now_ms: u64) -> Vec<Outbound> {
        let state = self.jobs.remove(&job_id).expect("open job");
        self.finalized_jobs.insert(job_id);
        let Some(a) = self.assignments.get_mut(&state.assignment) else {
            return Vec::new();
        };
        let Some(game) = a.current.as_mut().filter(|g| g.pending_job == Some(job_id)) else {
            return Vec::new();
        };
        game.pending_job = None;
        game.recorder
            .apply(GameEvent::AnswerReceived { text: text.clone() }, now_ms, Some(delivery))
            .expect("pending question awaits this answer");
        a.last_activity_ms = now_ms;
        let worker = a.worker.clone();
        vec![self.to_worker(
            &worker,
            ServerMessage::Answer {
                round: state.job.round,
                text,
                fallback: delivery.fallback,
            },
        )]
    }

    fn finish_game(&mut self, sid: &SessionId, now_ms: u64) -> Vec<Outbound> {
        let a = self.assignments.get_mut(sid).expect("assignment exists");
        let game = a.current.as_ref().expect("finished game");
        let record = game.recorder.to_record(RecordMeta {
            assignment_id: Some(sid.to_string()),
            condition: a.condition.clone(),
            game_index: game.game_index,
            diagnostic: None,
        });
        a.phase = Phase::Persisting;
        self.backlog.push_back(PendingWrite::GameEnd(sid.clone(), record));
        self.flush_backlog(now_ms)
    }

    /// Try every pending write in order; stop at the first transient
    /// failure so per-assignment order is kept.
    fn flush_backlog(&mut self, now_ms: u64) -> Vec<Outbound> {
        let mut out = Vec::new();
        while let Some(write) = self.backlog.pop_front() {
            let result = match &write {
                PendingWrite::GameEnd(_, r) | PendingWrite::Abandoned(r) => self.store.put_game(r),
                PendingWrite::Survey(_, r) => self.store.put_survey(r),
            };
            match result {
                Ok(()) => {}
                Err(e @ StorageError::AlreadyExists(_)) => {
                    tracing::error!(error = %e, "record already stored; keeping the stored copy");
                }
                Err(e) if e.is_transient() => {
                    tracing::warn!(error = %e, "storage write failed; will retry");
                    self.backlog.push_front(write);
                    break;
                }
                Err(e) => {
                    tracing::error!(error = %e, "storage write failed permanently");
                    self.backlog.push_front(write);
                    break;
                }
            }
            match write {
                PendingWrite::GameEnd(sid, _) => out.extend(self.after_game_persisted(&sid, now_ms)),
                PendingWrite::Abandoned(_) => {}
                PendingWrite::Survey(sid, _) => out.extend(self.after_survey_persisted(&sid, now_ms)),
            }
        }
        out
    }

    fn after_game_persisted(&mut self, sid: &SessionId, now_ms: u64) -> Vec<Outbound> {
        let games_total = self.cfg.games_per_assignment;
        let a = self.assignments.get_mut(sid).expect("assignment exists");
        if a.phase != Phase::Persisting {
            return Vec::new();
        }
        let game = a.current.take().expect("persisted game");
        let session = game.recorder.session().clone();
        let bonus_delta = game_bonus_delta(&session, games_total, &self.cfg.bonus);
        a.bonus_so_far += bonus_delta;
        let rank = session.induced_rank.expect("complete game has a rank");
        let game_session_id = session.session_id.clone();
        a.finished.push(session);
        let done = a.finished.len() as u32 >= games_total;
        if done {
            a.phase = Phase::SurveyPending;
            a.last_activity_ms = now_ms;
        }
        let worker = a.worker.clone();
        let mut out = vec![self.to_worker(
            &worker,
            ServerMessage::GameEnd {
                game_session_id,
                rank,
                bonus_delta,
            },
        )];
        if done {
            out.push(self.to_worker(
                &worker,
                ServerMessage::SurveyRequest {
                    dimensions: Dimension::ALL.iter().map(|d| d.as_str().to_owned()).collect(),
                },
            ));
        } else {
            out.extend(self.start_game(sid, now_ms));
        }
        out
    }

    fn submit_survey(
        &mut self,
        sid: &SessionId,
        ratings: SurveyResponse,
        now_ms: u64,
    ) -> Result<Vec<Outbound>, (ErrorCode, String)> {
        ratings.validate().map_err(|e| (ErrorCode::InvalidSurvey, e.to_string()))?;
        let a = self.assignments.get_mut(sid).expect("assignment exists");
        let record = SurveyRecord {
            schema_version: SCHEMA_VERSION,
            assignment_id: sid.to_string(),
            worker_id: a.worker.clone(),
            condition: a.condition.clone(),
            ratings,
            submitted_at_ms: now_ms,
        };
        a.phase = Phase::Persisting;
        a.last_activity_ms = now_ms;
        self.backlog.push_back(PendingWrite::Survey(sid.clone(), record));
        Ok(self.flush_backlog(now_ms))
    }

    fn after_survey_persisted(&mut self, sid: &SessionId, now_ms: u64) -> Vec<Outbound> {
        let a = self.assignments.get_mut(sid).expect("assignment exists");
        let assignment = PayAssignment {
            assignment_id: sid.to_string(),
            worker_id: a.worker.clone(),
            condition: a.condition.clone(),
            game_sessions: a.finished.clone(),
            survey: None,
        };
        let payout = compute_payout(&assignment, &self.cfg.bonus).expect("all games complete, config validated");
        a.phase = Phase::Complete;
        let worker = a.worker.clone();
        self.worker_mut(&worker).status = WorkerStatus::Done;
        let mut out = vec![self.to_worker(&worker, ServerMessage::AssignmentComplete { payout })];
        out.extend(self.admit(now_ms));
        out
    }

    /// Reattach a worker to their assignment and send a full snapshot.
    pub fn resume_session(&mut self, worker: &WorkerId, token: &str, now_ms: u64) -> Result<Vec<Outbound>, HubError> {
        let sid = self
            .workers
            .get(worker)
            .and_then(|w| w.assignment.clone())
            .ok_or_else(|| HubError::SessionNotFound(worker.to_string()))?;
        let a = self.assignments.get(&sid).expect("worker's assignment exists");
        if a.resume_token != token || a.phase == Phase::Abandoned {
            return Err(HubError::TokenExpired);
        }
        if a.disconnected_at.is_some_and(|t| now_ms.saturating_sub(t) > self.cfg.resume_window_ms) {
            self.abandon_assignment(&sid, "resume window expired", now_ms);
            return Err(HubError::TokenExpired);
        }
        let a = self.assignments.get_mut(&sid).expect("assignment exists");
        a.disconnected_at = None;
        // The snapshot itself takes the next seq.
        let last_seq = self.workers[worker].out_seq;
        let snapshot = self.snapshot(&sid, last_seq);
        Ok(vec![self.to_worker(worker, snapshot)])
    }

    fn snapshot(&self, sid: &SessionId, last_seq: u64) -> ServerMessage {
        let a = &self.assignments[sid];
        let phase = match a.phase {
            Phase::Playing | Phase::Persisting => AssignmentPhase::Playing,
            Phase::SurveyPending => AssignmentPhase::SurveyPending,
            Phase::Complete | Phase::Abandoned => AssignmentPhase::Complete,
        };
        let game = a.current.as_ref().map(|g| {
            let s = g.recorder.session();
            GameSnapshot {
                game_session_id: s.session_id.clone(),
                game_index: g.game_index,
                games_total: self.cfg.games_per_assignment,
                images: s.pool.image_ids.iter().map(ImageRef::for_id).collect(),
                caption: s.pool.caption.clone(),
                dialog_rounds: s.config.dialog_rounds,
                state: s.state,
                caption_guess: s.caption_guess.clone(),
                rounds: s
                    .rounds
                    .iter()
                    .map(|r| RoundView {
                        round: r.index,
                        question: r.question.clone(),
                        answer: r.answer.clone(),
                        round_guess: r.round_guess.clone(),
                    })
                    .collect(),
                final_guesses: s
                    .final_guesses
                    .iter()
                    .map(|id| FinalGuessView {
                        image_id: id.clone(),
                        correct: *id == s.pool.secret_id,
                    })
                    .collect(),
                answer_pending: g.pending_job.is_some(),
            }
        });
        ServerMessage::SessionSnapshot {
            assignment_id: sid.to_string(),
            phase,
            games_completed: a.finished.len() as u32,
            bonus_so_far: a.bonus_so_far,
            game,
            last_seq,
        }
    }

    /// Note that a worker's connection dropped. The assignment keeps running
    /// (answers still arrive) until the resume window closes.
    pub fn disconnect(&mut self, worker: &WorkerId, now_ms: u64) {
        let Some(w) = self.workers.get_mut(worker) else {
            return;
        };
        if w.status == WorkerStatus::Queued {
            // Queued workers simply leave the line and may join again.
            self.queue.retain(|q| q != worker);
            self.workers.remove(worker);
            return;
        }
        if let Some(a) = w.assignment.as_ref().and_then(|sid| self.assignments.get_mut(sid)) {
            if !matches!(a.phase, Phase::Complete | Phase::Abandoned) {
                a.disconnected_at.get_or_insert(now_ms);
            }
        }
    }

    fn abandon_assignment(&mut self, sid: &SessionId, reason: &str, now_ms: u64) -> Vec<Outbound> {
        let a = self.assignments.get_mut(sid).expect("assignment exists");
        if matches!(a.phase, Phase::Complete | Phase::Abandoned) {
            return Vec::new();
        }
        let mut record = None;
        if a.phase == Phase::Playing {
            if let Some(mut game) = a.current.take() {
                if let Some(job) = game.pending_job.take() {
                    self.jobs.remove(&job);
                    self.finalized_jobs.insert(job);
                }
                game.recorder.abandon();
                record = Some(game.recorder.to_record(RecordMeta {
                    assignment_id: Some(sid.to_string()),
                    condition: a.condition.clone(),
                    game_index: game.game_index,
                    diagnostic: Some(reason.to_owned()),
                }));
            }
        }
        // A game already queued for persistence stays complete.
        a.phase = Phase::Abandoned;
        let worker = a.worker.clone();
        tracing::info!(assignment = %sid, reason, "assignment abandoned");
        self.worker_mut(&worker).status = WorkerStatus::Done;
        if let Some(r) = record {
            self.backlog.push_back(PendingWrite::Abandoned(r));
        }
        let mut out = self.flush_backlog(now_ms);
        out.extend(self.admit(now_ms));
        out
    }

    /// Advance the clock: expire job deadlines, abandon idle or long
    /// disconnected assignments, retry pending writes and admit queued
    /// workers.
    pub fn tick(&mut self, now_ms: u64) -> Vec<Outbound> {
        let mut out = Vec::new();
        let mut expired: Vec<(u64, u32)> = self
            .jobs
            .values()
            .filter(|s| s.job.deadline_ms <= now_ms)
            .map(|s| (s.job.job_id, s.job.attempt))
            .collect();
        expired.sort_unstable();
        for (job_id, attempt) in expired {
            out.extend(
                self.complete_inference_job(job_id, attempt, JobOutcome::Timeout, now_ms)
                    .expect("job is open"),
            );
        }

        let mut stale = Vec::new();
        for (sid, a) in &self.assignments {
            if matches!(a.phase, Phase::Complete | Phase::Abandoned) {
                continue;
            }
            if a.disconnected_at.is_some_and(|t| now_ms.saturating_sub(t) > self.cfg.resume_window_ms) {
                stale.push((sid.clone(), "resume window expired", false));
                continue;
            }
            let awaiting_human = match a.phase {
                Phase::Playing => a.current.as_ref().is_some_and(|g| g.recorder.session().state.awaits_player()),
                Phase::SurveyPending => true,
                _ => false,
            };
            if awaiting_human && now_ms.saturating_sub(a.last_activity_ms) > self.cfg.inactivity_timeout_ms {
                stale.push((sid.clone(), "inactivity timeout", true));
            }
        }
        for (sid, reason, notify) in stale {
            let worker = self.assignments[&sid].worker.clone();
            out.extend(self.abandon_assignment(&sid, reason, now_ms));
            if notify {
                out.push(self.error_to(&worker, ErrorCode::InactivityTimeout, reason.into(), None));
            }
        }
        out.extend(self.flush_backlog(now_ms));
        out.extend(self.admit(now_ms));
        out
    }

    /// Assignments currently known, as (assignment, worker, condition).
    pub fn assignment_labels(&self) -> Vec<(SessionId, WorkerId, String)> {
        self.assignments
            .values()
            .map(|a| (a.session_id.clone(), a.worker.clone(), a.condition.clone()))
            .collect()
    }

    /// Workers refused by the knowledge-leak guard if they joined now.
    pub fn blocked_workers(&self) -> BTreeSet<WorkerId> {
        self.workers
            .iter()
            .filter(|(_, w)| w.status != WorkerStatus::Queued)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn pool_image_ids(&self) -> BTreeSet<ImageId> {
        self.pools.iter().flat_map(|p| p.image_ids.iter().cloned()).collect()
    }
}
