//! Shared test fixtures: pools and a scripted player that speaks the client
//! protocol without doing any I/O.
#![allow(dead_code)]

use guesswhich_core::analytics::SurveyResponse;
use guesswhich_core::game::DialogStep;
use guesswhich_core::{GameState, ImageId, PoolSpec, SessionId, WorkerId};
use guesswhich_server::protocol::{AssignmentPhase, ClientEnvelope, ClientMessage, ErrorCode, ServerEnvelope, ServerMessage};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

/// `count` pools of `size` images; the secret of pool `i` sits at position
/// `i % size`.
pub fn pools(count: usize, size: usize) -> Vec<PoolSpec> {
    (0..count)
        .map(|i| {
            let image_ids: Vec<ImageId> = (0..size).map(|j| ImageId::new(format!("p{i:02}-{j:02}"))).collect();
            PoolSpec {
                pool_id: format!("pool-{i:02}"),
                secret_id: image_ids[i % size].clone(),
                caption: format!("caption {i}"),
                image_ids,
                shell_provenance: None,
            }
        })
        .collect()
}

/// A player that answers every server message with the next legal move,
/// guessing at random.
pub struct Bot {
    pub worker: WorkerId,
    pub seq: u64,
    pub session: Option<SessionId>,
    pub token: Option<String>,
    pub images: Vec<ImageId>,
    pub final_order: Vec<ImageId>,
    pub final_tried: usize,
    pub games_ended: u32,
    pub complete: bool,
    pub ended_by: Option<ErrorCode>,
    pub errors: Vec<(ErrorCode, String)>,
    pub last_server_seq: u64,
    pub seq_gaps: u32,
    /// Set after reconnecting: the next server seq starts a new baseline.
    pub resync: bool,
    rng: StdRng,
}

impl Bot {
    pub fn new(worker: impl Into<String>, seed: u64) -> Self {
        Self {
            worker: WorkerId::new(worker.into()),
            seq: 0,
            session: None,
            token: None,
            images: Vec::new(),
            final_order: Vec::new(),
            final_tried: 0,
            games_ended: 0,
            complete: false,
            ended_by: None,
            errors: Vec::new(),
            last_server_seq: 0,
            seq_gaps: 0,
            resync: false,
            rng: StdRng::seed_from_u64(seed),
        }
    }

    pub fn finished(&self) -> bool {
        self.complete || self.ended_by.is_some()
    }

    pub fn send(&mut self, message: ClientMessage) -> ClientEnvelope {
        self.seq += 1;
        ClientEnvelope {
            session_id: self.session.clone(),
            seq: self.seq,
            message,
        }
    }

    pub fn join(&mut self) -> ClientEnvelope {
        let worker_id = self.worker.clone();
        self.last_server_seq = 0;
        self.send(ClientMessage::JoinQueue { worker_id })
    }

    pub fn resume(&mut self) -> ClientEnvelope {
        let msg = ClientMessage::Resume {
            worker_id: self.worker.clone(),
            resume_token: self.token.clone().expect("assignment started"),
        };
        self.send(msg)
    }

    fn random_image(&mut self) -> ImageId {
        self.images[self.rng.random_range(0..self.images.len())].clone()
    }

    fn question(&mut self) -> ClientMessage {
        let words = ["person", "dog", "car", "tree", "sky"];
        let w = words[self.rng.random_range(0..words.len())];
        ClientMessage::Question {
            text: format!("is there a {w}?"),
        }
    }

    fn next_final(&mut self) -> ClientMessage {
        let image_id = self.final_order[self.final_tried].clone();
        self.final_tried += 1;
        ClientMessage::FinalGuess { image_id }
    }

    fn new_game(&mut self, images: Vec<ImageId>) {
        self.images = images;
        self.final_order = self.images.clone();
        self.final_order.shuffle(&mut self.rng);
        self.final_tried = 0;
    }

    fn move_for(&mut self, state: GameState) -> Option<ClientMessage> {
        Some(match state {
            GameState::AwaitingCaptionGuess => ClientMessage::CaptionGuess {
                image_id: self.random_image(),
            },
            GameState::Dialog {
                step: DialogStep::AwaitingQuestion,
                ..
            } => self.question(),
            GameState::Dialog {
                step: DialogStep::AwaitingRoundGuess,
                ..
            } => ClientMessage::RoundGuess {
                image_id: self.random_image(),
            },
            GameState::FinalGuessing => self.next_final(),
            _ => return None,
        })
    }

    /// React to one server message; returns the messages to send back.
    pub fn on_message(&mut self, env: &ServerEnvelope) -> Vec<ClientEnvelope> {
        let snapshot = matches!(env.message, ServerMessage::SessionSnapshot { .. });
        if env.seq != 0 {
            // Messages sent while disconnected are lost; the snapshot
            // restates them.
            if !snapshot && !self.resync && env.seq != self.last_server_seq + 1 {
                self.seq_gaps += 1;
            }
            self.last_server_seq = env.seq;
            self.resync = false;
        }
        let reply = match &env.message {
            ServerMessage::AssignmentStart {
                assignment_id,
                resume_token,
                ..
            } => {
                self.session = Some(SessionId::new(assignment_id.clone()));
                self.token = Some(resume_token.clone());
                None
            }
            ServerMessage::GameStart { images, .. } => {
                self.new_game(images.iter().map(|r| r.id.clone()).collect());
                self.move_for(GameState::AwaitingCaptionGuess)
            }
            ServerMessage::GuessAck { state, .. } => self.move_for(*state),
            ServerMessage::Answer { .. } => Some(ClientMessage::RoundGuess {
                image_id: self.random_image(),
            }),
            ServerMessage::GuessFeedback { correct: false, .. } => Some(self.next_final()),
            ServerMessage::GuessFeedback { correct: true, .. } => None,
            ServerMessage::GameEnd { .. } => {
                self.games_ended += 1;
                None
            }
            ServerMessage::SurveyRequest { .. } => Some(self.survey()),
            ServerMessage::AssignmentComplete { .. } => {
                self.complete = true;
                None
            }
            ServerMessage::SessionSnapshot {
                phase,
                game,
                last_seq,
                ..
            } => {
                debug_assert_eq!(env.seq, last_seq + 1);
                match (phase, game) {
                    (AssignmentPhase::SurveyPending, _) => Some(self.survey()),
                    (AssignmentPhase::Complete, _) => {
                        self.complete = true;
                        None
                    }
                    (_, Some(g)) => {
                        self.images = g.images.iter().map(|r| r.id.clone()).collect();
                        let tried: Vec<ImageId> = g.final_guesses.iter().map(|f| f.image_id.clone()).collect();
                        let mut rest: Vec<ImageId> =
                            self.images.iter().filter(|i| !tried.contains(i)).cloned().collect();
                        rest.shuffle(&mut self.rng);
                        self.final_tried = tried.len();
                        self.final_order = tried.into_iter().chain(rest).collect();
                        self.move_for(g.state)
                    }
                    _ => None,
                }
            }
            ServerMessage::Error { code, message, .. } => {
                self.errors.push((*code, message.clone()));
                if matches!(code, ErrorCode::InactivityTimeout | ErrorCode::TokenExpired | ErrorCode::RepeatWorker) {
                    self.ended_by = Some(*code);
                }
                None
            }
            ServerMessage::QueueStatus { .. } | ServerMessage::Typing { .. } => None,
        };
        reply.map(|m| self.send(m)).into_iter().collect()
    }

    fn survey(&mut self) -> ClientMessage {
        let mut r = || self.rng.random_range(1..=5u8);
        ClientMessage::SurveySubmit {
            ratings: SurveyResponse {
                accuracy: r(),
                consistency: r(),
                image_understanding: r(),
                detail: r(),
                question_understanding: r(),
                fluency: r(),
            },
        }
    }
}
pub mod ws;
