//! Core domain model for the GuessWhich cooperative image-guessing game.
//!
//! A human (or a simulated questioner) sees a caption and a pool of images,
//! asks an answerer agent a fixed number of questions about a secret image,
//! picks a best guess after every round, and finally clicks through the pool
//! until the secret is found. The number of clicks is the induced rank of the
//! secret, which drives every team-performance metric computed in
//! [`analytics`].
//!
//! Modules:
//! - [`game`]: the per-game state machine and rank induction.
//! - [`payout`]: assignment-level base pay and two-part bonus.
//! - [`embedding`] and [`pool`]: embedding store and distractor sampling.
//! - [`agents`]: the answerer wire protocol, baseline answerers, simulated
//!   questioners and the AI-AI game runner.
//! - [`log`]: the persisted game-log schema and replay verification.
//! - [`analytics`]: MR/MRR, coarse per-round ranks, bootstrap intervals,
//!   Mann-Whitney U, survey and question n-gram summaries, reports.
//! - [`synth`]: seeded synthetic datasets for demos and tests.

pub mod agents;
pub mod analytics;
pub mod embedding;
pub mod game;
pub mod ids;
pub mod log;
pub mod payout;
pub mod pool;
pub mod seed;
pub mod synth;

pub use embedding::EmbeddingStore;
pub use game::{GameConfig, GameError, GameEvent, GameSession, GameState, PoolSpec};
pub use ids::{ImageId, SessionId, WorkerId};
pub use log::GameLogRecord;
