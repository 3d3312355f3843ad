//! Orchestration for GuessWhich games: worker queue and pairing, per-session
//! event routing, inference-job brokering with retries and fallback,
//! reconnection, and write-once persistence of game logs.
//!
//! [`hub::Hub`] is the whole state machine without I/O; [`service`] runs it
//! behind a websocket endpoint with an in-process job broker.

pub mod agent;
pub mod config;
pub mod hub;
pub mod protocol;
pub mod service;
pub mod store;

pub use hub::{Hub, HubConfig, HubError, InferenceJob, JobOutcome, Outbound, FALLBACK_ANSWER};
pub use store::{FileStore, LogStore, MemoryStore, StorageError};
