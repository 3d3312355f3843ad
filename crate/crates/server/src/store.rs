//! Durable, write-once storage of game logs and survey records.

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use guesswhich_core::analytics::SurveyRecord;
use guesswhich_core::log::{read_game_logs, read_jsonl, LogReadError};
use guesswhich_core::{GameLogRecord, SessionId, WorkerId};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("record for {0} already written")]
    AlreadyExists(String),
    #[error("storage unavailable: {0}")]
    Unavailable(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store file {path}: {source}")]
    Corrupt {
        path: String,
        #[source]
        source: LogReadError,
    },
}

impl StorageError {
    /// Whether retrying the same write may succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, StorageError::Unavailable(_) | StorageError::Io { .. })
    }
}

pub trait LogStore: Send {
    /// Append a game record. A second record for the same session is
    /// rejected with [`StorageError::AlreadyExists`].
    fn put_game(&mut self, record: &GameLogRecord) -> Result<(), StorageError>;
    /// Append a survey record; one per assignment.
    fn put_survey(&mut self, record: &SurveyRecord) -> Result<(), StorageError>;
    /// Every worker that appears in stored data.
    fn known_workers(&self) -> BTreeSet<WorkerId>;
}

/// In-memory store. `fail_next` injects transient failures for tests.
#[derive(Debug, Default)]
pub struct MemoryStore {
    pub games: Vec<GameLogRecord>,
    pub surveys: Vec<SurveyRecord>,
    pub fail_next: u32,
    game_ids: HashSet<SessionId>,
    survey_ids: HashSet<String>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn injected(&mut self) -> Result<(), StorageError> {
        if self.fail_next > 0 {
            self.fail_next -= 1;
            return Err(StorageError::Unavailable("injected failure".into()));
        }
        Ok(())
    }
}

impl LogStore for MemoryStore {
    fn put_game(&mut self, record: &GameLogRecord) -> Result<(), StorageError> {
        if self.game_ids.contains(&record.session_id) {
            return Err(StorageError::AlreadyExists(record.session_id.to_string()));
        }
        self.injected()?;
        self.game_ids.insert(record.session_id.clone());
        self.games.push(record.clone());
        Ok(())
    }

    fn put_survey(&mut self, record: &SurveyRecord) -> Result<(), StorageError> {
        if self.survey_ids.contains(&record.assignment_id) {
            return Err(StorageError::AlreadyExists(record.assignment_id.clone()));
        }
        self.injected()?;
        self.survey_ids.insert(record.assignment_id.clone());
        self.surveys.push(record.clone());
        Ok(())
    }

    fn known_workers(&self) -> BTreeSet<WorkerId> {
        self.games
            .iter()
            .map(|g| g.worker_id.clone())
            .chain(self.surveys.iter().map(|s| s.worker_id.clone()))
            .collect()
    }
}

pub const GAMES_FILE: &str = "games.jsonl";
pub const SURVEYS_FILE: &str = "surveys.jsonl";

/// Two append-only JSONL files in one directory. Every append is flushed
/// and synced before it is acknowledged.
#[derive(Debug)]
pub struct FileStore {
    dir: PathBuf,
    game_ids: HashSet<SessionId>,
    survey_ids: HashSet<String>,
    workers: BTreeSet<WorkerId>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StorageError + '_ {
    move |source| StorageError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl FileStore {
    /// Open (or create) the store, indexing whatever is already on disk.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut store = Self {
            dir,
            game_ids: HashSet::new(),
            survey_ids: HashSet::new(),
            workers: BTreeSet::new(),
        };
        for g in store.read_games()? {
            store.workers.insert(g.worker_id.clone());
            store.game_ids.insert(g.session_id);
        }
        for s in store.read_surveys()? {
            store.workers.insert(s.worker_id.clone());
            store.survey_ids.insert(s.assignment_id);
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn games_path(&self) -> PathBuf {
        self.dir.join(GAMES_FILE)
    }

    pub fn surveys_path(&self) -> PathBuf {
        self.dir.join(SURVEYS_FILE)
    }

    pub fn read_games(&self) -> Result<Vec<GameLogRecord>, StorageError> {
        let path = self.games_path();
        match File::open(&path) {
            Ok(f) => read_game_logs(BufReader::new(f)).map_err(|source| StorageError::Corrupt {
                path: path.display().to_string(),
                source,
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    pub fn read_surveys(&self) -> Result<Vec<SurveyRecord>, StorageError> {
        let path = self.surveys_path();
        match File::open(&path) {
            Ok(f) => read_jsonl(BufReader::new(f)).map_err(|source| StorageError::Corrupt {
                path: path.display().to_string(),
                source,
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn append<T: serde::Serialize>(&self, path: &Path, record: &T) -> Result<(), StorageError> {
        let mut line = serde_json::to_vec(record).expect("records serialize");
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        f.write_all(&line).map_err(io_err(path))?;
        f.sync_data().map_err(io_err(path))
    }
}

impl LogStore for FileStore {
    fn put_game(&mut self, record: &GameLogRecord) -> Result<(), StorageError> {
        if self.game_ids.contains(&record.session_id) {
            return Err(StorageError::AlreadyExists(record.session_id.to_string()));
        }
        self.append(&self.games_path(), record)?;
        self.game_ids.insert(record.session_id.clone());
        self.workers.insert(record.worker_id.clone());
        Ok(())
    }

    fn put_survey(&mut self, record: &SurveyRecord) -> Result<(), StorageError> {
        if self.survey_ids.contains(&record.assignment_id) {
            return Err(StorageError::AlreadyExists(record.assignment_id.clone()));
        }
        self.append(&self.surveys_path(), record)?;
        self.survey_ids.insert(record.assignment_id.clone());
        self.workers.insert(record.worker_id.clone());
        Ok(())
    }

    fn known_workers(&self) -> BTreeSet<WorkerId> {
        self.workers.clone()
    }
}
