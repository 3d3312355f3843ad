//! Async runtime around [`Hub`]: websocket endpoint, image endpoint, agent
//! endpoint, job broker and the clock.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::Body;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use guesswhich_core::agents::{AgentError, AnswerRequest, ImageAttributes};
use guesswhich_core::log::read_jsonl;
use guesswhich_core::{EmbeddingStore, PoolSpec, WorkerId};
use parking_lot::Mutex;
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use crate::agent::{AgentHandle, AgentSpec};
use crate::config::ServiceConfig;
use crate::hub::{Hub, HubConfig, HubError, InferenceJob, JobOutcome, Outbound};
use crate::protocol::{parse_client, ClientMessage, ErrorCode, ServerEnvelope, ServerMessage};
use crate::store::{FileStore, LogStore, StorageError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Hub(#[from] HubError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("cannot load {what} from {path}: {message}")]
    Load { what: &'static str, path: String, message: String },
    #[error("agent for condition {condition}: {source}")]
    Agent {
        condition: String,
        #[source]
        source: AgentError,
    },
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Report of one inference attempt.
#[derive(Debug, Clone)]
pub struct Completion {
    pub job_id: u64,
    pub attempt: u32,
    pub outcome: JobOutcome,
}

/// Where inference jobs go. Delivery may be at-least-once: the hub ignores
/// repeated completions.
pub trait JobBroker: Send + Sync {
    fn submit(&self, job: InferenceJob);
}

/// Worker tasks in this process, each answering jobs with the agent of the
/// job's condition under the agent deadline.
pub struct InProcessBroker {
    tx: mpsc::UnboundedSender<InferenceJob>,
}

impl InProcessBroker {
    pub fn spawn(
        workers: usize,
        agents: Arc<HashMap<String, AgentHandle>>,
        deadline: Duration,
        completions: mpsc::UnboundedSender<Completion>,
    ) -> Self {
        let (tx, rx) = mpsc::unbounded_channel::<InferenceJob>();
        let rx = Arc::new(tokio::sync::Mutex::new(rx));
        for _ in 0..workers.max(1) {
            let rx = Arc::clone(&rx);
            let agents = Arc::clone(&agents);
            let completions = completions.clone();
            tokio::spawn(async move {
                loop {
                    let Some(job) = rx.lock().await.recv().await else {
                        break;
                    };
                    let outcome = match agents.get(&job.condition) {
                        None => JobOutcome::Failure(format!("no agent for condition {}", job.condition)),
                        Some(agent) => match tokio::time::timeout(deadline, agent.answer(job.request.clone())).await {
                            Err(_) => JobOutcome::Timeout,
                            Ok(Ok(resp)) => JobOutcome::Response(resp),
                            Ok(Err(AgentError::Timeout)) => JobOutcome::Timeout,
                            Ok(Err(e)) => JobOutcome::Failure(e.to_string()),
                        },
                    };
                    let done = Completion {
                        job_id: job.job_id,
                        attempt: job.attempt,
                        outcome,
                    };
                    if completions.send(done).is_err() {
                        break;
                    }
                }
            });
        }
        Self { tx }
    }
}

impl JobBroker for InProcessBroker {
    fn submit(&self, job: InferenceJob) {
        if self.tx.send(job).is_err() {
            tracing::error!("job broker stopped; job dropped");
        }
    }
}

/// Image bytes by id: files in a directory, optionally a generated
/// placeholder for ids without a file.
#[derive(Debug, Clone, Default)]
pub struct ImageSource {
    pub dir: Option<PathBuf>,
    pub placeholder: bool,
}

const IMAGE_TYPES: &[(&str, &str)] = &[
    ("jpg", "image/jpeg"),
    ("jpeg", "image/jpeg"),
    ("png", "image/png"),
    ("webp", "image/webp"),
    ("gif", "image/gif"),
    ("svg", "image/svg+xml"),
];

fn valid_image_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.len() <= 200
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn placeholder_svg(id: &str) -> String {
    // Colour derived from the id so neighbouring tiles are distinguishable.
    let h = id.bytes().fold(0u32, |h, b| h.wrapping_mul(31).wrapping_add(u32::from(b))) % 360;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"224\" height=\"224\">\
         <rect width=\"224\" height=\"224\" fill=\"hsl({h},45%,70%)\"/>\
         <text x=\"112\" y=\"118\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{id}</text></svg>"
    )
}

impl ImageSource {
    pub fn load(&self, id: &str) -> Option<(&'static str, Vec<u8>)> {
        if !valid_image_id(id) {
            return None;
        }
        if let Some(dir) = &self.dir {
            for (ext, mime) in IMAGE_TYPES {
                if let Ok(bytes) = std::fs::read(dir.join(format!("{id}.{ext}"))) {
                    return Some((mime, bytes));
                }
            }
        }
        self.placeholder
            .then(|| ("image/svg+xml", placeholder_svg(id).into_bytes()))
    }
}

/// Everything needed to start the service.
pub struct ServiceParts<S: LogStore> {
    pub hub_config: HubConfig,
    pub pools: Vec<PoolSpec>,
    pub store: S,
    pub agents: HashMap<String, AgentHandle>,
    pub images: ImageSource,
    pub bind: String,
    pub broker_workers: usize,
    pub tick_ms: u64,
    /// Replaces the in-process broker; completions must be reported with
    /// [`Service::complete_job`].
    pub broker: Option<Arc<dyn JobBroker>>,
    /// Assignments already stored per condition, for balancing.
    pub prior_condition_counts: BTreeMap<String, u64>,
}

fn load_err(what: &'static str, path: &std::path::Path, message: impl ToString) -> ServiceError {
    ServiceError::Load {
        what,
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

pub fn load_pools(path: &std::path::Path) -> Result<Vec<PoolSpec>, ServiceError> {
    let f = File::open(path).map_err(|e| load_err("pools", path, e))?;
    read_jsonl(BufReader::new(f)).map_err(|e| load_err("pools", path, e))
}

impl ServiceParts<FileStore> {
    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        let pools = load_pools(&cfg.pools)?;
        let attributes = match (&cfg.embeddings, &cfg.categories) {
            (Some(e), Some(c)) => {
                let mut store = EmbeddingStore::load_embeddings(e).map_err(|err| load_err("embeddings", e, err))?;
                store.load_categories(c).map_err(|err| load_err("categories", c, err))?;
                ImageAttributes::from_categories(&store)
            }
            (None, Some(c)) => categories_as_attributes(c)?,
            _ => ImageAttributes::new(),
        };
        let attributes = Arc::new(attributes);
        let timeout = Duration::from_millis(cfg.agent_deadline_ms);
        let mut agents = HashMap::new();
        for c in &cfg.conditions {
            let agent = AgentHandle::build(&c.agent, Arc::clone(&attributes), timeout).map_err(|source| {
                ServiceError::Agent {
                    condition: c.name.clone(),
                    source,
                }
            })?;
            agents.insert(c.name.clone(), agent);
        }
        let store = FileStore::open(&cfg.log_dir)?;
        let mut seen = HashSet::new();
        let mut prior_condition_counts = BTreeMap::new();
        for g in store.read_games()? {
            if let Some(a) = g.assignment_id {
                if seen.insert(a) {
                    *prior_condition_counts.entry(g.condition).or_insert(0) += 1;
                }
            }
        }
        Ok(Self {
            hub_config: cfg.hub_config(),
            pools,
            store,
            agents,
            images: ImageSource {
                dir: cfg.images_dir.clone(),
                placeholder: cfg.placeholder_images,
            },
            bind: cfg.bind.clone(),
            broker_workers: cfg.broker_workers,
            tick_ms: cfg.tick_ms,
            broker: None,
            prior_condition_counts,
        })
    }
}

/// Attributes straight from a category file, without embeddings.
fn categories_as_attributes(path: &std::path::Path) -> Result<ImageAttributes, ServiceError> {
    use guesswhich_core::embedding::CategoryRecord;
    let f = File::open(path).map_err(|e| load_err("categories", path, e))?;
    let records: Vec<CategoryRecord> = read_jsonl(BufReader::new(f)).map_err(|e| load_err("categories", path, e))?;
    Ok(ImageAttributes::from_category_records(&records))
}

type Sink = mpsc::UnboundedSender<String>;

pub struct Service<S: LogStore> {
    hub: Mutex<Hub<S>>,
    conns: Mutex<HashMap<WorkerId, (u64, Sink)>>,
    broker: Arc<dyn JobBroker>,
    agents: Arc<HashMap<String, AgentHandle>>,
    images: ImageSource,
    next_conn: AtomicU64,
}

impl<S: LogStore + 'static> Service<S> {
    /// Run `f` with exclusive access to the hub.
    pub fn with_hub<R>(&self, f: impl FnOnce(&mut Hub<S>) -> R) -> R {
        f(&mut self.hub.lock())
    }

    /// Apply a hub operation and emit its output while still holding the
    /// hub lock, so messages to one worker leave in hub order.
    fn drive(&self, f: impl FnOnce(&mut Hub<S>) -> Vec<Outbound>) {
        let mut hub = self.hub.lock();
        let out = f(&mut hub);
        self.emit(out);
    }

    fn emit(&self, out: Vec<Outbound>) {
        if out.is_empty() {
            return;
        }
        let conns = self.conns.lock();
        for o in out {
            match o {
                Outbound::Client { worker, envelope } => {
                    if let Some((_, sink)) = conns.get(&worker) {
                        let text = serde_json::to_string(&envelope).expect("envelopes serialize");
                        // A closed socket is noticed by its reader; the
                        // snapshot on resume covers anything lost here.
                        let _ = sink.send(text);
                    }
                }
                Outbound::Dispatch(job) => self.broker.submit(job),
            }
        }
    }

    pub fn complete_job(&self, c: Completion) {
        let mut hub = self.hub.lock();
        match hub.complete_inference_job(c.job_id, c.attempt, c.outcome, now_ms()) {
            Ok(out) => self.emit(out),
            Err(e) => tracing::warn!(error = %e, "completion ignored"),
        }
    }

    pub fn tick(&self) {
        self.drive(|hub| hub.tick(now_ms()));
    }

    fn bind(&self, worker: &WorkerId, conn: u64, sink: &Sink) {
        let previous = self.conns.lock().insert(worker.clone(), (conn, sink.clone()));
        if previous.is_some_and(|(c, _)| c != conn) {
            tracing::info!(worker = %worker, "connection replaced");
        }
    }

    fn unbind(&self, worker: &WorkerId, conn: u64) {
        let mut hub = self.hub.lock();
        let mut conns = self.conns.lock();
        if conns.get(worker).is_some_and(|(c, _)| *c == conn) {
            conns.remove(worker);
            drop(conns);
            hub.disconnect(worker, now_ms());
        }
    }

    async fn handle_socket(self: Arc<Self>, socket: WebSocket) {
        let conn = self.next_conn.fetch_add(1, Ordering::Relaxed);
        let (mut ws_tx, mut ws_rx) = socket.split();
        let (tx, mut rx) = mpsc::unbounded_channel::<String>();
        let writer = tokio::spawn(async move {
            while let Some(text) = rx.recv().await {
                if ws_tx.send(Message::Text(text.into())).await.is_err() {
                    break;
                }
            }
            let _ = ws_tx.close().await;
        });
        let mut bound: Option<WorkerId> = None;
        while let Some(Ok(frame)) = ws_rx.next().await {
            let text = match frame {
                Message::Text(t) => t.to_string(),
                Message::Close(_) => break,
                _ => continue,
            };
            let env = match parse_client(&text) {
                Ok(env) => env,
                Err(e) => {
                    let _ = tx.send(local_error(ErrorCode::SchemaError, e.to_string(), None));
                    continue;
                }
            };
            match &env.message {
                ClientMessage::JoinQueue { worker_id } | ClientMessage::Resume { worker_id, .. } => {
                    if bound.as_ref().is_some_and(|b| b != worker_id) {
                        let _ = tx.send(local_error(
                            ErrorCode::SchemaError,
                            "connection is bound to another worker".into(),
                            Some(env.seq),
                        ));
                        continue;
                    }
                    // Bind under the hub lock so no message for this worker
                    // slips between binding and routing.
                    let worker = worker_id.clone();
                    let mut hub = self.hub.lock();
                    self.bind(&worker, conn, &tx);
                    let out = hub.route_client_message(&worker, env, now_ms());
                    self.emit(out);
                    bound = Some(worker);
                }
                _ => match &bound {
                    Some(worker) => {
                        let worker = worker.clone();
                        self.drive(|hub| hub.route_client_message(&worker, env, now_ms()));
                    }
                    None => {
                        let _ = tx.send(local_error(
                            ErrorCode::NotJoined,
                            "send JoinQueue or Resume first".into(),
                            Some(env.seq),
                        ));
                    }
                },
            }
        }
        if let Some(worker) = bound {
            self.unbind(&worker, conn);
        }
        drop(tx);
        let _ = writer.await;
    }
}

/// Error for a connection that is not attached to any session; seq 0
/// marks it as outside the session sequence.
fn local_error(code: ErrorCode, message: String, ref_seq: Option<u64>) -> String {
    serde_json::to_string(&ServerEnvelope {
        session_id: None,
        seq: 0,
        message: ServerMessage::Error {
            code,
            message,
            ref_seq,
        },
    })
    .expect("envelopes serialize")
}

async fn ws_route<S: LogStore + 'static>(State(svc): State<Arc<Service<S>>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| svc.handle_socket(socket))
}

async fn image_route<S: LogStore + 'static>(
    State(svc): State<Arc<Service<S>>>,
    UrlPath(id): UrlPath<String>,
) -> Response {
    match svc.images.load(&id) {
        Some((mime, bytes)) => (
            [
                (header::CONTENT_TYPE, mime),
                (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
            ],
            Body::from(bytes),
        )
            .into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn health_route<S: LogStore + 'static>(State(svc): State<Arc<Service<S>>>) -> Response {
    let (active, queued, pending) = svc.with_hub(|h| (h.active_assignments(), h.queue_len(), h.pending_writes()));
    Json(serde_json::json!({
        "status": "ok",
        "active_assignments": active,
        "queued_workers": queued,
        "pending_writes": pending,
    }))
    .into_response()
}

/// Serves a configured in-process agent over the plain agent protocol, so
/// remote harnesses and the HTTP agent client can use it.
async fn agent_route<S: LogStore + 'static>(
    State(svc): State<Arc<Service<S>>>,
    UrlPath(condition): UrlPath<String>,
    Json(req): Json<AnswerRequest>,
) -> Response {
    let Some(AgentHandle::Local(agent)) = svc.agents.get(&condition).cloned() else {
        return (StatusCode::NOT_FOUND, format!("no local agent for {condition}")).into_response();
    };
    if let Err(e) = req.validate(u32::MAX) {
        return (StatusCode::BAD_REQUEST, e.to_string()).into_response();
    }
    match AgentHandle::Local(agent).answer(req).await {
        Ok(resp) => Json(resp).into_response(),
        Err(e) => (StatusCode::SERVICE_UNAVAILABLE, e.to_string()).into_response(),
    }
}

pub fn router<S: LogStore + 'static>(svc: Arc<Service<S>>) -> Router {
    Router::new()
        .route("/ws", get(ws_route::<S>))
        .route("/images/{id}", get(image_route::<S>))
        .route("/health", get(health_route::<S>))
        .route("/agents/{condition}/answer", post(agent_route::<S>))
        .with_state(svc)
}

pub struct ServiceHandle<S: LogStore + 'static> {
    pub addr: SocketAddr,
    pub service: Arc<Service<S>>,
    shutdown: Option<oneshot::Sender<()>>,
    tasks: Vec<JoinHandle<()>>,
}

impl<S: LogStore + 'static> ServiceHandle<S> {
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        for t in self.tasks.drain(..) {
            t.abort();
            let _ = t.await;
        }
    }

    /// Resolves when the server stops on its own.
    pub async fn wait(mut self) {
        if let Some(t) = self.tasks.first_mut() {
            let _ = t.await;
        }
    }
}

/// Bind, spawn the server, the broker, the completion loop and the clock.
pub async fn start<S: LogStore + 'static>(parts: ServiceParts<S>) -> Result<ServiceHandle<S>, ServiceError> {
    let mut hub = Hub::new(parts.hub_config.clone(), parts.pools, parts.store)?;
    hub.restore_condition_counts(&parts.prior_condition_counts);
    let agents = Arc::new(parts.agents);
    let (done_tx, mut done_rx) = mpsc::unbounded_channel::<Completion>();
    let broker: Arc<dyn JobBroker> = match parts.broker {
        Some(b) => b,
        None => Arc::new(InProcessBroker::spawn(
            parts.broker_workers,
            Arc::clone(&agents),
            Duration::from_millis(parts.hub_config.agent_deadline_ms),
            done_tx,
        )),
    };
    let svc = Arc::new(Service {
        hub: Mutex::new(hub),
        conns: Mutex::new(HashMap::new()),
        broker,
        agents,
        images: parts.images,
        next_conn: AtomicU64::new(1),
    });

    let listener = tokio::net::TcpListener::bind(&parts.bind)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: parts.bind.clone(),
            source,
        })?;
    let addr = listener.local_addr().map_err(|source| ServiceError::Bind {
        addr: parts.bind.clone(),
        source,
    })?;
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let app = router(Arc::clone(&svc));
    let server = tokio::spawn(async move {
        let result = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stop_rx.await;
            })
            .await;
        if let Err(e) = result {
            tracing::error!(error = %e, "server stopped");
        }
    });
    let completions = {
        let svc = Arc::clone(&svc);
        tokio::spawn(async move {
            while let Some(c) = done_rx.recv().await {
                svc.complete_job(c);
            }
        })
    };
    let clock = {
        let svc = Arc::clone(&svc);
        let period = Duration::from_millis(parts.tick_ms);
        tokio::spawn(async move {
            let mut every = tokio::time::interval(period);
            every.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                every.tick().await;
                svc.tick();
            }
        })
    };
    tracing::info!(%addr, "service listening");
    Ok(ServiceHandle {
        addr,
        service: svc,
        shutdown: Some(stop_tx),
        tasks: vec![server, completions, clock],
    })
}

/// Agents keyed by condition, built from specs.
pub fn build_agents(
    specs: &[(String, AgentSpec)],
    attributes: Arc<ImageAttributes>,
    timeout: Duration,
) -> Result<HashMap<String, AgentHandle>, ServiceError> {
    specs
        .iter()
        .map(|(name, spec)| {
            AgentHandle::build(spec, Arc::clone(&attributes), timeout)
                .map(|a| (name.clone(), a))
                .map_err(|source| ServiceError::Agent {
                    condition: name.clone(),
                    source,
                })
        })
        .collect()
}
