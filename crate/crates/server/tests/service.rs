mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{pools, Bot};
use guesswhich_core::agents::{AgentError, AnswerRequest, AnswerResponse, Answerer, PROTOCOL_VERSION};
use guesswhich_core::log::{replay_record, GameStatus, SCHEMA_VERSION};
use guesswhich_core::{GameConfig, GameLogRecord, WorkerId};
use guesswhich_server::agent::AgentHandle;
use guesswhich_server::service::{start, ImageSource, ServiceParts};
use guesswhich_server::{HubConfig, MemoryStore};

/// Answers "yes"; every `slow_every`-th call sleeps past the deadline.
struct FlakyAgent {
    calls: AtomicU64,
    slow_every: u64,
    sleep: Duration,
}

impl Answerer for FlakyAgent {
    fn name(&self) -> &str {
        "flaky"
    }

    fn answer(&self, req: &AnswerRequest) -> Result<AnswerResponse, AgentError> {
        let n = self.calls.fetch_add(1, Ordering::Relaxed) + 1;
        if self.slow_every > 0 && n.is_multiple_of(self.slow_every) {
            std::thread::sleep(self.sleep);
        }
        Ok(AnswerResponse {
            protocol_version: PROTOCOL_VERSION,
            session_id: req.session_id.clone(),
            answer: "yes".into(),
            latency_ms: 0,
        })
    }
}

fn parts(conditions: &[&str], games: u32, slow_every: u64) -> ServiceParts<MemoryStore> {
    let hub_config = HubConfig {
        game: GameConfig::default(),
        games_per_assignment: games,
        conditions: conditions.iter().map(|c| c.to_string()).collect(),
        agent_deadline_ms: 150,
        resume_window_ms: 30_000,
        ..HubConfig::default()
    };
    let mut agents = HashMap::new();
    for c in conditions {
        let agent: Arc<dyn Answerer> = Arc::new(FlakyAgent {
            calls: AtomicU64::new(0),
            slow_every,
            sleep: Duration::from_millis(400),
        });
        agents.insert(c.to_string(), AgentHandle::Local(agent));
    }
    ServiceParts {
        hub_config,
        pools: pools(games as usize, 20),
        store: MemoryStore::new(),
        agents,
        images: ImageSource {
            dir: None,
            placeholder: true,
        },
        bind: "127.0.0.1:0".into(),
        broker_workers: 16,
        tick_ms: 20,
        broker: None,
        prior_condition_counts: BTreeMap::new(),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_with_faults() {
    let started = Instant::now();
    let handle = start(parts(&["a", "b", "c"], 2, 9)).await.unwrap();
    let addr = handle.addr;
    let mut tasks = Vec::new();
    for i in 0..100u64 {
        let bot = Bot::new(format!("ws-{i:03}"), i);
        // A third of the clients drop their connection once mid-assignment.
        let drop_after = (i % 3 == 0).then_some(5 + (i as usize * 7) % 40);
        tasks.push(tokio::spawn(common::ws::play(addr, bot, drop_after, Duration::from_millis(50))));
    }
    let mut reconnects = 0;
    for t in tasks {
        let (bot, r) = tokio::time::timeout(Duration::from_secs(90), t).await.expect("client finished").unwrap();
        assert!(bot.complete, "{} ended with {:?}: {:?}", bot.worker, bot.ended_by, bot.errors);
        assert_eq!(bot.seq_gaps, 0, "{} saw a server seq gap", bot.worker);
        reconnects += r;
    }
    assert!(reconnects >= 30);
    let (games, surveys, counts) = handle.service.with_hub(|h| {
        (h.store().games.clone(), h.store().surveys.clone(), h.condition_counts().clone())
    });
    handle.shutdown().await;

    assert_eq!(games.len(), 200);
    assert_eq!(surveys.len(), 100);
    let mut assignments: BTreeMap<WorkerId, BTreeSet<String>> = BTreeMap::new();
    let mut retried = 0;
    for g in &games {
        assert_eq!(g.schema_version, SCHEMA_VERSION);
        assert_eq!(g.status, GameStatus::Complete);
        let text = serde_json::to_string(g).unwrap();
        let back: GameLogRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(replay_record(&back).unwrap().induced_rank, g.induced_rank);
        assignments.entry(g.worker_id.clone()).or_default().insert(g.assignment_id.clone().unwrap());
        retried += g.events.iter().filter_map(|e| e.delivery).filter(|d| d.attempts > 1).count();
    }
    assert!(retried > 0, "no answer needed a retry");
    assert!(assignments.values().all(|a| a.len() == 1));
    let c: Vec<u64> = counts.values().copied().collect();
    assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1, "{counts:?}");
    assert!(started.elapsed() < Duration::from_secs(120));
}

#[tokio::test]
async fn unbound_connection_and_bad_frames_get_errors() {
    use futures::{SinkExt, StreamExt};
    use tokio_tungstenite::tungstenite::Message;
    let handle = start(parts(&["a"], 1, 0)).await.unwrap();
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{}/ws", handle.addr)).await.unwrap();
    ws.send(Message::Text("{\"type\":\"Nope\",\"seq\":1,\"payload\":{}}".into())).await.unwrap();
    ws.send(Message::Text(
        "{\"type\":\"Question\",\"seq\":2,\"payload\":{\"text\":\"hi?\"}}".into(),
    ))
    .await
    .unwrap();
    let mut codes = Vec::new();
    while codes.len() < 2 {
        if let Some(Ok(Message::Text(t))) = ws.next().await {
            let v: serde_json::Value = serde_json::from_str(&t).unwrap();
            assert_eq!(v["type"], "Error");
            codes.push(v["payload"]["code"].as_str().unwrap().to_owned());
        }
    }
    assert_eq!(codes, ["schema_error", "not_joined"]);
    handle.shutdown().await;
}

#[tokio::test]
async fn image_and_health_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("p00-01.png"), b"\x89PNG fake").unwrap();
    let mut p = parts(&["a"], 1, 0);
    p.images = ImageSource {
        dir: Some(dir.path().to_path_buf()),
        placeholder: false,
    };
    let handle = start(p).await.unwrap();
    let base = format!("http://{}", handle.addr);
    let client = reqwest::Client::new();

    let resp = client.get(format!("{base}/images/p00-01")).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    assert_eq!(resp.headers()["content-type"], "image/png");
    assert_eq!(&resp.bytes().await.unwrap()[..], b"\x89PNG fake");
    let missing = client.get(format!("{base}/images/p00-02")).send().await.unwrap();
    assert_eq!(missing.status(), 404);
    let traversal = client.get(format!("{base}/images/..%2Fsecret")).send().await.unwrap();
    assert_eq!(traversal.status(), 404);

    let health: serde_json::Value = client.get(format!("{base}/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!(health["status"], "ok");
    handle.shutdown().await;
}

#[tokio::test]
async fn local_agents_are_served_over_http() {
    use guesswhich_core::agents::{QaPair, SecretImageRef};
    let handle = start(parts(&["a"], 1, 0)).await.unwrap();
    let url = format!("http://{}/agents/a/answer", handle.addr);
    let req = AnswerRequest {
        protocol_version: PROTOCOL_VERSION,
        session_id: "s-1".into(),
        caption: "a photo".into(),
        history: vec![QaPair {
            question: "is it red?".into(),
            answer: "no".into(),
        }],
        question: "is it blue?".into(),
        secret_image_ref: SecretImageRef::Id {
            image_id: "p00-00".into(),
        },
    };
    // The service's own HTTP agent client talks to it.
    let remote = guesswhich_server::agent::HttpAgent::new(url.clone(), Duration::from_secs(5)).unwrap();
    let resp = remote.answer(&req).await.unwrap();
    assert_eq!(resp.answer, "yes");
    assert_eq!(resp.session_id, req.session_id);

    let missing = guesswhich_server::agent::HttpAgent::new(
        format!("http://{}/agents/zzz/answer", handle.addr),
        Duration::from_secs(5),
    )
    .unwrap();
    assert!(matches!(missing.answer(&req).await, Err(AgentError::Unavailable(_))));
    handle.shutdown().await;
}
