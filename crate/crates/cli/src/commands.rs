use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use guesswhich_core::agents::{
    make_baseline_answerer, simulate_games, BaselineKind, ImageAttributes, QuestionerPolicy, SimulationSpec,
};
use guesswhich_core::analytics::report::{build_report, write_report, Filters, ReportOptions};
use guesswhich_core::analytics::SurveyRecord;
use guesswhich_core::embedding::CategoryRecord;
use guesswhich_core::log::{read_game_logs, read_jsonl, replay_record, write_jsonl, GameStatus};
use guesswhich_core::pool::{generate_pools, BaseRadius, GenPoolsOptions, AUTO_RADIUS_NEIGHBOR};
use guesswhich_core::synth::{self, CaptionRecord, SynthConfig};
use guesswhich_core::{seed, EmbeddingStore, GameConfig, GameLogRecord, PoolSpec};
use guesswhich_server::config::ServiceConfig;
use guesswhich_server::service::{start, ServiceParts};
use serde::Serialize;

use crate::args::{GenPoolsArgs, ReplayArgs, ReportArgs, ServeArgs, SimulateArgs, SynthArgs};
use crate::{fail, usage, Classify, Kind, Outcome};

fn log_resolved<T: Serialize>(command: &str, resolved: &T) {
    let json = serde_json::to_string(resolved).expect("settings serialize");
    tracing::info!(command, config = %json, "resolved configuration");
}

fn open(path: &Path) -> Outcome<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .or_fail(Kind::Data, &format!("cannot open {}", path.display()))
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).or_fail(Kind::Runtime, &format!("cannot create {}", dir.display()))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .or_fail(Kind::Runtime, &format!("cannot create {}", path.display()))
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Outcome {
    let mut w = create(path)?;
    write_jsonl(&mut w, items)
        .and_then(|_| w.flush())
        .or_fail(Kind::Runtime, &format!("cannot write {}", path.display()))
}

fn load_store(embeddings: &Path, categories: Option<&Path>) -> Outcome<EmbeddingStore> {
    let mut store = EmbeddingStore::load_embeddings(embeddings)
        .or_fail(Kind::Data, &format!("embeddings {}", embeddings.display()))?;
    if let Some(c) = categories {
        store
            .load_categories(c)
            .or_fail(Kind::Data, &format!("categories {}", c.display()))?;
    }
    Ok(store)
}

fn load_pools(path: &Path) -> Outcome<Vec<PoolSpec>> {
    let pools: Vec<PoolSpec> = read_jsonl(open(path)?).or_fail(Kind::Data, &format!("pools {}", path.display()))?;
    if pools.is_empty() {
        return Err(fail(Kind::Data, anyhow::anyhow!("pools {}: no pools", path.display())));
    }
    for p in &pools {
        p.validate().or_fail(Kind::Data, &format!("pools {}", path.display()))?;
    }
    Ok(pools)
}

fn load_logs(paths: &[PathBuf]) -> Outcome<Vec<GameLogRecord>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_game_logs(open(p)?).or_fail(Kind::Data, &format!("game logs {}", p.display()))?);
    }
    Ok(all)
}

fn parse_counts(text: &str) -> Outcome<Vec<usize>> {
    text.split(',')
        .map(|c| c.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(format!("--counts {text:?}: {e}")))
}

#[derive(Debug, Serialize)]
struct GenPoolsResolved<'a> {
    embeddings: &'a Path,
    categories: &'a Path,
    captions: Option<&'a Path>,
    pool_size: u32,
    shells: usize,
    base_radius: &'a str,
    counts: &'a [usize],
    seed: u64,
    out: &'a Path,
}

pub fn gen_pools(a: GenPoolsArgs) -> Outcome {
    let embeddings = a.embeddings.ok_or_else(|| usage("gen-pools needs --embeddings"))?;
    let categories = a.categories.ok_or_else(|| usage("gen-pools needs --categories"))?;
    let pool_size = a.pool_size.unwrap_or(20);
    let shells = a.shells.unwrap_or(3);
    let base_radius_text = a.base_radius.unwrap_or_else(|| "auto".into());
    let counts = parse_counts(a.counts.as_deref().unwrap_or("7,6,6"))?;
    let seed = a.seed.unwrap_or(0);
    let out = a.out.unwrap_or_else(|| "pools.jsonl".into());
    if counts.len() != shells {
        return Err(usage(format!("--counts lists {} shells, --shells is {shells}", counts.len())));
    }
    if counts.iter().sum::<usize>() + 1 != pool_size as usize {
        return Err(usage(format!(
            "--counts sum to {} distractors; a pool of {pool_size} needs {}",
            counts.iter().sum::<usize>(),
            pool_size.saturating_sub(1)
        )));
    }
    let base_radius = match base_radius_text.as_str() {
        "auto" => BaseRadius::Auto {
            neighbor: AUTO_RADIUS_NEIGHBOR,
        },
        r => match r.parse::<f64>() {
            Ok(v) if v.is_finite() && v > 0.0 => BaseRadius::Fixed(v),
            _ => return Err(usage(format!("--base-radius must be auto or a positive number, got {r:?}"))),
        },
    };
    log_resolved(
        "gen-pools",
        &GenPoolsResolved {
            embeddings: &embeddings,
            categories: &categories,
            captions: a.captions.as_deref(),
            pool_size,
            shells,
            base_radius: &base_radius_text,
            counts: &counts,
            seed,
            out: &out,
        },
    );

    let store = load_store(&embeddings, Some(&categories))?;
    let captions = match &a.captions {
        None => BTreeMap::new(),
        Some(p) => {
            let recs: Vec<CaptionRecord> =
                read_jsonl(open(p)?).or_fail(Kind::Data, &format!("captions {}", p.display()))?;
            recs.into_iter().map(|r| (r.id, r.caption)).collect()
        }
    };
    let generated = generate_pools(
        &store,
        &GenPoolsOptions {
            base_radius,
            counts_per_shell: counts,
            seed,
            captions,
        },
    )
    .or_fail(Kind::Data, "pool generation")?;
    for (cand, err) in &generated.skipped {
        tracing::warn!(category = %cand.category, secret = %cand.image_id, error = %err, "no pool for candidate");
    }
    if generated.pools.is_empty() {
        return Err(fail(Kind::Data, anyhow::anyhow!("no category could supply a pool")));
    }
    write_lines(&out, &generated.pools)?;
    tracing::info!(pools = generated.pools.len(), skipped = generated.skipped.len(), out = %out.display(), "pools written");
    Ok(())
}

fn load_attributes(embeddings: Option<&EmbeddingStore>, categories: Option<&Path>) -> Outcome<Option<ImageAttributes>> {
    if let Some(store) = embeddings.filter(|s| !s.categories().is_empty()) {
        return Ok(Some(ImageAttributes::from_categories(store)));
    }
    match categories {
        None => Ok(None),
        Some(p) => {
            let recs: Vec<CategoryRecord> =
                read_jsonl(open(p)?).or_fail(Kind::Data, &format!("categories {}", p.display()))?;
            Ok(Some(ImageAttributes::from_category_records(&recs)))
        }
    }
}

#[derive(Debug, Serialize)]
struct SimulateResolved<'a> {
    questioner: &'a QuestionerPolicy,
    answerer: &'a str,
    pools: &'a Path,
    embeddings: Option<&'a Path>,
    categories: Option<&'a Path>,
    flip_prob: f64,
    games: usize,
    games_per_assignment: u32,
    dialog_rounds: u32,
    seed: u64,
    out: &'a Path,
}

pub fn simulate(a: SimulateArgs) -> Outcome {
    let seed = a.seed.unwrap_or(0);
    let pools_path = a.pools.clone().unwrap_or_else(|| "pools.jsonl".into());
    let out = a.out.clone().unwrap_or_else(|| "games.jsonl".into());
    let games = a.games.unwrap_or(100);
    let games_per_assignment = a.games_per_assignment.unwrap_or(10);
    let dialog_rounds = a.dialog_rounds.unwrap_or(9);
    let flip_prob = a.flip_prob.unwrap_or(0.1);
    let answerer_name = a.answerer.clone().unwrap_or_else(|| "truthful".into());
    // Independent streams for the questioner and the answerer.
    let q_seed = seed::mix(seed, 1);
    let policy = match a.questioner.as_deref().unwrap_or("random") {
        "random" => QuestionerPolicy::RandomGuesser { seed: q_seed },
        "oracle" => QuestionerPolicy::EmbeddingOracle,
        "attribute" => QuestionerPolicy::AttributeFilter { seed: q_seed },
        "scripted" => {
            let path = a.questions.as_ref().ok_or_else(|| usage("--questioner scripted needs --questions"))?;
            let questions: Vec<String> = open(path)?
                .lines()
                .collect::<Result<Vec<_>, _>>()
                .or_fail(Kind::Data, &format!("questions {}", path.display()))?
                .into_iter()
                .filter(|l| !l.trim().is_empty())
                .collect();
            QuestionerPolicy::Scripted {
                questions,
                seed: q_seed,
            }
        }
        other => {
            return Err(usage(format!(
                "unknown --questioner {other:?} (random, oracle, attribute, scripted)"
            )))
        }
    };
    if policy == QuestionerPolicy::EmbeddingOracle && a.embeddings.is_none() {
        return Err(usage("--questioner oracle needs --embeddings"));
    }
    if matches!(policy, QuestionerPolicy::AttributeFilter { .. }) && a.categories.is_none() {
        return Err(usage("--questioner attribute needs --categories"));
    }
    log_resolved(
        "simulate",
        &SimulateResolved {
            questioner: &policy,
            answerer: &answerer_name,
            pools: &pools_path,
            embeddings: a.embeddings.as_deref(),
            categories: a.categories.as_deref(),
            flip_prob,
            games,
            games_per_assignment,
            dialog_rounds,
            seed,
            out: &out,
        },
    );

    let pools = load_pools(&pools_path)?;
    let store = match &a.embeddings {
        Some(e) => Some(load_store(e, a.categories.as_deref())?),
        None => None,
    };
    let attributes = load_attributes(store.as_ref(), a.categories.as_deref())?;
    let kind = match answerer_name.as_str() {
        "truthful" => BaselineKind::Truthful,
        "noisy" => BaselineKind::Noisy {
            flip_prob,
            seed: seed::mix(seed, 2),
        },
        "scripted" => {
            let table: HashMap<String, String> = match &a.answers {
                None => HashMap::new(),
                Some(p) => serde_json::from_reader(open(p)?).or_fail(Kind::Data, &format!("answers {}", p.display()))?,
            };
            BaselineKind::Scripted {
                table,
                default: a
                    .default_answer
                    .clone()
                    .unwrap_or_else(|| guesswhich_core::agents::DEFAULT_ANSWER.into()),
            }
        }
        other => return Err(usage(format!("unknown --answerer {other:?} (truthful, noisy, scripted)"))),
    };
    if matches!(kind, BaselineKind::Truthful | BaselineKind::Noisy { .. }) && attributes.is_none() {
        tracing::warn!("no --categories: the answerer knows no image attributes");
    }
    let answerer = make_baseline_answerer(kind, Arc::new(attributes.clone().unwrap_or_default()))
        .map_err(|e| usage(e.to_string()))?;
    let config = GameConfig {
        dialog_rounds,
        pool_size: pools[0].len() as u32,
        caption_guess_required: true,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    if pools.iter().any(|p| p.len() != pools[0].len()) {
        return Err(fail(Kind::Data, anyhow::anyhow!("pools differ in size")));
    }
    let records = simulate_games(&SimulationSpec {
        policy: &policy,
        answerer: answerer.as_ref(),
        pools: &pools,
        config,
        store: store.as_ref(),
        attributes: attributes.as_ref(),
        games,
        games_per_assignment,
        seed,
    })
    .or_fail(Kind::Runtime, "simulation")?;
    write_lines(&out, &records)?;
    let abandoned = records.iter().filter(|r| r.status == GameStatus::Abandoned).count();
    tracing::info!(games = records.len(), abandoned, out = %out.display(), "game logs written");
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportResolved<'a> {
    logs: &'a [PathBuf],
    embeddings: Option<&'a Path>,
    pools: Option<&'a Path>,
    surveys: Option<&'a Path>,
    options: &'a ReportOptions,
    out: &'a Path,
}

/// Every log must describe the pool it names exactly as the pool file does.
fn check_against_pools(logs: &[GameLogRecord], pools: &[PoolSpec]) -> Outcome {
    let by_id: HashMap<&str, &PoolSpec> = pools.iter().map(|p| (p.pool_id.as_str(), p)).collect();
    for r in logs {
        let Some(p) = by_id.get(r.pool_id.as_str()) else {
            return Err(fail(
                Kind::Data,
                anyhow::anyhow!("game {} uses pool {} which is not in the pool file", r.session_id, r.pool_id),
            ));
        };
        if p.secret_id != r.secret_id || p.image_ids != r.pool_image_ids {
            return Err(fail(
                Kind::Data,
                anyhow::anyhow!("game {} disagrees with the pool file on pool {}", r.session_id, r.pool_id),
            ));
        }
    }
    Ok(())
}

pub fn report(a: ReportArgs) -> Outcome {
    let logs_paths = if a.logs.is_empty() { vec![PathBuf::from("games.jsonl")] } else { a.logs.clone() };
    let out = a.out.clone().unwrap_or_else(|| "report".into());
    let opts = ReportOptions {
        filters: Filters {
            include_abandoned: a.include_abandoned.unwrap_or(false),
            include_fallback: a.include_fallback.unwrap_or(false),
        },
        seed: a.seed.unwrap_or(0),
        resamples: a.resamples.unwrap_or(1000),
        level: a.level.unwrap_or(0.95),
        ngram_depth: a.ngram_depth.unwrap_or(3),
    };
    if opts.resamples == 0 || !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(usage("--resamples must be positive and --level in (0, 1)"));
    }
    log_resolved(
        "report",
        &ReportResolved {
            logs: &logs_paths,
            embeddings: a.embeddings.as_deref(),
            pools: a.pools.as_deref(),
            surveys: a.surveys.as_deref(),
            options: &opts,
            out: &out,
        },
    );
    let logs = load_logs(&logs_paths)?;
    if let Some(p) = &a.pools {
        check_against_pools(&logs, &load_pools(p)?)?;
    }
    let store = match &a.embeddings {
        Some(e) => Some(load_store(e, None)?),
        None => None,
    };
    let surveys: Vec<SurveyRecord> = match &a.surveys {
        Some(p) => read_jsonl(open(p)?).or_fail(Kind::Data, &format!("surveys {}", p.display()))?,
        None => Vec::new(),
    };
    let report = build_report(&logs, store.as_ref(), &surveys, &opts).or_fail(Kind::Data, "report")?;
    write_report(&report, &out).or_fail(Kind::Runtime, &format!("cannot write report to {}", out.display()))?;
    for w in &report.warnings {
        tracing::warn!("{w}");
    }
    let stdout = std::io::stdout();
    let mut so = stdout.lock();
    let _ = writeln!(
        so,
        "games: {} total, {} included ({} abandoned, {} fallback excluded)",
        report.games_total, report.games_included, report.excluded_abandoned, report.excluded_fallback
    );
    let interval = |ci: &Option<guesswhich_core::analytics::BootstrapCi>| match ci {
        Some(ci) => format!("[{:.4}, {:.4}]", ci.lo, ci.hi),
        None => "[n/a]".to_owned(),
    };
    for c in report.conditions.iter().chain(report.random_baseline.as_ref()) {
        let _ = writeln!(
            so,
            "{:<32} n={:<6} MR={:.3} {}  MRR={:.4} {}",
            c.condition,
            c.n,
            c.mr,
            interval(&c.mr_ci),
            c.mrr,
            interval(&c.mrr_ci)
        );
    }
    tracing::info!(out = %out.display(), "report written");
    Ok(())
}

pub fn replay(a: ReplayArgs) -> Outcome {
    log_resolved("replay", &a);
    let mut checked = 0usize;
    let mut failures = Vec::new();
    for path in &a.logs {
        let records = read_game_logs(open(path)?).or_fail(Kind::Data, &format!("game logs {}", path.display()))?;
        for r in &records {
            checked += 1;
            match replay_record(r) {
                Ok(s) => {
                    if a.verbose {
                        println!("ok {} status={:?} rank={:?}", r.session_id, r.status, s.induced_rank);
                    }
                }
                Err(e) => {
                    println!("FAIL {} {e}", r.session_id);
                    failures.push(format!("{}: {e}", r.session_id));
                }
            }
        }
    }
    println!("{checked} games checked, {} failed", failures.len());
    if let Some(first) = failures.first() {
        return Err(fail(
            Kind::Data,
            anyhow::anyhow!("{} of {checked} games failed verification; first: {first}", failures.len()),
        ));
    }
    Ok(())
}

pub fn synth_data(a: SynthArgs) -> Outcome {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        categories: a.categories.unwrap_or(defaults.categories),
        images_per_category: a.images_per_category.unwrap_or(defaults.images_per_category),
        dim: a.dim.unwrap_or(defaults.dim),
        seed: a.seed.unwrap_or(defaults.seed),
        ..defaults
    };
    let out = a.out.unwrap_or_else(|| "data".into());
    log_resolved("synth-data", &serde_json::json!({ "synth": &cfg, "out": &out }));
    let data = synth::generate(&cfg).map_err(|e| usage(e.to_string()))?;
    let mut w = create(&out.join("embeddings.jsonl"))?;
    data.store
        .write_embeddings(&mut w)
        .and_then(|_| w.flush())
        .or_fail(Kind::Runtime, "cannot write embeddings")?;
    let mut w = create(&out.join("categories.jsonl"))?;
    data.store
        .write_categories(&mut w)
        .and_then(|_| w.flush())
        .or_fail(Kind::Runtime, "cannot write categories")?;
    let captions: Vec<CaptionRecord> = data
        .captions
        .into_iter()
        .map(|(id, caption)| CaptionRecord { id, caption })
        .collect();
    write_lines(&out.join("captions.jsonl"), &captions)?;
    tracing::info!(images = data.store.len(), out = %out.display(), "synthetic dataset written");
    Ok(())
}

pub fn serve(a: ServeArgs, file: toml::Table) -> Outcome {
    let mut cfg: ServiceConfig = toml::Value::Table(file)
        .try_into()
        .map_err(|e: toml::de::Error| usage(format!("service config: {e}")))?;
    cfg.apply_env(std::env::vars()).map_err(|e| usage(e.to_string()))?;
    if let Some(v) = a.bind {
        cfg.bind = v;
    }
    if let Some(v) = a.pools {
        cfg.pools = v;
    }
    if let Some(v) = a.log_dir {
        cfg.log_dir = v;
    }
    if a.categories.is_some() {
        cfg.categories = a.categories;
    }
    if a.embeddings.is_some() {
        cfg.embeddings = a.embeddings;
    }
    if a.images_dir.is_some() {
        cfg.images_dir = a.images_dir;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    log_resolved("serve", &cfg);

    let runtime = tokio::runtime::Runtime::new().or_fail(Kind::Runtime, "cannot start async runtime")?;
    runtime.block_on(async {
        let parts = ServiceParts::from_config(&cfg).or_fail(Kind::Data, "service setup")?;
        let handle = start(parts).await.or_fail(Kind::Runtime, "service start")?;
        println!("listening on {}", handle.addr);
        tokio::select! {
            r = tokio::signal::ctrl_c() => {
                r.or_fail(Kind::Runtime, "signal handler")?;
                tracing::info!("shutting down");
                handle.shutdown().await;
                Ok(())
            }
            () = wait_forever_on(&handle) => Err(fail(Kind::Runtime, anyhow::anyhow!("server stopped unexpectedly"))),
        }
    })
}

async fn wait_forever_on<S: guesswhich_server::LogStore + 'static>(
    _handle: &guesswhich_server::service::ServiceHandle<S>,
) {
    std::future::pending::<()>().await
}
