//! Aggregate report over a set of game logs.
//!
//! Every number in a [`Report`] is a pure function of the input logs, the
//! optional embeddings and surveys, the filters and the seed. Random
//! baselines are simulated over the same pools as the included games.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::metrics::{coarse_round_rank, mean_rank, mean_reciprocal_rank};
use super::ngram::{question_ngram_distribution, NgramTree};
use super::stats::{bootstrap_ci, mann_whitney_u, BootstrapCi, MwMethod};
use super::survey::{survey_aggregate, DimensionSummary, SurveyRecord};
use super::AnalyticsError;
use crate::embedding::EmbeddingStore;
use crate::ids::ImageId;
use crate::log::{replay_record, GameLogRecord, GameStatus};
use crate::seed;

pub const RANDOM_BASELINE: &str = "random-baseline";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Filters {
    pub include_abandoned: bool,
    pub include_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub filters: Filters,
    pub seed: u64,
    pub resamples: usize,
    pub level: f64,
    pub ngram_depth: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            filters: Filters::default(),
            seed: 0,
            resamples: 1000,
            level: 0.95,
            ngram_depth: 3,
        }
    }
}

/// The rank data of one included game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSample {
    pub condition: String,
    pub game_index: u32,
    pub rank: u32,
    /// Caption guess (when made) followed by the per-round guesses.
    pub round_guesses: Vec<ImageId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub n: usize,
    pub mr: f64,
    pub mr_ci: Option<BootstrapCi>,
    pub mrr: f64,
    pub mrr_ci: Option<BootstrapCi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub series: String,
    /// Game index (1-based) or dialog round (0 = caption guess).
    pub x: u32,
    pub n: usize,
    pub mean: f64,
    pub ci: Option<BootstrapCi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub u_a: f64,
    pub u_b: f64,
    pub p_two_sided: f64,
    pub method: MwMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub filters: Filters,
    /// How every interval in the report was computed.
    pub interval_method: String,
    pub games_total: usize,
    pub games_included: usize,
    pub excluded_abandoned: usize,
    pub excluded_fallback: usize,
    pub conditions: Vec<ConditionSummary>,
    pub random_baseline: Option<ConditionSummary>,
    pub mr_by_game: Vec<SeriesPoint>,
    pub coarse_mr_by_round: Option<Vec<SeriesPoint>>,
    pub pairwise: Vec<PairwiseTest>,
    pub survey: Option<BTreeMap<String, Vec<DimensionSummary>>>,
    pub question_ngrams: NgramTree,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn condition(&self, name: &str) -> Option<&ConditionSummary> {
        self.conditions.iter().find(|c| c.condition == name)
    }
}

// Seed streams for the independent random draws in a report.
const STREAM_CI: u64 = 1;
const STREAM_BASELINE_FINAL: u64 = 2;
const STREAM_BASELINE_ROUND: u64 = 3;
const STREAM_SURVEY: u64 = 4;

struct Ctx<'a> {
    opts: &'a ReportOptions,
    ci_counter: u64,
}

impl Ctx<'_> {
    fn ci(&mut self, values: &[f64]) -> Result<Option<BootstrapCi>, AnalyticsError> {
        if values.len() < 2 {
            return Ok(None);
        }
        self.ci_counter += 1;
        let s = seed::mix(seed::mix(self.opts.seed, STREAM_CI), self.ci_counter);
        bootstrap_ci(values, self.opts.resamples, self.opts.level, s).map(Some)
    }

    fn summarize(&mut self, condition: &str, ranks: &[u32]) -> Result<ConditionSummary, AnalyticsError> {
        let as_f64: Vec<f64> = ranks.iter().map(|&r| f64::from(r)).collect();
        let recip: Vec<f64> = ranks.iter().map(|&r| 1.0 / f64::from(r)).collect();
        Ok(ConditionSummary {
            condition: condition.to_owned(),
            n: ranks.len(),
            mr: mean_rank(ranks)?,
            mr_ci: self.ci(&as_f64)?,
            mrr: mean_reciprocal_rank(ranks)?,
            mrr_ci: self.ci(&recip)?,
        })
    }

    fn series(
        &mut self,
        name: &str,
        groups: BTreeMap<u32, Vec<f64>>,
        out: &mut Vec<SeriesPoint>,
    ) -> Result<(), AnalyticsError> {
        for (x, values) in groups {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            out.push(SeriesPoint {
                series: name.to_owned(),
                x,
                n: values.len(),
                mean,
                ci: self.ci(&values)?,
            });
        }
        Ok(())
    }
}

/// Build the report. Logs are replayed first; any record whose events do
/// not reproduce its stored outcome is a schema error.
pub fn build_report(
    logs: &[GameLogRecord],
    embeddings: Option<&EmbeddingStore>,
    surveys: &[SurveyRecord],
    opts: &ReportOptions,
) -> Result<Report, AnalyticsError> {
    for r in logs {
        replay_record(r).map_err(|e| AnalyticsError::SchemaError {
            session_id: r.session_id.clone(),
            message: e.to_string(),
        })?;
    }
    let mut warnings = Vec::new();
    let mut excluded_abandoned = 0;
    let mut excluded_fallback = 0;
    let included: Vec<&GameLogRecord> = logs
        .iter()
        .filter(|r| {
            if r.status == GameStatus::Abandoned && !opts.filters.include_abandoned {
                excluded_abandoned += 1;
                return false;
            }
            if r.is_fallback_contaminated() && !opts.filters.include_fallback {
                excluded_fallback += 1;
                return false;
            }
            true
        })
        .collect();
    let ranked: Vec<&GameLogRecord> = included.iter().copied().filter(|r| r.induced_rank.is_some()).collect();
    let samples: Vec<RankSample> = ranked
        .iter()
        .map(|r| RankSample {
            condition: r.condition.clone(),
            game_index: r.game_index,
            rank: r.induced_rank.expect("filtered on rank"),
            round_guesses: r.round_guesses(),
        })
        .collect();

    let mut by_condition: BTreeMap<&str, Vec<&RankSample>> = BTreeMap::new();
    for s in &samples {
        by_condition.entry(&s.condition).or_default().push(s);
    }

    let mut ctx = Ctx { opts, ci_counter: 0 };
    let mut conditions = Vec::new();
    let mut mr_by_game = Vec::new();
    for (name, group) in &by_condition {
        let ranks: Vec<u32> = group.iter().map(|s| s.rank).collect();
        conditions.push(ctx.summarize(name, &ranks)?);
        let mut per_game: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for s in group {
            per_game.entry(s.game_index).or_default().push(f64::from(s.rank));
        }
        ctx.series(name, per_game, &mut mr_by_game)?;
    }

    // Random final guessing over the same pools: the secret lands at a
    // uniformly random position of a shuffled pool.
    let mut rng = seed::child_rng(opts.seed, STREAM_BASELINE_FINAL);
    let mut baseline_ranks = Vec::with_capacity(ranked.len());
    let mut baseline_per_game: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for r in &ranked {
        let mut order = r.pool_image_ids.clone();
        order.shuffle(&mut rng);
        let rank = order.iter().position(|id| *id == r.secret_id).expect("secret in pool") as u32 + 1;
        baseline_ranks.push(rank);
        baseline_per_game.entry(r.game_index).or_default().push(f64::from(rank));
    }
    let random_baseline = if baseline_ranks.is_empty() {
        None
    } else {
        Some(ctx.summarize(RANDOM_BASELINE, &baseline_ranks)?)
    };
    ctx.series(RANDOM_BASELINE, baseline_per_game, &mut mr_by_game)?;

    let coarse_mr_by_round = match embeddings {
        None => {
            warnings.push("no embeddings supplied; coarse per-round rank series omitted".to_owned());
            None
        }
        Some(store) => Some(coarse_series(&ranked, store, opts, &mut ctx)?),
    };

    let mut pairwise = Vec::new();
    let names: Vec<&str> = by_condition.keys().copied().collect();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let ra: Vec<f64> = by_condition[a].iter().map(|s| f64::from(s.rank)).collect();
            let rb: Vec<f64> = by_condition[b].iter().map(|s| f64::from(s.rank)).collect();
            let mw = mann_whitney_u(&ra, &rb)?;
            pairwise.push(PairwiseTest {
                a: (*a).to_owned(),
                b: (*b).to_owned(),
                n_a: ra.len(),
                n_b: rb.len(),
                u_a: mw.u_a,
                u_b: mw.u_b,
                p_two_sided: mw.p_two_sided,
                method: mw.method,
            });
        }
    }

    let survey = if surveys.is_empty() {
        None
    } else {
        let pairs: Vec<(String, _)> = surveys.iter().map(|s| (s.condition.clone(), s.ratings)).collect();
        Some(survey_aggregate(
            &pairs,
            opts.resamples,
            opts.level,
            seed::mix(opts.seed, STREAM_SURVEY),
        )?)
    };

    let questions: Vec<&str> = included.iter().flat_map(|r| r.questions()).collect();
    let question_ngrams = question_ngram_distribution(&questions, opts.ngram_depth)?;

    if samples.is_empty() {
        warnings.push("no completed games after filtering".to_owned());
    }

    Ok(Report {
        seed: opts.seed,
        filters: opts.filters,
        interval_method: format!(
            "{:.0}% percentile bootstrap of the mean, {} resamples",
            opts.level * 100.0,
            opts.resamples
        ),
        games_total: logs.len(),
        games_included: included.len(),
        excluded_abandoned,
        excluded_fallback,
        conditions,
        random_baseline,
        mr_by_game,
        coarse_mr_by_round,
        pairwise,
        survey,
        question_ngrams,
        warnings,
    })
}

/// Coarse rank of the secret after every round, averaged per game with
/// equal weight, plus a random-guess baseline over the same pools.
fn coarse_series(
    ranked: &[&GameLogRecord],
    store: &EmbeddingStore,
    opts: &ReportOptions,
    ctx: &mut Ctx<'_>,
) -> Result<Vec<SeriesPoint>, AnalyticsError> {
    let mut by_condition: BTreeMap<&str, BTreeMap<u32, Vec<f64>>> = BTreeMap::new();
    let mut baseline: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut rng = seed::child_rng(opts.seed, STREAM_BASELINE_ROUND);
    for r in ranked {
        let pool = r.pool();
        let guesses = r.round_guesses();
        // Round 0 is the caption guess when the game had one.
        let first_round = if r.config.caption_guess_required { 0 } else { 1 };
        for (i, g) in guesses.iter().enumerate() {
            let round = first_round + i as u32;
            let rank = coarse_round_rank(store, &pool, g, &r.secret_id)?;
            by_condition
                .entry(&r.condition)
                .or_default()
                .entry(round)
                .or_default()
                .push(f64::from(rank));
            let random_guess = pool.image_ids.choose(&mut rng).expect("pool is non-empty");
            let rank = coarse_round_rank(store, &pool, random_guess, &r.secret_id)?;
            baseline.entry(round).or_default().push(f64::from(rank));
        }
    }
    let mut out = Vec::new();
    for (name, groups) in by_condition {
        ctx.series(name, groups, &mut out)?;
    }
    ctx.series(RANDOM_BASELINE, baseline, &mut out)?;
    Ok(out)
}

fn fmt_ci(ci: &Option<BootstrapCi>) -> (String, String) {
    match ci {
        Some(c) => (c.lo.to_string(), c.hi.to_string()),
        None => (String::new(), String::new()),
    }
}

/// Write `report.json` plus one CSV table per figure series into `dir`.
pub fn write_report(report: &Report, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(report)?)?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["condition", "n", "mr", "mr_lo", "mr_hi", "mrr", "mrr_lo", "mrr_hi"])?;
    for c in report.conditions.iter().chain(report.random_baseline.as_ref()) {
        let (mr_lo, mr_hi) = fmt_ci(&c.mr_ci);
        let (mrr_lo, mrr_hi) = fmt_ci(&c.mrr_ci);
        w.write_record([
            c.condition.clone(),
            c.n.to_string(),
            c.mr.to_string(),
            mr_lo,
            mr_hi,
            c.mrr.to_string(),
            mrr_lo,
            mrr_hi,
        ])?;
    }
    w.flush()?;

    let write_series = |name: &str, x_label: &str, points: &[SeriesPoint]| -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(dir.join(name))?;
        w.write_record(["series", x_label, "n", "mean_rank", "lo", "hi"])?;
        for p in points {
            let (lo, hi) = fmt_ci(&p.ci);
            w.write_record([p.series.clone(), p.x.to_string(), p.n.to_string(), p.mean.to_string(), lo, hi])?;
        }
        w.flush()
    };
    write_series("mr_by_game.csv", "game_index", &report.mr_by_game)?;
    if let Some(points) = &report.coarse_mr_by_round {
        write_series("coarse_mr_by_round.csv", "round", points)?;
    }

    let mut w = csv::Writer::from_path(dir.join("pairwise.csv"))?;
    w.write_record(["a", "b", "n_a", "n_b", "u_a", "u_b", "p_two_sided", "method"])?;
    for t in &report.pairwise {
        w.write_record([
            t.a.clone(),
            t.b.clone(),
            t.n_a.to_string(),
            t.n_b.to_string(),
            t.u_a.to_string(),
            t.u_b.to_string(),
            t.p_two_sided.to_string(),
            format!("{:?}", t.method).to_lowercase(),
        ])?;
    }
    w.flush()?;

    if let Some(survey) = &report.survey {
        let mut w = csv::Writer::from_path(dir.join("survey.csv"))?;
        w.write_record(["condition", "dimension", "n", "mean", "lo", "hi"])?;
        for (condition, dims) in survey {
            for d in dims {
                let (lo, hi) = fmt_ci(&d.ci);
                w.write_record([
                    condition.clone(),
                    d.dimension.as_str().to_owned(),
                    d.n.to_string(),
                    d.mean.to_string(),
                    lo,
                    hi,
                ])?;
            }
        }
        w.flush()?;
    }

    let mut w = csv::Writer::from_path(dir.join("question_ngrams.csv"))?;
    w.write_record(["prefix", "depth", "count"])?;
    for (prefix, count) in report.question_ngrams.rows() {
        w.write_record([prefix.join(" "), prefix.len().to_string(), count.to_string()])?;
    }
    w.flush()
}
