//! Command-line definitions. Every option is optional at parse time so that
//! a value can come, in decreasing precedence, from the flag, its
//! `GUESSWHICH_*` environment variable, the `--config` file, or the
//! built-in default.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "guesswhich", version, about = "GuessWhich evaluation platform")]
pub struct Cli {
    /// TOML file: service settings at top level, `[gen-pools]`,
    /// `[simulate]`, `[report]` and `[synth-data]` tables for the other
    /// subcommands.
    #[arg(long, global = true, env = "GUESSWHICH_CONFIG")]
    pub config: Option<PathBuf>,

    /// Log filter, e.g. `info` or `guesswhich_server=debug`.
    #[arg(long, global = true, env = "GUESSWHICH_LOG", default_value = "info")]
    pub log: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the game service (websocket, images, agent endpoint).
    Serve(ServeArgs),
    /// Build game pools from embeddings and categories.
    GenPools(GenPoolsArgs),
    /// Play AI-AI games and write game logs.
    Simulate(SimulateArgs),
    /// Compute metrics, intervals, tests and series from game logs.
    Report(ReportArgs),
    /// Re-drive stored game logs and verify their recorded outcome.
    Replay(ReplayArgs),
    /// Write a seeded synthetic embedding/category/caption dataset.
    SynthData(SynthArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, env = "GUESSWHICH_BIND")]
    pub bind: Option<String>,
    #[arg(long, env = "GUESSWHICH_POOLS")]
    pub pools: Option<PathBuf>,
    #[arg(long, env = "GUESSWHICH_CATEGORIES")]
    pub categories: Option<PathBuf>,
    #[arg(long, env = "GUESSWHICH_EMBEDDINGS")]
    pub embeddings: Option<PathBuf>,
    #[arg(long, env = "GUESSWHICH_LOG_DIR")]
    pub log_dir: Option<PathBuf>,
    #[arg(long, env = "GUESSWHICH_IMAGES_DIR")]
    pub images_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct GenPoolsArgs {
    /// Embedding JSONL, one `{"id", "vector"}` per line.
    #[arg(long, env = "GUESSWHICH_EMBEDDINGS")]
    pub embeddings: Option<PathBuf>,
    /// Category JSONL, one `{"category", "members"}` per line.
    #[arg(long, env = "GUESSWHICH_CATEGORIES")]
    pub categories: Option<PathBuf>,
    /// Caption JSONL, one `{"id", "caption"}` per line.
    #[arg(long, env = "GUESSWHICH_CAPTIONS")]
    pub captions: Option<PathBuf>,
    /// Images per pool, secret included [default: 20].
    #[arg(long, env = "GUESSWHICH_POOL_SIZE")]
    pub pool_size: Option<u32>,
    /// Number of distance shells [default: 3].
    #[arg(long, env = "GUESSWHICH_SHELLS")]
    pub shells: Option<usize>,
    /// `auto` (distance to the 50th nearest neighbour) or a number.
    #[arg(long, env = "GUESSWHICH_BASE_RADIUS")]
    pub base_radius: Option<String>,
    /// Distractors per shell, comma separated [default: 7,6,6].
    #[arg(long, env = "GUESSWHICH_COUNTS")]
    pub counts: Option<String>,
    #[arg(long, env = "GUESSWHICH_SEED")]
    pub seed: Option<u64>,
    /// Output pool JSONL [default: pools.jsonl].
    #[arg(long, env = "GUESSWHICH_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct SimulateArgs {
    /// random, oracle, attribute or scripted [default: random].
    #[arg(long, env = "GUESSWHICH_QUESTIONER")]
    pub questioner: Option<String>,
    /// truthful, noisy or scripted [default: truthful].
    #[arg(long, env = "GUESSWHICH_ANSWERER")]
    pub answerer: Option<String>,
    /// Pool JSONL [default: pools.jsonl].
    #[arg(long, env = "GUESSWHICH_POOLS")]
    pub pools: Option<PathBuf>,
    /// Needed by the oracle questioner.
    #[arg(long, env = "GUESSWHICH_EMBEDDINGS")]
    pub embeddings: Option<PathBuf>,
    /// Image attributes for the truthful/noisy answerers and the attribute
    /// questioner.
    #[arg(long, env = "GUESSWHICH_CATEGORIES")]
    pub categories: Option<PathBuf>,
    /// Question list for the scripted questioner, one per line.
    #[arg(long, env = "GUESSWHICH_QUESTIONS")]
    pub questions: Option<PathBuf>,
    /// JSON object mapping questions to answers for the scripted answerer.
    #[arg(long, env = "GUESSWHICH_ANSWERS")]
    pub answers: Option<PathBuf>,
    /// Answer of the scripted answerer to unknown questions.
    #[arg(long, env = "GUESSWHICH_DEFAULT_ANSWER")]
    pub default_answer: Option<String>,
    /// Flip probability of the noisy answerer [default: 0.1].
    #[arg(long, env = "GUESSWHICH_FLIP_PROB")]
    pub flip_prob: Option<f64>,
    /// [default: 100]
    #[arg(long, env = "GUESSWHICH_GAMES")]
    pub games: Option<usize>,
    /// [default: 10]
    #[arg(long, env = "GUESSWHICH_GAMES_PER_ASSIGNMENT")]
    pub games_per_assignment: Option<u32>,
    /// [default: 9]
    #[arg(long, env = "GUESSWHICH_DIALOG_ROUNDS")]
    pub dialog_rounds: Option<u32>,
    #[arg(long, env = "GUESSWHICH_SEED")]
    pub seed: Option<u64>,
    /// Output game-log JSONL [default: games.jsonl].
    #[arg(long, env = "GUESSWHICH_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct ReportArgs {
    /// Game-log JSONL; repeat for several files [default: games.jsonl].
    #[arg(long, env = "GUESSWHICH_LOGS", value_delimiter = ',')]
    pub logs: Vec<PathBuf>,
    /// Enables coarse per-round ranks.
    #[arg(long, env = "GUESSWHICH_EMBEDDINGS")]
    pub embeddings: Option<PathBuf>,
    /// Pool definitions the logs must agree with.
    #[arg(long, env = "GUESSWHICH_POOLS")]
    pub pools: Option<PathBuf>,
    /// Survey record JSONL.
    #[arg(long, env = "GUESSWHICH_SURVEYS")]
    pub surveys: Option<PathBuf>,
    #[arg(long, env = "GUESSWHICH_SEED")]
    pub seed: Option<u64>,
    /// [default: 1000]
    #[arg(long, env = "GUESSWHICH_RESAMPLES")]
    pub resamples: Option<usize>,
    /// [default: 0.95]
    #[arg(long, env = "GUESSWHICH_LEVEL")]
    pub level: Option<f64>,
    /// [default: 3]
    #[arg(long, env = "GUESSWHICH_NGRAM_DEPTH")]
    pub ngram_depth: Option<usize>,
    #[arg(long, env = "GUESSWHICH_INCLUDE_ABANDONED", num_args = 0..=1, default_missing_value = "true")]
    pub include_abandoned: Option<bool>,
    #[arg(long, env = "GUESSWHICH_INCLUDE_FALLBACK", num_args = 0..=1, default_missing_value = "true")]
    pub include_fallback: Option<bool>,
    /// Output directory [default: report].
    #[arg(long, env = "GUESSWHICH_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReplayArgs {
    /// Game-log JSONL files.
    #[arg(required = true)]
    pub logs: Vec<PathBuf>,
    /// Print one line per verified game.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct SynthArgs {
    /// [default: 20]
    #[arg(long = "categories", env = "GUESSWHICH_SYNTH_CATEGORIES")]
    pub categories: Option<usize>,
    /// [default: 30]
    #[arg(long, env = "GUESSWHICH_IMAGES_PER_CATEGORY")]
    pub images_per_category: Option<usize>,
    /// [default: 8]
    #[arg(long, env = "GUESSWHICH_DIM")]
    pub dim: Option<usize>,
    #[arg(long, env = "GUESSWHICH_SEED")]
    pub seed: Option<u64>,
    /// Directory for embeddings.jsonl, categories.jsonl, captions.jsonl
    /// [default: data].
    #[arg(long, env = "GUESSWHICH_OUT")]
    pub out: Option<PathBuf>,
}

/// Fill every unset field of `self` from `file`.
pub trait Layer {
    fn under(self, file: Self) -> Self;
}

macro_rules! layer {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl Layer for $ty {
            fn under(self, file: Self) -> Self {
                Self { $($field: self.$field.or(file.$field)),* }
            }
        }
    };
}

layer!(GenPoolsArgs { embeddings, categories, captions, pool_size, shells, base_radius, counts, seed, out });
layer!(SimulateArgs {
    questioner, answerer, pools, embeddings, categories, questions, answers, default_answer, flip_prob, games,
    games_per_assignment, dialog_rounds, seed, out,
});
layer!(SynthArgs { categories, images_per_category, dim, seed, out });

impl Layer for ReportArgs {
    fn under(self, file: Self) -> Self {
        Self {
            logs: if self.logs.is_empty() { file.logs } else { self.logs },
            embeddings: self.embeddings.or(file.embeddings),
            pools: self.pools.or(file.pools),
            surveys: self.surveys.or(file.surveys),
            seed: self.seed.or(file.seed),
            resamples: self.resamples.or(file.resamples),
            level: self.level.or(file.level),
            ngram_depth: self.ngram_depth.or(file.ngram_depth),
            include_abandoned: self.include_abandoned.or(file.include_abandoned),
            include_fallback: self.include_fallback.or(file.include_fallback),
            out: self.out.or(file.out),
        }
    }
}
