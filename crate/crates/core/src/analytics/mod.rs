//! Team-performance analytics over game logs.

mod error;
pub mod metrics;
pub mod ngram;
pub mod report;
pub mod stats;
pub mod survey;

pub use error::AnalyticsError;
pub use metrics::{coarse_round_rank, mean_rank, mean_reciprocal_rank};
pub use ngram::{question_ngram_distribution, tokenize, NgramNode, NgramTree};
pub use report::{build_report, Filters, RankSample, Report, ReportOptions};
pub use stats::{bootstrap_ci, mann_whitney_u, BootstrapCi, MannWhitney, MwMethod, EXACT_MAX_TOTAL};
pub use survey::{survey_aggregate, Dimension, SurveyRecord, SurveyResponse};
