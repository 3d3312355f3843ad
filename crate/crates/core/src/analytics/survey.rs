//! End-of-assignment perception survey: six 5-point ratings of the agent.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::stats::{bootstrap_ci, BootstrapCi};
use super::AnalyticsError;
use crate::ids::WorkerId;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Accuracy,
    Consistency,
    ImageUnderstanding,
    Detail,
    QuestionUnderstanding,
    Fluency,
}

impl Dimension {
    pub const ALL: [Dimension; 6] = [
        Dimension::Accuracy,
        Dimension::Consistency,
        Dimension::ImageUnderstanding,
        Dimension::Detail,
        Dimension::QuestionUnderstanding,
        Dimension::Fluency,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Dimension::Accuracy => "accuracy",
            Dimension::Consistency => "consistency",
            Dimension::ImageUnderstanding => "image_understanding",
            Dimension::Detail => "detail",
            Dimension::QuestionUnderstanding => "question_understanding",
            Dimension::Fluency => "fluency",
        }
    }
}

/// Ratings on a 1 (strongly disagree) to 5 (strongly agree) scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveyResponse {
    pub accuracy: u8,
    pub consistency: u8,
    pub image_understanding: u8,
    pub detail: u8,
    pub question_understanding: u8,
    pub fluency: u8,
}

impl SurveyResponse {
    pub fn uniform(rating: u8) -> Self {
        Self {
            accuracy: rating,
            consistency: rating,
            image_understanding: rating,
            detail: rating,
            question_understanding: rating,
            fluency: rating,
        }
    }

    pub fn get(&self, d: Dimension) -> u8 {
        match d {
            Dimension::Accuracy => self.accuracy,
            Dimension::Consistency => self.consistency,
            Dimension::ImageUnderstanding => self.image_understanding,
            Dimension::Detail => self.detail,
            Dimension::QuestionUnderstanding => self.question_understanding,
            Dimension::Fluency => self.fluency,
        }
    }

    pub fn validate(&self) -> Result<(), AnalyticsError> {
        for d in Dimension::ALL {
            let r = self.get(d);
            if !(1..=5).contains(&r) {
                return Err(AnalyticsError::InvalidRating(format!("{} = {r}, expected 1..=5", d.as_str())));
            }
        }
        Ok(())
    }
}

/// One persisted survey submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyRecord {
    pub schema_version: u32,
    pub assignment_id: String,
    pub worker_id: WorkerId,
    pub condition: String,
    pub ratings: SurveyResponse,
    pub submitted_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionSummary {
    pub dimension: Dimension,
    pub n: usize,
    pub mean: f64,
    /// Absent when fewer than two responses exist.
    pub ci: Option<BootstrapCi>,
}

/// Per-condition, per-dimension mean rating with a bootstrap interval.
pub fn survey_aggregate(
    responses: &[(String, SurveyResponse)],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<BTreeMap<String, Vec<DimensionSummary>>, AnalyticsError> {
    if responses.is_empty() {
        return Err(AnalyticsError::EmptyInput);
    }
    let mut grouped: BTreeMap<&str, Vec<&SurveyResponse>> = BTreeMap::new();
    for (condition, r) in responses {
        r.validate()?;
        grouped.entry(condition).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (ci_idx, (condition, rs)) in grouped.into_iter().enumerate() {
        let mut dims = Vec::with_capacity(6);
        for (d_idx, d) in Dimension::ALL.into_iter().enumerate() {
            let values: Vec<f64> = rs.iter().map(|r| f64::from(r.get(d))).collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let ci = if values.len() >= 2 {
                let s = seed::mix(seed, (ci_idx * 16 + d_idx) as u64);
                Some(bootstrap_ci(&values, resamples, level, s)?)
            } else {
                None
            };
            dims.push(DimensionSummary {
                dimension: d,
                n: values.len(),
                mean,
                ci,
            });
        }
        out.insert(condition.to_owned(), dims);
    }
    Ok(out)
}
