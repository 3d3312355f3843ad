use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attributes::{parse_binary_question, ImageAttributes};
use super::protocol::AgentError;
use crate::embedding::{euclidean, EmbeddingStore};
use crate::game::{GameConfig, PoolSpec};
use crate::ids::ImageId;
use crate::seed;

/// Questions asked by policies that have no strategy of their own.
pub const GENERIC_QUESTIONS: &[&str] = &[
    "is there a person?",
    "is it indoors?",
    "what color is the main object?",
    "is there an animal?",
    "how many people are there?",
    "is it daytime?",
    "is there a vehicle?",
    "what is in the background?",
    "is there any food?",
];

/// A simulated questioner for one game. The runner calls the methods in
/// game order: caption guess, then per round question / answer / guess,
/// then a full ranking of the pool for the final phase.
pub trait Questioner {
    fn caption_guess(&mut self) -> ImageId;
    fn next_question(&mut self, round: u32) -> String;
    fn observe_answer(&mut self, question: &str, answer: &str);
    fn round_guess(&mut self, round: u32) -> ImageId;
    /// Every pool image, most likely secret first.
    fn final_ranking(&mut self) -> Vec<ImageId>;
}

/// Description of a questioner; instantiated once per game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuestionerPolicy {
    /// Fixed question list; guesses uniformly at random.
    Scripted { questions: Vec<String>, seed: u64 },
    /// Generic questions; uniformly random round guesses and final order.
    RandomGuesser { seed: u64 },
    /// Knows the secret's embedding and ranks the pool by true distance.
    EmbeddingOracle,
    /// Asks about image attributes and keeps the images consistent with
    /// the answers; a stand-in for a reasonable human strategy.
    AttributeFilter { seed: u64 },
}

impl QuestionerPolicy {
    pub fn label(&self) -> &'static str {
        match self {
            QuestionerPolicy::Scripted { .. } => "scripted",
            QuestionerPolicy::RandomGuesser { .. } => "random",
            QuestionerPolicy::EmbeddingOracle => "oracle",
            QuestionerPolicy::AttributeFilter { .. } => "attribute",
        }
    }

    pub fn validate(&self, cfg: &GameConfig) -> Result<(), AgentError> {
        if let QuestionerPolicy::Scripted { questions, .. } = self {
            if questions.len() < cfg.dialog_rounds as usize {
                return Err(AgentError::InvalidParameter(format!(
                    "scripted questioner has {} questions, dialog needs {}",
                    questions.len(),
                    cfg.dialog_rounds
                )));
            }
            if questions.iter().any(|q| q.trim().is_empty()) {
                return Err(AgentError::InvalidParameter("scripted question is empty".into()));
            }
        }
        Ok(())
    }

    /// Build the questioner for one game. `stream` separates the random
    /// streams of different games run under the same policy seed.
    pub fn instantiate(
        &self,
        pool: &PoolSpec,
        store: Option<&EmbeddingStore>,
        attributes: Option<&ImageAttributes>,
        stream: u64,
    ) -> Result<Box<dyn Questioner>, AgentError> {
        Ok(match self {
            QuestionerPolicy::Scripted { questions, seed } => Box::new(RandomGuesser {
                pool: pool.image_ids.clone(),
                questions: questions.clone(),
                rng: seed::child_rng(*seed, stream),
            }),
            QuestionerPolicy::RandomGuesser { seed } => Box::new(RandomGuesser {
                pool: pool.image_ids.clone(),
                questions: GENERIC_QUESTIONS.iter().map(|q| q.to_string()).collect(),
                rng: seed::child_rng(*seed, stream),
            }),
            QuestionerPolicy::EmbeddingOracle => {
                let store = store.ok_or_else(|| {
                    AgentError::InvalidParameter("embedding oracle needs an embedding store".into())
                })?;
                Box::new(EmbeddingOracle::new(pool, store)?)
            }
            QuestionerPolicy::AttributeFilter { seed } => {
                let attributes = attributes.ok_or_else(|| {
                    AgentError::InvalidParameter("attribute questioner needs image attributes".into())
                })?;
                Box::new(AttributeFilter::new(pool, attributes, seed::child_rng(*seed, stream)))
            }
        })
    }
}

struct RandomGuesser {
    pool: Vec<ImageId>,
    questions: Vec<String>,
    rng: ChaCha8Rng,
}

impl Questioner for RandomGuesser {
    fn caption_guess(&mut self) -> ImageId {
        self.pool.choose(&mut self.rng).expect("pool is non-empty").clone()
    }

    fn next_question(&mut self, round: u32) -> String {
        let i = (round as usize - 1) % self.questions.len();
        self.questions[i].clone()
    }

    fn observe_answer(&mut self, _question: &str, _answer: &str) {}

    fn round_guess(&mut self, _round: u32) -> ImageId {
        self.caption_guess()
    }

    fn final_ranking(&mut self) -> Vec<ImageId> {
        let mut order = self.pool.clone();
        order.shuffle(&mut self.rng);
        order
    }
}

struct EmbeddingOracle {
    ranking: Vec<ImageId>,
}

impl EmbeddingOracle {
    fn new(pool: &PoolSpec, store: &EmbeddingStore) -> Result<Self, AgentError> {
        let missing = |id: &ImageId| AgentError::InvalidParameter(format!("no embedding for pool image {id}"));
        let secret = store.vector(&pool.secret_id).ok_or_else(|| missing(&pool.secret_id))?;
        let mut scored = Vec::with_capacity(pool.len());
        for id in &pool.image_ids {
            let v = store.vector(id).ok_or_else(|| missing(id))?;
            scored.push((euclidean(secret, v), id.clone()));
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        Ok(Self {
            ranking: scored.into_iter().map(|(_, id)| id).collect(),
        })
    }
}

impl Questioner for EmbeddingOracle {
    fn caption_guess(&mut self) -> ImageId {
        self.ranking[0].clone()
    }

    fn next_question(&mut self, round: u32) -> String {
        GENERIC_QUESTIONS[(round as usize - 1) % GENERIC_QUESTIONS.len()].to_owned()
    }

    fn observe_answer(&mut self, _question: &str, _answer: &str) {}

    fn round_guess(&mut self, _round: u32) -> ImageId {
        self.ranking[0].clone()
    }

    fn final_ranking(&mut self) -> Vec<ImageId> {
        self.ranking.clone()
    }
}

struct AttributeFilter {
    pool: Vec<ImageId>,
    /// Attributes of each pool image, parallel to `pool`.
    image_attrs: Vec<BTreeSet<String>>,
    candidates: BTreeSet<String>,
    asked: BTreeSet<String>,
    /// Learned facts: attribute -> present in the secret?
    facts: BTreeMap<String, bool>,
    rng: ChaCha8Rng,
}

impl AttributeFilter {
    fn new(pool: &PoolSpec, attributes: &ImageAttributes, rng: ChaCha8Rng) -> Self {
        let image_attrs: Vec<BTreeSet<String>> = pool
            .image_ids
            .iter()
            .map(|id| attributes.of(id).cloned().unwrap_or_default())
            .collect();
        let candidates = image_attrs.iter().flatten().cloned().collect();
        Self {
            pool: pool.image_ids.clone(),
            image_attrs,
            candidates,
            asked: BTreeSet::new(),
            facts: BTreeMap::new(),
            rng,
        }
    }

    fn mismatches(&self, i: usize) -> usize {
        self.facts
            .iter()
            .filter(|(attr, present)| self.image_attrs[i].contains(*attr) != **present)
            .count()
    }

    /// Pool indices ordered by how many learned facts they contradict,
    /// with random order inside each group.
    fn ordered(&mut self) -> Vec<usize> {
        let keyed: Vec<(usize, u64, usize)> = (0..self.pool.len())
            .map(|i| (self.mismatches(i), self.rng.random::<u64>(), i))
            .collect();
        let mut keyed = keyed;
        keyed.sort();
        keyed.into_iter().map(|(_, _, i)| i).collect()
    }
}

impl Questioner for AttributeFilter {
    fn caption_guess(&mut self) -> ImageId {
        self.pool.choose(&mut self.rng).expect("pool is non-empty").clone()
    }

    fn next_question(&mut self, round: u32) -> String {
        let consistent: Vec<usize> = (0..self.pool.len()).filter(|&i| self.mismatches(i) == 0).collect();
        // Most even split of the still-consistent images.
        let best = self
            .candidates
            .iter()
            .filter(|a| !self.asked.contains(*a))
            .map(|a| {
                let with = consistent.iter().filter(|&&i| self.image_attrs[i].contains(a)).count();
                (with.min(consistent.len() - with), a)
            })
            .max_by(|x, y| x.0.cmp(&y.0).then_with(|| y.1.cmp(x.1)));
        match best {
            Some((_, attr)) => {
                let attr = attr.clone();
                self.asked.insert(attr.clone());
                format!("is there a {attr}?")
            }
            None => GENERIC_QUESTIONS[(round as usize - 1) % GENERIC_QUESTIONS.len()].to_owned(),
        }
    }

    fn observe_answer(&mut self, question: &str, answer: &str) {
        let Some(attr) = parse_binary_question(question) else {
            return;
        };
        let answer = answer.trim().to_lowercase();
        let present = if answer.starts_with("yes") {
            true
        } else if answer.starts_with("no") {
            false
        } else {
            return;
        };
        self.facts.insert(attr, present);
    }

    fn round_guess(&mut self, _round: u32) -> ImageId {
        let first = self.ordered()[0];
        self.pool[first].clone()
    }

    fn final_ranking(&mut self) -> Vec<ImageId> {
        self.ordered().into_iter().map(|i| self.pool[i].clone()).collect()
    }
}
