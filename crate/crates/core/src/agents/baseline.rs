use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;

use super::attributes::{parse_binary_question, ImageAttributes};
use super::protocol::{AgentError, AnswerRequest, AnswerResponse, Answerer, SecretImageRef, PROTOCOL_VERSION};
use crate::seed;

pub const DEFAULT_ANSWER: &str = "I can't tell";

#[derive(Debug, Clone, PartialEq)]
pub enum BaselineKind {
    /// Fixed question -> answer table with a default for everything else.
    Scripted { table: HashMap<String, String>, default: String },
    /// Answers "is/are there X?" exactly from image attributes.
    Truthful,
    /// Truthful, with each yes/no answer flipped with probability `flip_prob`.
    Noisy { flip_prob: f64, seed: u64 },
}

pub fn make_baseline_answerer(
    kind: BaselineKind,
    attributes: Arc<ImageAttributes>,
) -> Result<Box<dyn Answerer>, AgentError> {
    Ok(match kind {
        BaselineKind::Scripted { table, default } => Box::new(ScriptedAnswerer::new(table, default)?),
        BaselineKind::Truthful => Box::new(TruthfulAnswerer::new(attributes)),
        BaselineKind::Noisy { flip_prob, seed } => {
            Box::new(NoisyAnswerer::new(TruthfulAnswerer::new(attributes), flip_prob, seed)?)
        }
    })
}

fn normalize_question(q: &str) -> String {
    q.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn respond(req: &AnswerRequest, answer: String, started: Instant) -> AnswerResponse {
    AnswerResponse {
        protocol_version: PROTOCOL_VERSION,
        session_id: req.session_id.clone(),
        answer,
        latency_ms: started.elapsed().as_millis() as u64,
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedAnswerer {
    table: HashMap<String, String>,
    default: String,
}

impl ScriptedAnswerer {
    pub fn new(table: HashMap<String, String>, default: impl Into<String>) -> Result<Self, AgentError> {
        let default = default.into();
        if default.trim().is_empty() {
            return Err(AgentError::InvalidParameter("default answer must not be empty".into()));
        }
        if let Some((q, _)) = table.iter().find(|(_, a)| a.trim().is_empty()) {
            return Err(AgentError::InvalidParameter(format!("empty scripted answer for {q:?}")));
        }
        let table = table
            .into_iter()
            .map(|(q, a)| (normalize_question(&q), a))
            .collect();
        Ok(Self { table, default })
    }
}

impl Answerer for ScriptedAnswerer {
    fn name(&self) -> &str {
        "scripted"
    }

    fn answer(&self, req: &AnswerRequest) -> Result<AnswerResponse, AgentError> {
        let started = Instant::now();
        let answer = self
            .table
            .get(&normalize_question(&req.question))
            .cloned()
            .unwrap_or_else(|| self.default.clone());
        Ok(respond(req, answer, started))
    }
}

#[derive(Debug, Clone)]
pub struct TruthfulAnswerer {
    attributes: Arc<ImageAttributes>,
}

impl TruthfulAnswerer {
    pub fn new(attributes: Arc<ImageAttributes>) -> Self {
        Self { attributes }
    }

    /// `Some(true/false)` for a parseable binary question about a known
    /// attribute; `None` when the question is outside the grammar.
    fn binary_answer(&self, req: &AnswerRequest) -> Option<bool> {
        let attribute = parse_binary_question(&req.question)?;
        let SecretImageRef::Id { image_id } = &req.secret_image_ref else {
            return None;
        };
        if !self.attributes.knows(&attribute) {
            // An attribute nobody has is still answerable: it is absent.
            return Some(false);
        }
        Some(self.attributes.has(image_id, &attribute))
    }
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_owned()
}

impl Answerer for TruthfulAnswerer {
    fn name(&self) -> &str {
        "truthful"
    }

    fn answer(&self, req: &AnswerRequest) -> Result<AnswerResponse, AgentError> {
        let started = Instant::now();
        let answer = match self.binary_answer(req) {
            Some(b) => yes_no(b),
            None => DEFAULT_ANSWER.to_owned(),
        };
        Ok(respond(req, answer, started))
    }
}

/// Truthful answerer that lies on binary questions with a fixed probability.
/// The coin flip is keyed on (session, history length, question), so a
/// redelivered request gets the same answer.
#[derive(Debug, Clone)]
pub struct NoisyAnswerer {
    inner: TruthfulAnswerer,
    flip_prob: f64,
    seed: u64,
}

impl NoisyAnswerer {
    pub fn new(inner: TruthfulAnswerer, flip_prob: f64, seed: u64) -> Result<Self, AgentError> {
        if !(0.0..=1.0).contains(&flip_prob) {
            return Err(AgentError::InvalidParameter(format!(
                "flip_prob must be in [0, 1], got {flip_prob}"
            )));
        }
        Ok(Self { inner, flip_prob, seed })
    }

    fn flips(&self, req: &AnswerRequest) -> bool {
        let key = fnv1a(
            format!("{}\u{1f}{}\u{1f}{}", req.session_id, req.history.len(), req.question).as_bytes(),
        );
        let mut rng = seed::child_rng(self.seed, key);
        rng.random::<f64>() < self.flip_prob
    }
}

impl Answerer for NoisyAnswerer {
    fn name(&self) -> &str {
        "noisy"
    }

    fn answer(&self, req: &AnswerRequest) -> Result<AnswerResponse, AgentError> {
        let started = Instant::now();
        let answer = match self.inner.binary_answer(req) {
            Some(b) => yes_no(b != self.flips(req)),
            None => DEFAULT_ANSWER.to_owned(),
        };
        Ok(respond(req, answer, started))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::protocol::QaPair;
    use crate::ids::{ImageId, SessionId};

    fn req(question: &str, secret: &str) -> AnswerRequest {
        AnswerRequest {
            protocol_version: PROTOCOL_VERSION,
            session_id: SessionId::new("s1"),
            caption: "a man riding a horse".into(),
            history: vec![],
            question: question.into(),
            secret_image_ref: SecretImageRef::Id {
                image_id: ImageId::new(secret),
            },
        }
    }

    fn attrs() -> Arc<ImageAttributes> {
        let mut a = ImageAttributes::new();
        a.insert("img1".into(), "contains person");
        a.insert("img1".into(), "horse");
        a.insert("img2".into(), "dog");
        Arc::new(a)
    }

    #[test]
    fn scripted_table_lookup_and_default() {
        let table = HashMap::from([("is it indoors?".to_owned(), "yes".to_owned())]);
        let a = ScriptedAnswerer::new(table, DEFAULT_ANSWER).unwrap();
        assert_eq!(a.answer(&req("Is it  indoors?", "x")).unwrap().answer, "yes");
        assert_eq!(a.answer(&req("what time is it?", "x")).unwrap().answer, "I can't tell");
    }

    #[test]
    fn responses_echo_session() {
        let a = TruthfulAnswerer::new(attrs());
        let r = req("is there a dog?", "img1");
        let resp = a.answer(&r).unwrap();
        assert_eq!(resp.session_id, r.session_id);
        resp.validate_for(&r).unwrap();
    }

    #[test]
    fn truthful_answers_attribute_questions() {
        let a = TruthfulAnswerer::new(attrs());
        assert_eq!(a.answer(&req("is there a person?", "img1")).unwrap().answer, "yes");
        assert_eq!(a.answer(&req("Is there a dog?", "img1")).unwrap().answer, "no");
        assert_eq!(a.answer(&req("are there dogs?", "img2")).unwrap().answer, "yes");
        assert_eq!(a.answer(&req("is there a unicorn?", "img2")).unwrap().answer, "no");
        assert_eq!(a.answer(&req("what is he doing?", "img1")).unwrap().answer, DEFAULT_ANSWER);
    }

    #[test]
    fn noisy_degenerate_probabilities() {
        let truthful = TruthfulAnswerer::new(attrs());
        let never = NoisyAnswerer::new(truthful.clone(), 0.0, 1).unwrap();
        let always = NoisyAnswerer::new(truthful.clone(), 1.0, 1).unwrap();
        for q in ["is there a person?", "is there a dog?", "are there horses?", "how many?"] {
            for img in ["img1", "img2", "img3"] {
                let r = req(q, img);
                let t = truthful.answer(&r).unwrap().answer;
                assert_eq!(never.answer(&r).unwrap().answer, t);
                let flipped = always.answer(&r).unwrap().answer;
                match t.as_str() {
                    "yes" => assert_eq!(flipped, "no"),
                    "no" => assert_eq!(flipped, "yes"),
                    _ => assert_eq!(flipped, t),
                }
            }
        }
    }

    #[test]
    fn noisy_is_idempotent_per_request() {
        let noisy = NoisyAnswerer::new(TruthfulAnswerer::new(attrs()), 0.5, 9).unwrap();
        let mut r = req("is there a person?", "img1");
        r.history.push(QaPair { question: "q".into(), answer: "a".into() });
        let first = noisy.answer(&r).unwrap().answer;
        for _ in 0..10 {
            assert_eq!(noisy.answer(&r).unwrap().answer, first);
        }
    }

    #[test]
    fn noisy_flip_rate_is_close_to_parameter() {
        let truthful = TruthfulAnswerer::new(attrs());
        let noisy = NoisyAnswerer::new(truthful.clone(), 0.3, 4).unwrap();
        let mut flips = 0;
        let n = 4000;
        for i in 0..n {
            let mut r = req("is there a person?", "img1");
            r.session_id = SessionId::new(format!("s{i}"));
            flips += usize::from(noisy.answer(&r).unwrap().answer == "no");
        }
        let rate = flips as f64 / n as f64;
        // 4 sigma of a Binomial(4000, 0.3) proportion.
        assert!((rate - 0.3).abs() < 4.0 * (0.3f64 * 0.7 / n as f64).sqrt(), "rate {rate}");
    }

    #[test]
    fn invalid_parameters() {
        let t = TruthfulAnswerer::new(attrs());
        assert!(matches!(NoisyAnswerer::new(t.clone(), 1.5, 0), Err(AgentError::InvalidParameter(_))));
        assert!(matches!(NoisyAnswerer::new(t, -0.1, 0), Err(AgentError::InvalidParameter(_))));
        assert!(ScriptedAnswerer::new(HashMap::new(), " ").is_err());
        assert!(make_baseline_answerer(BaselineKind::Noisy { flip_prob: 2.0, seed: 0 }, attrs()).is_err());
    }
}
