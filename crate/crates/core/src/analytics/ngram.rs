//! Prefix tree of question openings ("is" -> "there" -> "a" ...), with the
//! number of questions sharing each prefix. Counts are what a sunburst
//! rendering needs: arc length proportional to count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AnalyticsError;

/// Lowercase, drop punctuation, split on whitespace.
pub fn tokenize(question: &str) -> Vec<String> {
    question
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !matches!(c, '¿' | '¡' | '…' | '“' | '”' | '‘' | '’'))
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramNode {
    pub token: String,
    pub count: usize,
    pub children: Vec<NgramNode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramTree {
    pub depth: usize,
    pub total_questions: usize,
    pub children: Vec<NgramNode>,
}

impl NgramTree {
    /// Count of questions starting with `prefix` (already tokenized).
    pub fn count(&self, prefix: &[&str]) -> usize {
        let mut level = &self.children;
        let mut count = self.total_questions;
        for tok in prefix {
            match level.iter().find(|n| n.token == *tok) {
                Some(n) => {
                    count = n.count;
                    level = &n.children;
                }
                None => return 0,
            }
        }
        count
    }

    /// Flat `(prefix, count)` rows, depth-first, for tabular output.
    pub fn rows(&self) -> Vec<(Vec<String>, usize)> {
        fn walk(nodes: &[NgramNode], path: &mut Vec<String>, out: &mut Vec<(Vec<String>, usize)>) {
            for n in nodes {
                path.push(n.token.clone());
                out.push((path.clone(), n.count));
                walk(&n.children, path, out);
                path.pop();
            }
        }
        let mut out = Vec::new();
        walk(&self.children, &mut Vec::new(), &mut out);
        out
    }
}

#[derive(Default)]
struct Builder {
    count: usize,
    children: BTreeMap<String, Builder>,
}

impl Builder {
    fn freeze(self) -> Vec<NgramNode> {
        let mut nodes: Vec<NgramNode> = self
            .children
            .into_iter()
            .map(|(token, b)| NgramNode {
                token,
                count: b.count,
                children: b.freeze(),
            })
            .collect();
        // Largest first; BTreeMap order already breaks ties by token.
        nodes.sort_by(|a, b| b.count.cmp(&a.count));
        nodes
    }
}

pub fn question_ngram_distribution<S: AsRef<str>>(
    questions: &[S],
    depth: usize,
) -> Result<NgramTree, AnalyticsError> {
    if depth == 0 {
        return Err(AnalyticsError::InvalidParameter("n-gram depth must be >= 1".into()));
    }
    let mut root = Builder::default();
    for q in questions {
        let tokens = tokenize(q.as_ref());
        let mut node = &mut root;
        for tok in tokens.into_iter().take(depth) {
            node = node.children.entry(tok).or_default();
            node.count += 1;
        }
    }
    Ok(NgramTree {
        depth,
        total_questions: questions.len(),
        children: root.freeze(),
    })
}
