use std::collections::{BTreeSet, HashMap};

use crate::embedding::{CategoryRecord, EmbeddingStore};
use crate::ids::ImageId;

/// Per-image binary attributes ("person", "dog", ...) used by the truthful
/// answerer and the attribute-filtering questioner.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageAttributes {
    by_image: HashMap<ImageId, BTreeSet<String>>,
}

impl ImageAttributes {
    pub fn new() -> Self {
        Self::default()
    }

    /// Category membership as attributes: an image in category "dog" has
    /// attribute "dog".
    pub fn from_categories(store: &EmbeddingStore) -> Self {
        let mut attrs = Self::new();
        for (category, members) in store.categories() {
            for id in members {
                attrs.insert(id.clone(), category);
            }
        }
        attrs
    }

    /// Same as [`from_categories`](Self::from_categories), straight from
    /// category records when no embeddings are loaded.
    pub fn from_category_records(records: &[CategoryRecord]) -> Self {
        let mut attrs = Self::new();
        for r in records {
            for id in &r.members {
                attrs.insert(id.clone(), &r.category);
            }
        }
        attrs
    }

    pub fn insert(&mut self, image: ImageId, attribute: &str) {
        self.by_image
            .entry(image)
            .or_default()
            .insert(normalize_attribute(attribute));
    }

    pub fn of(&self, image: &ImageId) -> Option<&BTreeSet<String>> {
        self.by_image.get(image)
    }

    pub fn has(&self, image: &ImageId, attribute: &str) -> bool {
        let attribute = normalize_attribute(attribute);
        self.of(image).is_some_and(|set| {
            set.contains(&attribute) || singular(&attribute).is_some_and(|s| set.contains(&s))
        })
    }

    /// Whether any image carries `attribute` (in either number).
    pub fn knows(&self, attribute: &str) -> bool {
        let attribute = normalize_attribute(attribute);
        let single = singular(&attribute);
        self.by_image
            .values()
            .any(|set| set.contains(&attribute) || single.as_ref().is_some_and(|s| set.contains(s)))
    }
}

fn normalize_attribute(a: &str) -> String {
    let a = a.trim().to_lowercase();
    a.strip_prefix("contains ").map(str::to_owned).unwrap_or(a)
}

fn singular(word: &str) -> Option<String> {
    if let Some(stem) = word.strip_suffix("es") {
        if stem.ends_with('s') || stem.ends_with("sh") || stem.ends_with("ch") || stem.ends_with('x') {
            return Some(stem.to_owned());
        }
    }
    word.strip_suffix('s')
        .filter(|s| !s.is_empty() && !s.ends_with('s'))
        .map(str::to_owned)
}

const ARTICLES: &[&str] = &["a", "an", "any", "some", "the"];

/// Parse "is/are there <attribute>?" (case-insensitive). Returns the
/// attribute phrase with leading articles removed.
pub fn parse_binary_question(question: &str) -> Option<String> {
    let cleaned: String = question
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    let mut words = cleaned.split_whitespace();
    match (words.next(), words.next()) {
        (Some("is" | "are"), Some("there")) => {}
        _ => return None,
    }
    let rest: Vec<&str> = words.skip_while(|w| ARTICLES.contains(w)).collect();
    if rest.is_empty() {
        None
    } else {
        Some(rest.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar() {
        assert_eq!(parse_binary_question("Is there a person?").as_deref(), Some("person"));
        assert_eq!(parse_binary_question("ARE THERE any dogs?").as_deref(), Some("dogs"));
        assert_eq!(parse_binary_question("is there a fire hydrant").as_deref(), Some("fire hydrant"));
        assert_eq!(parse_binary_question("what color is it?"), None);
        assert_eq!(parse_binary_question("is there?"), None);
    }

    #[test]
    fn plural_questions_match_singular_attributes() {
        let mut a = ImageAttributes::new();
        a.insert("x".into(), "contains person");
        a.insert("x".into(), "bus");
        assert!(a.has(&"x".into(), "person"));
        assert!(a.has(&"x".into(), "persons"));
        assert!(a.has(&"x".into(), "buses"));
        assert!(!a.has(&"x".into(), "dog"));
        assert!(!a.has(&"y".into(), "person"));
    }
}
