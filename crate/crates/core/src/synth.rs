//! Synthetic image datasets for demos and end-to-end tests.
//!
//! Images are Gaussian points around per-category centres. Each image
//! belongs to its cluster's category and, with some probability, to a few
//! extra attribute categories, so truthful answerers have something to say.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingError, EmbeddingStore};
use crate::ids::ImageId;
use crate::seed;

const VOCABULARY: &[&str] = &[
    "person", "dog", "cat", "car", "bus", "tree", "bicycle", "horse", "pizza", "boat", "bird", "train", "clock",
    "umbrella", "kite", "bench", "giraffe", "elephant", "laptop", "cake", "bear", "sheep", "cow", "truck",
    "airplane", "chair", "couch", "bed", "oven", "sink", "book", "vase", "toilet", "skateboard", "surfboard",
    "banana", "apple", "orange", "broccoli", "donut",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub categories: usize,
    pub images_per_category: usize,
    pub dim: usize,
    /// Spread of the category centres.
    pub centre_scale: f64,
    /// Spread of images around their centre.
    pub noise: f64,
    /// Chance that an image also carries each of two extra attributes.
    pub extra_attribute_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            categories: 20,
            images_per_category: 30,
            dim: 8,
            centre_scale: 2.0,
            noise: 1.0,
            extra_attribute_prob: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub store: EmbeddingStore,
    pub captions: BTreeMap<ImageId, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: ImageId,
    pub caption: String,
}

fn category_name(i: usize) -> String {
    let word = VOCABULARY[i % VOCABULARY.len()];
    match i / VOCABULARY.len() {
        0 => format!("contains {word}"),
        k => format!("contains {word} {k}"),
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset, EmbeddingError> {
    let mut rng = seed::rng(cfg.seed);
    let centre = Normal::new(0.0, cfg.centre_scale).expect("finite scale");
    let noise = Normal::new(0.0, cfg.noise).expect("finite noise");
    let centres: Vec<Vec<f64>> = (0..cfg.categories)
        .map(|_| (0..cfg.dim).map(|_| centre.sample(&mut rng)).collect())
        .collect();

    let mut entries = Vec::new();
    let mut categories: BTreeMap<String, BTreeSet<ImageId>> = BTreeMap::new();
    let mut captions = BTreeMap::new();
    for (c, mu) in centres.iter().enumerate() {
        for j in 0..cfg.images_per_category {
            let id = ImageId::new(format!("c{c:02}-{j:03}"));
            let v: Vec<f32> = mu.iter().map(|m| (m + noise.sample(&mut rng)) as f32).collect();
            entries.push((id.clone(), v));
            let mut labels = vec![c];
            for _ in 0..2 {
                if cfg.categories > 1 && rng.random_bool(cfg.extra_attribute_prob) {
                    labels.push(rng.random_range(0..cfg.categories));
                }
            }
            labels.sort_unstable();
            labels.dedup();
            let words: Vec<&str> = labels
                .iter()
                .map(|&l| VOCABULARY[l % VOCABULARY.len()])
                .collect();
            captions.insert(id.clone(), format!("a photo with {}", words.join(" and ")));
            for l in labels {
                categories.entry(category_name(l)).or_default().insert(id.clone());
            }
        }
    }
    let mut store = EmbeddingStore::from_entries(entries)?;
    store.set_categories(categories)?;
    Ok(SynthDataset { store, captions })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let cfg = SynthConfig {
            categories: 3,
            images_per_category: 4,
            dim: 5,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.store.len(), 12);
        assert_eq!(a.store.dim(), 5);
        assert_eq!(a.store.categories().len(), 3);
        assert_eq!(a.store.categories(), b.store.categories());
        assert_eq!(a.captions, b.captions);
        for id in a.store.ids() {
            assert_eq!(a.store.vector(id), b.store.vector(id));
        }
    }
}
