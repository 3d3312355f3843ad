//! Pool construction from an embedding store.
//!
//! Secret candidates are the images closest to each category's mean
//! embedding. Distractors for a secret are drawn from concentric shells
//! around it: shell 0 is the ball `[0, r]`, shell `i > 0` is the annulus
//! `(i*r, (i+1)*r]`. Each shell contributes a fixed number of images, so the
//! counts control how hard the pool is.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{euclidean, euclidean_to_point, EmbeddingError, EmbeddingStore};
use crate::game::PoolSpec;
use crate::ids::ImageId;
use crate::seed;

/// Neighbour rank used by the data-driven base radius.
pub const AUTO_RADIUS_NEIGHBOR: usize = 50;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("category {0} has no members")]
    EmptyCategory(String),
    #[error("shell {shell} has {available} candidate images, {requested} requested")]
    InsufficientShellPopulation {
        shell: usize,
        available: usize,
        requested: usize,
    },
    #[error("image {0} is not in the embedding store")]
    UnknownImage(ImageId),
    #[error("invalid shell config: {0}")]
    InvalidShellConfig(String),
    #[error("cannot derive a base radius around {0}: all neighbours coincide with it")]
    DegenerateRadius(ImageId),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellConfig {
    pub base_radius: f64,
    pub counts_per_shell: Vec<usize>,
    pub seed: u64,
}

impl ShellConfig {
    pub fn new(base_radius: f64, counts_per_shell: Vec<usize>, seed: u64) -> Self {
        Self {
            base_radius,
            counts_per_shell,
            seed,
        }
    }

    pub fn shell_count(&self) -> usize {
        self.counts_per_shell.len()
    }

    /// Outer radius of every shell: `r, 2r, 3r, ...`.
    pub fn radii(&self) -> Vec<f64> {
        shell_radii(self.base_radius, self.shell_count())
    }

    pub fn total_distractors(&self) -> usize {
        self.counts_per_shell.iter().sum()
    }

    pub fn validate(&self) -> Result<(), PoolError> {
        if !(self.base_radius.is_finite() && self.base_radius > 0.0) {
            return Err(PoolError::InvalidShellConfig(format!(
                "base radius must be positive, got {}",
                self.base_radius
            )));
        }
        if self.counts_per_shell.is_empty() {
            return Err(PoolError::InvalidShellConfig("at least one shell is required".into()));
        }
        Ok(())
    }
}

pub fn shell_radii(base_radius: f64, shell_count: usize) -> Vec<f64> {
    (1..=shell_count).map(|i| i as f64 * base_radius).collect()
}

/// Index of the shell containing `distance`, or `None` beyond the outermost.
pub fn shell_of(distance: f64, radii: &[f64]) -> Option<usize> {
    radii.iter().position(|&outer| distance <= outer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellMember {
    pub image_id: ImageId,
    pub shell: usize,
    pub distance: f64,
}

/// How a pool's distractors were drawn; stored alongside the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellProvenance {
    pub radii: Vec<f64>,
    pub seed: u64,
    pub members: Vec<ShellMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecretCandidate {
    pub category: String,
    pub image_id: ImageId,
    pub distance_to_mean: f64,
}

/// For each category, the member closest to the category's mean embedding.
/// Ties go to the lexicographically smallest id.
pub fn select_secret_candidates(store: &EmbeddingStore) -> Result<Vec<SecretCandidate>, PoolError> {
    let mut out = Vec::with_capacity(store.categories().len());
    for (category, members) in store.categories() {
        if members.is_empty() {
            return Err(PoolError::EmptyCategory(category.clone()));
        }
        let mut mean = vec![0.0f64; store.dim()];
        for id in members {
            for (m, x) in mean.iter_mut().zip(store.require(id)?) {
                *m += f64::from(*x);
            }
        }
        let count = members.len() as f64;
        mean.iter_mut().for_each(|m| *m /= count);

        let mut best: Option<(&ImageId, f64)> = None;
        // Members iterate in sorted order, so a strict comparison keeps the
        // smallest id on ties.
        for id in members {
            let d = euclidean_to_point(store.require(id)?, &mean);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((id, d));
            }
        }
        let (id, d) = best.expect("non-empty category");
        out.push(SecretCandidate {
            category: category.clone(),
            image_id: id.clone(),
            distance_to_mean: d,
        });
    }
    Ok(out)
}

/// Distance from `secret` to its k-th nearest neighbour (k capped at the
/// number of other images).
pub fn auto_base_radius(store: &EmbeddingStore, secret: &ImageId, k: usize) -> Result<f64, PoolError> {
    let sv = store
        .vector(secret)
        .ok_or_else(|| PoolError::UnknownImage(secret.clone()))?;
    let mut dists: Vec<f64> = store
        .ids()
        .iter()
        .filter(|id| *id != secret)
        .map(|id| euclidean(sv, store.vector(id).expect("id from store")))
        .collect();
    if dists.is_empty() {
        return Err(PoolError::DegenerateRadius(secret.clone()));
    }
    let k = k.clamp(1, dists.len());
    let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
    if *kth > 0.0 {
        Ok(*kth)
    } else {
        Err(PoolError::DegenerateRadius(secret.clone()))
    }
}

/// Draw distractors for `secret_id` from its shells and return the shuffled
/// pool. Sampling is uniform without replacement within each shell and fully
/// determined by `cfg.seed`.
pub fn sample_distractors(
    store: &EmbeddingStore,
    secret_id: &ImageId,
    cfg: &ShellConfig,
    pool_id: impl Into<String>,
    caption: impl Into<String>,
) -> Result<PoolSpec, PoolError> {
    cfg.validate()?;
    let sv = store
        .vector(secret_id)
        .ok_or_else(|| PoolError::UnknownImage(secret_id.clone()))?;
    let radii = cfg.radii();
    let mut shells: Vec<Vec<(ImageId, f64)>> = vec![Vec::new(); radii.len()];
    for id in store.ids().iter().filter(|id| *id != secret_id) {
        let d = euclidean(sv, store.vector(id).expect("id from store"));
        if let Some(s) = shell_of(d, &radii) {
            shells[s].push((id.clone(), d));
        }
    }
    for (shell, (members, &requested)) in shells.iter().zip(&cfg.counts_per_shell).enumerate() {
        if members.len() < requested {
            return Err(PoolError::InsufficientShellPopulation {
                shell,
                available: members.len(),
                requested,
            });
        }
    }

    let mut rng = seed::rng(cfg.seed);
    let mut members = Vec::with_capacity(cfg.total_distractors());
    for (shell, (candidates, &count)) in shells.iter().zip(&cfg.counts_per_shell).enumerate() {
        let picked = rand::seq::index::sample(&mut rng, candidates.len(), count);
        for i in picked {
            let (id, d) = &candidates[i];
            members.push(ShellMember {
                image_id: id.clone(),
                shell,
                distance: *d,
            });
        }
    }
    let mut image_ids: Vec<ImageId> = std::iter::once(secret_id.clone())
        .chain(members.iter().map(|m| m.image_id.clone()))
        .collect();
    image_ids.shuffle(&mut rng);

    Ok(PoolSpec {
        pool_id: pool_id.into(),
        secret_id: secret_id.clone(),
        caption: caption.into(),
        image_ids,
        shell_provenance: Some(ShellProvenance {
            radii,
            seed: cfg.seed,
            members,
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolDifficulty {
    /// Distractors per shell for the given radii.
    pub per_shell: Vec<usize>,
    /// Distractors farther than the outermost radius.
    pub outside: usize,
    pub min_distance: f64,
    pub mean_distance: f64,
    pub max_distance: f64,
}

/// Distance profile of a pool's distractors around its secret, used when
/// curating pools by hand. Radii default to the pool's own provenance.
pub fn pool_difficulty_stats(
    pool: &PoolSpec,
    store: &EmbeddingStore,
    radii: Option<&[f64]>,
) -> Result<PoolDifficulty, PoolError> {
    let radii: Vec<f64> = match radii {
        Some(r) => r.to_vec(),
        None => pool
            .shell_provenance
            .as_ref()
            .map(|p| p.radii.clone())
            .unwrap_or_default(),
    };
    let sv = store
        .vector(&pool.secret_id)
        .ok_or_else(|| PoolError::UnknownImage(pool.secret_id.clone()))?;
    let mut per_shell = vec![0; radii.len()];
    let mut outside = 0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut n = 0usize;
    for id in pool.image_ids.iter().filter(|id| **id != pool.secret_id) {
        let v = store
            .vector(id)
            .ok_or_else(|| PoolError::UnknownImage(id.clone()))?;
        let d = euclidean(sv, v);
        match shell_of(d, &radii) {
            Some(s) => per_shell[s] += 1,
            None => outside += 1,
        }
        min = min.min(d);
        max = max.max(d);
        sum += d;
        n += 1;
    }
    let mean = if n == 0 { 0.0 } else { sum / n as f64 };
    if n == 0 {
        min = 0.0;
        max = 0.0;
    }
    Ok(PoolDifficulty {
        per_shell,
        outside,
        min_distance: min,
        mean_distance: mean,
        max_distance: max,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaseRadius {
    /// Distance to the secret's k-th nearest neighbour, per pool.
    Auto { neighbor: usize },
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct GenPoolsOptions {
    pub base_radius: BaseRadius,
    pub counts_per_shell: Vec<usize>,
    pub seed: u64,
    pub captions: BTreeMap<ImageId, String>,
}

#[derive(Debug)]
pub struct GeneratedPools {
    pub pools: Vec<PoolSpec>,
    /// Candidates whose shells could not supply the requested counts.
    pub skipped: Vec<(SecretCandidate, PoolError)>,
}

/// One pool per distinct secret candidate. Each pool gets its own seed
/// derived from the run seed and the candidate's position.
pub fn generate_pools(store: &EmbeddingStore, opts: &GenPoolsOptions) -> Result<GeneratedPools, PoolError> {
    let candidates = select_secret_candidates(store)?;
    let mut seen = HashSet::new();
    let mut pools = Vec::new();
    let mut skipped = Vec::new();
    for (i, cand) in candidates.into_iter().enumerate() {
        if !seen.insert(cand.image_id.clone()) {
            continue;
        }
        let radius = match opts.base_radius {
            BaseRadius::Fixed(r) => r,
            BaseRadius::Auto { neighbor } => match auto_base_radius(store, &cand.image_id, neighbor) {
                Ok(r) => r,
                Err(e) => {
                    skipped.push((cand, e));
                    continue;
                }
            },
        };
        let cfg = ShellConfig::new(radius, opts.counts_per_shell.clone(), seed::mix(opts.seed, i as u64));
        let caption = opts.captions.get(&cand.image_id).cloned().unwrap_or_default();
        match sample_distractors(store, &cand.image_id, &cfg, format!("pool-{}", cand.category), caption) {
            Ok(p) => pools.push(p),
            Err(e @ PoolError::InsufficientShellPopulation { .. }) => skipped.push((cand, e)),
            Err(e) => return Err(e),
        }
    }
    Ok(GeneratedPools { pools, skipped })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    fn store_1d(points: &[(&str, f32)]) -> EmbeddingStore {
        EmbeddingStore::from_entries(points.iter().map(|(id, x)| (ImageId::from(*id), vec![*x]))).unwrap()
    }

    fn with_category(mut store: EmbeddingStore, name: &str, members: &[&str]) -> EmbeddingStore {
        let mut cats = store.categories().clone();
        cats.insert(name.into(), members.iter().map(|m| ImageId::from(*m)).collect::<BTreeSet<_>>());
        store.set_categories(cats).unwrap();
        store
    }

    #[test]
    fn tie_goes_to_smallest_id() {
        let store = EmbeddingStore::from_entries(vec![
            (ImageId::from("B"), vec![2.0, 0.0]),
            (ImageId::from("A"), vec![0.0, 0.0]),
        ])
        .unwrap();
        let store = with_category(store, "c", &["A", "B"]);
        let c = select_secret_candidates(&store).unwrap();
        assert_eq!(c[0].image_id, ImageId::from("A"));
        assert_eq!(c[0].distance_to_mean, 1.0);
    }

    #[test]
    fn one_candidate_per_category() {
        let store = crate::synth::generate(&crate::synth::SynthConfig {
            categories: 80,
            images_per_category: 3,
            extra_attribute_prob: 0.0,
            ..Default::default()
        })
        .unwrap()
        .store;
        let c = select_secret_candidates(&store).unwrap();
        assert_eq!(c.len(), 80);
        assert_eq!(c.iter().map(|c| &c.category).collect::<BTreeSet<_>>().len(), 80);
    }

    #[test]
    fn nearest_to_mean_wins() {
        // mean (2, 0): A at 2, B at 1, C at 3.
        let store = EmbeddingStore::from_entries(vec![
            (ImageId::from("A"), vec![0.0, 0.0]),
            (ImageId::from("B"), vec![1.0, 0.0]),
            (ImageId::from("C"), vec![5.0, 0.0]),
        ])
        .unwrap();
        let store = with_category(store, "c", &["A", "B", "C"]);
        assert_eq!(select_secret_candidates(&store).unwrap()[0].image_id, ImageId::from("B"));
    }

    #[test]
    fn empty_category_is_an_error() {
        let store = with_category(store_1d(&[("a", 0.0)]), "none", &[]);
        assert!(matches!(select_secret_candidates(&store), Err(PoolError::EmptyCategory(c)) if c == "none"));
    }

    #[test]
    fn one_member_per_shell() {
        let store = store_1d(&[("s", 0.0), ("a", 0.5), ("b", 1.5), ("c", 2.5), ("far", 9.0)]);
        let cfg = ShellConfig::new(1.0, vec![1, 1, 1], 3);
        let pool = sample_distractors(&store, &"s".into(), &cfg, "p", "cap").unwrap();
        let got: BTreeSet<_> = pool.image_ids.iter().map(|i| i.as_str().to_owned()).collect();
        let want: BTreeSet<_> = ["s", "a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(got, want);
        let shells: Vec<_> = pool.shell_provenance.unwrap().members.iter().map(|m| m.shell).collect();
        assert_eq!(shells, vec![0, 1, 2]);
    }

    #[test]
    fn undersupplied_shell_reports_index() {
        let store = store_1d(&[("s", 0.0), ("a", 0.5), ("b", 1.5), ("c", 2.5)]);
        let cfg = ShellConfig::new(1.0, vec![2, 1, 1], 3);
        let err = sample_distractors(&store, &"s".into(), &cfg, "p", "").unwrap_err();
        assert!(matches!(
            err,
            PoolError::InsufficientShellPopulation { shell: 0, available: 1, requested: 2 }
        ));
    }

    #[test]
    fn shell_boundaries_are_half_open() {
        let radii = shell_radii(1.0, 3);
        assert_eq!(shell_of(0.0, &radii), Some(0));
        assert_eq!(shell_of(1.0, &radii), Some(0));
        assert_eq!(shell_of(1.000001, &radii), Some(1));
        assert_eq!(shell_of(3.0, &radii), Some(2));
        assert_eq!(shell_of(3.1, &radii), None);
    }

    #[test]
    fn constant_distance_stats() {
        let store = store_1d(&[("s", 0.0), ("a", 2.0), ("b", -2.0)]);
        let pool = PoolSpec {
            pool_id: "p".into(),
            secret_id: "s".into(),
            caption: String::new(),
            image_ids: vec!["a".into(), "s".into(), "b".into()],
            shell_provenance: None,
        };
        let st = pool_difficulty_stats(&pool, &store, Some(&[1.0, 2.0])).unwrap();
        assert_eq!((st.min_distance, st.mean_distance, st.max_distance), (2.0, 2.0, 2.0));
        assert_eq!(st.per_shell, vec![0, 2]);
        assert_eq!(st.outside, 0);
    }

    #[test]
    fn stats_reject_unknown_images() {
        let store = store_1d(&[("s", 0.0)]);
        let pool = PoolSpec {
            pool_id: "p".into(),
            secret_id: "s".into(),
            caption: String::new(),
            image_ids: vec!["s".into(), "ghost".into()],
            shell_provenance: None,
        };
        assert!(matches!(pool_difficulty_stats(&pool, &store, None), Err(PoolError::UnknownImage(_))));
    }

    #[test]
    fn auto_radius_is_kth_neighbour_distance() {
        let store = store_1d(&[("s", 0.0), ("a", 1.0), ("b", -3.0), ("c", 2.0)]);
        assert_eq!(auto_base_radius(&store, &"s".into(), 2).unwrap(), 2.0);
        assert_eq!(auto_base_radius(&store, &"s".into(), 50).unwrap(), 3.0);
    }

    #[test]
    fn invalid_radius_is_rejected() {
        let store = store_1d(&[("s", 0.0), ("a", 1.0)]);
        let cfg = ShellConfig::new(0.0, vec![1], 0);
        assert!(matches!(
            sample_distractors(&store, &"s".into(), &cfg, "p", ""),
            Err(PoolError::InvalidShellConfig(_))
        ));
    }
}
