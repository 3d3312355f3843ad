//! Retrieval metrics over induced ranks.

use super::AnalyticsError;
use crate::embedding::{euclidean, EmbeddingStore};
use crate::game::PoolSpec;
use crate::ids::ImageId;

/// Mean rank (MR). Lower is better.
pub fn mean_rank(ranks: &[u32]) -> Result<f64, AnalyticsError> {
    if ranks.is_empty() {
        return Err(AnalyticsError::EmptyInput);
    }
    let sum: u64 = ranks.iter().map(|&r| u64::from(r)).sum();
    Ok(sum as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank (MRR), in (0, 1]. Higher is better. Differences
/// between small ranks weigh more than between large ones.
pub fn mean_reciprocal_rank(ranks: &[u32]) -> Result<f64, AnalyticsError> {
    if ranks.is_empty() {
        return Err(AnalyticsError::EmptyInput);
    }
    if let Some(&r) = ranks.iter().find(|&&r| r == 0) {
        return Err(AnalyticsError::NonPositiveRank(i64::from(r)));
    }
    let sum: f64 = ranks.iter().map(|&r| 1.0 / f64::from(r)).sum();
    Ok(sum / ranks.len() as f64)
}

/// Estimated rank of the secret after a round: the pool is sorted by
/// embedding distance to the round's guess (the guess itself first, at
/// distance zero; ties by image id) and the secret's 1-based position is
/// returned.
pub fn coarse_round_rank(
    store: &EmbeddingStore,
    pool: &PoolSpec,
    guess_id: &ImageId,
    secret_id: &ImageId,
) -> Result<u32, AnalyticsError> {
    for id in [guess_id, secret_id] {
        if !pool.contains(id) {
            return Err(AnalyticsError::UnknownImage(id.clone()));
        }
    }
    let g = store.require(guess_id)?;
    let d_secret = euclidean(g, store.require(secret_id)?);
    // Count images that sort strictly before the secret.
    let mut ahead = 0u32;
    for id in &pool.image_ids {
        if id == secret_id {
            continue;
        }
        let d = euclidean(g, store.require(id)?);
        if d < d_secret || (d == d_secret && id < secret_id) {
            ahead += 1;
        }
    }
    Ok(ahead + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_1d(points: &[(&str, f32)]) -> EmbeddingStore {
        EmbeddingStore::from_entries(points.iter().map(|(id, x)| (ImageId::from(*id), vec![*x]))).unwrap()
    }

    fn pool(ids: &[&str], secret: &str) -> PoolSpec {
        PoolSpec {
            pool_id: "p".into(),
            secret_id: secret.into(),
            caption: String::new(),
            image_ids: ids.iter().map(|s| ImageId::from(*s)).collect(),
            shell_provenance: None,
        }
    }

    #[test]
    fn mean_rank_examples() {
        assert_eq!(mean_rank(&[5, 9]).unwrap(), 7.0);
        assert_eq!(mean_rank(&[1, 1, 1]).unwrap(), 1.0);
        assert!(matches!(mean_rank(&[]), Err(AnalyticsError::EmptyInput)));
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(mean_reciprocal_rank(&[1, 1]).unwrap(), 1.0);
        assert!((mean_reciprocal_rank(&[1, 2, 4]).unwrap() - 1.75 / 3.0).abs() < 1e-15);
        assert!(matches!(mean_reciprocal_rank(&[3, 0]), Err(AnalyticsError::NonPositiveRank(0))));
        assert!(matches!(mean_reciprocal_rank(&[]), Err(AnalyticsError::EmptyInput)));
    }

    #[test]
    fn mrr_weighs_top_ranks_more() {
        let base = vec![5u32; 10];
        let mut top = base.clone();
        top[0] = 1;
        let mut top2 = base.clone();
        top2[0] = 2;
        let mut low = base.clone();
        low[0] = 19;
        let mut low2 = base;
        low2[0] = 20;
        let d_top = mean_reciprocal_rank(&top).unwrap() - mean_reciprocal_rank(&top2).unwrap();
        let d_low = mean_reciprocal_rank(&low).unwrap() - mean_reciprocal_rank(&low2).unwrap();
        assert!(d_top > d_low);
        // MR treats both moves the same.
        let m = |v: &[u32]| mean_rank(v).unwrap();
        assert!(((m(&top2) - m(&top)) - (m(&low2) - m(&low))).abs() < 1e-12);
    }

    #[test]
    fn coarse_rank_examples() {
        let store = store_1d(&[("g", 0.0), ("a", 1.0), ("b", 2.0), ("secret", 3.0)]);
        let p = pool(&["a", "secret", "g", "b"], "secret");
        assert_eq!(coarse_round_rank(&store, &p, &"g".into(), &"secret".into()).unwrap(), 4);
        assert_eq!(coarse_round_rank(&store, &p, &"secret".into(), &"secret".into()).unwrap(), 1);
    }

    #[test]
    fn coarse_rank_tie_break_by_id() {
        let store = store_1d(&[("g", 0.0), ("m", 1.0), ("z", -1.0), ("a", -1.0)]);
        let p = pool(&["g", "m", "z", "a"], "z");
        // a, m and z all sit at distance 1; z sorts last among them.
        assert_eq!(coarse_round_rank(&store, &p, &"g".into(), &"z".into()).unwrap(), 4);
        let p = pool(&["g", "m", "z", "a"], "a");
        assert_eq!(coarse_round_rank(&store, &p, &"g".into(), &"a".into()).unwrap(), 2);
    }

    #[test]
    fn coarse_rank_errors() {
        let store = store_1d(&[("g", 0.0), ("s", 1.0)]);
        let p = pool(&["g", "s", "x"], "s");
        assert!(matches!(
            coarse_round_rank(&store, &p, &"q".into(), &"s".into()),
            Err(AnalyticsError::UnknownImage(_))
        ));
        assert!(matches!(
            coarse_round_rank(&store, &p, &"g".into(), &"s".into()),
            Err(AnalyticsError::MissingEmbedding(_))
        ));
    }
}
