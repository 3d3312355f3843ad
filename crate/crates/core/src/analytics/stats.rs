//! Percentile bootstrap intervals and the Mann-Whitney U test.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::AnalyticsError;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub resamples: usize,
    pub level: f64,
}

/// Percentile bootstrap interval for the mean.
///
/// Draws `resamples` resamples of `values` with replacement, sorts their
/// means and returns the order statistics at `k` and `B - 1 - k`, with
/// `k = round(B * (1 - level) / 2)`. The point estimate is the sample mean.
/// Fully determined by `seed`.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<BootstrapCi, AnalyticsError> {
    if values.len() < 2 {
        return Err(AnalyticsError::TooFewSamples {
            need: 2,
            got: values.len(),
        });
    }
    if resamples == 0 {
        return Err(AnalyticsError::InvalidParameter("resamples must be positive".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(AnalyticsError::InvalidParameter(format!("level {level} not in (0, 1)")));
    }
    let n = values.len();
    let mut rng = seed::rng(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            let sum: f64 = (0..n).map(|_| values[rng.random_range(0..n)]).sum();
            sum / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let k = ((resamples as f64) * (1.0 - level) / 2.0).round() as usize;
    let k = k.min((resamples - 1) / 2);
    Ok(BootstrapCi {
        point: values.iter().sum::<f64>() / n as f64,
        lo: means[k],
        hi: means[resamples - 1 - k],
        resamples,
        level,
    })
}

/// Largest `|a| + |b|` for which the p-value is computed by exact
/// enumeration of all group assignments; larger samples use the normal
/// approximation.
pub const EXACT_MAX_TOTAL: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MwMethod {
    /// Permutation distribution of U over the pooled midranks.
    Exact,
    /// Normal approximation with tie and continuity corrections.
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    pub u_a: f64,
    pub u_b: f64,
    pub p_two_sided: f64,
    pub method: MwMethod,
}

/// Midranks (1-based) of the pooled sample, in input order.
fn midranks(pooled: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && pooled[order[j]] == pooled[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    (ranks, tie_term)
}

/// Two-sided Mann-Whitney U test.
///
/// `U_a` counts pairs `(x in a, y in b)` with `x > y`, ties counting one
/// half, via rank sums with midranks; `U_a + U_b = |a||b|`. The p-value is
/// exact when `|a| + |b| <= EXACT_MAX_TOTAL` and otherwise uses the normal
/// approximation with tie and continuity corrections. Symmetric in `a`, `b`.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney, AnalyticsError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalyticsError::EmptyInput);
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(AnalyticsError::InvalidParameter("NaN in sample".into()));
    }
    let na = a.len();
    let nb = b.len();
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, tie_term) = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u_a = rank_sum_a - (na * (na + 1)) as f64 / 2.0;
    let nanb = (na * nb) as f64;
    let u_b = nanb - u_a;
    let mean = nanb / 2.0;

    let (p, method) = if na + nb <= EXACT_MAX_TOTAL {
        (exact_p(&ranks, na, u_a), MwMethod::Exact)
    } else {
        let n = (na + nb) as f64;
        let var = nanb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
        let p = if var <= 0.0 {
            1.0
        } else {
            let z = ((u_a - mean).abs() - 0.5).max(0.0) / var.sqrt();
            erfc(z / std::f64::consts::SQRT_2).min(1.0)
        };
        (p, MwMethod::Normal)
    };
    Ok(MannWhitney {
        u_a,
        u_b,
        p_two_sided: p,
        method,
    })
}

/// Fraction of the `C(N, na)` assignments of pooled midranks to group a
/// whose U is at least as far from the mean as the observed one.
fn exact_p(ranks: &[f64], na: usize, u_obs: f64) -> f64 {
    let n = ranks.len();
    let mean = (na * (n - na)) as f64 / 2.0;
    let observed = (u_obs - mean).abs();
    let offset = (na * (na + 1)) as f64 / 2.0;
    let mut hits = 0u64;
    let mut total = 0u64;
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        total += 1;
        let rs: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        // Midranks are multiples of 1/2, so these sums are exact.
        if (rs - offset - mean).abs() >= observed {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}
