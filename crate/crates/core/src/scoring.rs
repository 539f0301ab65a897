//! Monosemanticity scoring of features from the embeddings of their
//! representative clips.

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::RepresentativeSet;
use crate::store::{ActivationStore, StoreError};

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_TOP_C: usize = 5000;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("embedding has zero norm")]
    ZeroNormEmbedding,
    #[error("embedding dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("coherence needs at least 2 embeddings, got {0}")]
    InsufficientSamples(usize),
    #[error("invalid ranking config: {0}")]
    InvalidConfig(String),
}

/// Cosine similarity in f64, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64, ScoringError> {
    if a.len() != b.len() {
        return Err(ScoringError::DimensionMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(ScoringError::ZeroNormEmbedding);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean and sample standard deviation of the pairwise similarities in a set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceStats {
    pub mean: f64,
    pub std: f64,
    pub pair_count: usize,
}

pub fn coherence<E: AsRef<[f32]>>(set: &[E]) -> Result<CoherenceStats, ScoringError> {
    let p = set.len();
    if p < 2 {
        return Err(ScoringError::InsufficientSamples(p));
    }
    let mut sims = Vec::with_capacity(p * (p - 1) / 2);
    for i in 0..p {
        for j in i + 1..p {
            sims.push(cosine_similarity(set[i].as_ref(), set[j].as_ref())?);
        }
    }
    let b = sims.len();
    let mean = sims.iter().sum::<f64>() / b as f64;
    let std = if b >= 2 {
        let ss: f64 = sims.iter().map(|s| (s - mean).powi(2)).sum();
        (ss / (b - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(CoherenceStats {
        mean,
        std,
        pair_count: b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonosemanticityResult {
    pub feature: usize,
    pub m_score: f64,
    pub high_stats: CoherenceStats,
    pub low_stats: CoherenceStats,
    pub epsilon: f64,
}

/// `(E_H - E_L) / (sqrt((s_H^2 + s_L^2) / 2) + eps)`.
pub fn monosemanticity_from_stats(
    feature: usize,
    high_stats: CoherenceStats,
    low_stats: CoherenceStats,
    epsilon: f64,
) -> MonosemanticityResult {
    let pooled = ((high_stats.std.powi(2) + low_stats.std.powi(2)) / 2.0).sqrt();
    MonosemanticityResult {
        feature,
        m_score: (high_stats.mean - low_stats.mean) / (pooled + epsilon),
        high_stats,
        low_stats,
        epsilon,
    }
}

pub fn monosemanticity<E: AsRef<[f32]>>(
    feature: usize,
    high: &[E],
    low: &[E],
    epsilon: f64,
) -> Result<MonosemanticityResult, ScoringError> {
    Ok(monosemanticity_from_stats(
        feature,
        coherence(high)?,
        coherence(low)?,
        epsilon,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingConfig {
    pub top_c: usize,
    pub epsilon: f64,
}

impl Default for RankingConfig {
    fn default() -> Self {
        Self {
            top_c: DEFAULT_TOP_C,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl RankingConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if self.top_c == 0 {
            return Err(ScoringError::InvalidConfig("top_c must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(ScoringError::InvalidConfig("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Sort by score descending (ties by feature ascending) and keep the top C.
pub fn rank_features(
    mut results: Vec<MonosemanticityResult>,
    config: &RankingConfig,
) -> Vec<MonosemanticityResult> {
    results.sort_by(|a, b| {
        b.m_score
            .total_cmp(&a.m_score)
            .then(a.feature.cmp(&b.feature))
    });
    results.truncate(config.top_c);
    results
}

/// Score every feature that fired in at least one clip, using the clip
/// embeddings stored under `emb/<clip_id>.emb`.
///
/// Clips without an embedding are dropped from a set; features left with
/// fewer than two embedded clips on either side are skipped with a warning.
pub fn score_features(
    sets: &[RepresentativeSet],
    store: &ActivationStore,
    epsilon: f64,
) -> Result<Vec<MonosemanticityResult>, StoreError> {
    let mut cache: HashMap<String, Option<Vec<f32>>> = HashMap::new();
    let mut lookup = |id: &str| -> Result<Option<Vec<f32>>, StoreError> {
        if let Some(e) = cache.get(id) {
            return Ok(e.clone());
        }
        let e = if store.has_embedding(id) {
            Some(store.load_embedding(id)?.values)
        } else {
            None
        };
        cache.insert(id.to_string(), e.clone());
        Ok(e)
    };
    let mut out = Vec::new();
    for set in sets.iter().filter(|s| s.active_clips > 0) {
        let mut high = Vec::with_capacity(set.high.len());
        for s in &set.high {
            high.extend(lookup(&s.clip_id)?);
        }
        let mut low = Vec::with_capacity(set.low.len());
        for s in &set.low {
            low.extend(lookup(&s.clip_id)?);
        }
        if high.len() < 2 || low.len() < 2 {
            warn!(
                "feature {}: {} high / {} low clips with embeddings, skipped",
                set.feature,
                high.len(),
                low.len()
            );
            continue;
        }
        match monosemanticity(set.feature, &high, &low, epsilon) {
            Ok(r) => out.push(r),
            Err(e) => warn!("feature {}: {e}, skipped", set.feature),
        }
    }
    Ok(out)
}

/// Row of `monosemanticity.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonosemanticityRow {
    pub feature: usize,
    pub m: f64,
    pub e_h: f64,
    pub e_l: f64,
    pub sigma_h: f64,
    pub sigma_l: f64,
}

impl From<&MonosemanticityResult> for MonosemanticityRow {
    fn from(r: &MonosemanticityResult) -> Self {
        Self {
            feature: r.feature,
            m: r.m_score,
            e_h: r.high_stats.mean,
            e_l: r.low_stats.mean,
            sigma_h: r.high_stats.std,
            sigma_l: r.low_stats.std,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: f64, std: f64) -> CoherenceStats {
        CoherenceStats {
            mean,
            std,
            pair_count: 6,
        }
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[0.6, 0.8], &[0.6, 0.8]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-4);
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(ScoringError::ZeroNormEmbedding)
        );
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn coherence_cases() {
        let c = coherence(&[[0.6f32, 0.8], [0.6, 0.8]]).unwrap();
        assert!((c.mean - 1.0).abs() < 1e-12);
        assert_eq!((c.std, c.pair_count), (0.0, 1));

        let e1 = [1.0f32, 0.0];
        let e2 = [0.0f32, 1.0];
        let c = coherence(&[e1, e1, e2]).unwrap();
        assert_eq!(c.pair_count, 3);
        assert!((c.mean - 1.0 / 3.0).abs() < 1e-12);
        // sample std of {1, 0, 0}
        assert!((c.std - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);

        assert_eq!(
            coherence(&[[1.0f32, 0.0]]),
            Err(ScoringError::InsufficientSamples(1))
        );
    }

    #[test]
    fn coherence_is_permutation_invariant() {
        let set = [[1.0f32, 0.2, 0.0], [0.3, 1.0, 0.1], [0.0, 0.4, 1.0], [0.5, 0.5, 0.5]];
        let a = coherence(&set).unwrap();
        let b = coherence(&[set[2], set[0], set[3], set[1]]).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-12);
        assert!((a.std - b.std).abs() < 1e-12);
    }

    #[test]
    fn monosemanticity_formula() {
        let r = monosemanticity_from_stats(0, stats(0.9, 0.05), stats(0.1, 0.05), 1e-8);
        let expected = 0.8 / (0.05 + 1e-8);
        assert!((r.m_score - expected).abs() < 1e-9);
        assert!((r.m_score - 16.0).abs() < 1e-4);

        let r = monosemanticity_from_stats(0, stats(1.0, 0.0), stats(0.0, 0.0), 1e-8);
        assert!((r.m_score - 1e8).abs() < 1e-3);
    }

    #[test]
    fn identical_sets_score_zero() {
        let set = [[1.0f32, 0.0], [0.7, 0.7], [0.0, 1.0]];
        let r = monosemanticity(1, &set, &set, DEFAULT_EPSILON).unwrap();
        assert_eq!(r.m_score, 0.0);
    }

    #[test]
    fn ranking_ties_and_truncation() {
        let mk = |feature, m_score| monosemanticity_from_stats(feature, stats(m_score, 0.0), stats(0.0, 0.0), 1.0);
        let results = vec![mk(1, 2.0), mk(2, 5.0), mk(3, 5.0)];
        let cfg = RankingConfig { top_c: 2, epsilon: 1.0 };
        let top: Vec<_> = rank_features(results.clone(), &cfg).iter().map(|r| r.feature).collect();
        assert_eq!(top, [2, 3]);
        let cfg = RankingConfig { top_c: 10, epsilon: 1.0 };
        let top: Vec<_> = rank_features(results, &cfg).iter().map(|r| r.feature).collect();
        assert_eq!(top, [2, 3, 1]);
    }

    #[test]
    fn ranking_matches_full_sort_prefix() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100);
        let results: Vec<_> = (0..100)
            .map(|f| {
                let m: f64 = rng.random_range(-5.0..5.0);
                monosemanticity_from_stats(f, stats(m, 0.0), stats(0.0, 0.0), 1.0)
            })
            .collect();
        let mut oracle: Vec<(f64, usize)> = results.iter().map(|r| (r.m_score, r.feature)).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let top: Vec<usize> = rank_features(results, &RankingConfig { top_c: 10, epsilon: 1.0 })
            .iter()
            .map(|r| r.feature)
            .collect();
        let expected: Vec<usize> = oracle.iter().take(10).map(|o| o.1).collect();
        assert_eq!(top, expected);
    }
}
