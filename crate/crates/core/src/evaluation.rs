//! Matching predicted concept names to reference labels and scoring the match.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{cosine_similarity, ScoringError};
use crate::store::SemanticEmbedding;

pub const DEFAULT_GAMMA: f64 = 0.7;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("embedding {0:?} has zero norm")]
    ZeroNormEmbedding(String),
    #[error("embedding {id:?} has dimension {actual}, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error("no monosemanticity results")]
    EmptyResults,
    #[error("empty similarity matrix")]
    EmptyMatrix,
    #[error("gamma must lie in (0, 1], got {0}")]
    InvalidGamma(f64),
    #[error("similarity matrix: {0}")]
    Shape(String),
}

/// Row-major cosine similarities, predictions by rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub num_predictions: usize,
    pub num_references: usize,
    pub values: Vec<f64>,
    pub pred_ids: Vec<String>,
    pub ref_ids: Vec<String>,
}

impl SimilarityMatrix {
    /// Matrix with generated ids `p<i>` / `r<j>`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, EvalError> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(EvalError::Shape("ragged rows".into()));
        }
        Self::new(
            (0..n).map(|i| format!("p{i}")).collect(),
            (0..m).map(|j| format!("r{j}")).collect(),
            rows.concat(),
        )
    }

    pub fn new(pred_ids: Vec<String>, ref_ids: Vec<String>, values: Vec<f64>) -> Result<Self, EvalError> {
        if values.len() != pred_ids.len() * ref_ids.len() {
            return Err(EvalError::Shape(format!(
                "{} values for {}x{}",
                values.len(),
                pred_ids.len(),
                ref_ids.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(EvalError::Shape(format!("non-finite entry {v}")));
        }
        Ok(Self {
            num_predictions: pred_ids.len(),
            num_references: ref_ids.len(),
            values,
            pred_ids,
            ref_ids,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.num_references + j]
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn build_similarity(
    preds: &[SemanticEmbedding],
    refs: &[SemanticEmbedding],
) -> Result<SimilarityMatrix, EvalError> {
    let dim = preds.first().or(refs.first()).map_or(0, SemanticEmbedding::dim);
    for e in preds.iter().chain(refs) {
        if e.dim() != dim {
            return Err(EvalError::DimensionMismatch {
                id: e.id.clone(),
                expected: dim,
                actual: e.dim(),
            });
        }
        if e.norm() == 0.0 {
            return Err(EvalError::ZeroNormEmbedding(e.id.clone()));
        }
    }
    let mut values = Vec::with_capacity(preds.len() * refs.len());
    for p in preds {
        for r in refs {
            values.push(cosine_similarity(&p.values, &r.values).map_err(|e| match e {
                ScoringError::ZeroNormEmbedding => EvalError::ZeroNormEmbedding(p.id.clone()),
                other => EvalError::Shape(other.to_string()),
            })?);
        }
    }
    SimilarityMatrix::new(
        preds.iter().map(|e| e.id.clone()).collect(),
        refs.iter().map(|e| e.id.clone()).collect(),
        values,
    )
}

/// Maximum-weight assignment of `min(rows, cols)` pairs, sorted by row.
///
/// Shortest augmenting path with potentials, O(n²m) for n ≤ m. A matrix with
/// more rows than columns is solved transposed.
pub fn hungarian_match(matrix: &SimilarityMatrix) -> Result<Vec<(usize, usize)>, EvalError> {
    if matrix.is_empty() {
        return Err(EvalError::EmptyMatrix);
    }
    let (rows, cols) = (matrix.num_predictions, matrix.num_references);
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    // cost to minimize, 1-based with a sentinel column 0
    let cost = |i: usize, j: usize| {
        if transposed {
            -matrix.get(j - 1, i - 1)
        } else {
            -matrix.get(i - 1, j - 1)
        }
    };

    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (i, j) = (owner[j] - 1, j - 1);
            if transposed {
                (j, i)
            } else {
                (i, j)
            }
        })
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

pub fn assignment_total(matrix: &SimilarityMatrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| matrix.get(i, j)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub gamma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { gamma: DEFAULT_GAMMA }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.gamma > 0.0 && self.gamma <= 1.0 {
            Ok(())
        } else {
            Err(EvalError::InvalidGamma(self.gamma))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred_id: String,
    pub ref_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn relevant<'a>(
    matrix: &'a SimilarityMatrix,
    assignment: &'a [(usize, usize)],
    config: &EvalConfig,
) -> impl Iterator<Item = (usize, usize)> + 'a {
    let gamma = config.gamma;
    assignment
        .iter()
        .copied()
        .filter(move |&(i, j)| matrix.get(i, j) >= gamma)
}

pub fn precision_recall_f1(
    matrix: &SimilarityMatrix,
    assignment: &[(usize, usize)],
    config: &EvalConfig,
) -> (PrecisionRecall, Vec<MatchedPair>) {
    let matched: Vec<MatchedPair> = relevant(matrix, assignment, config)
        .map(|(i, j)| MatchedPair {
            pred_id: matrix.pred_ids[i].clone(),
            ref_id: matrix.ref_ids[j].clone(),
            similarity: matrix.get(i, j),
        })
        .collect();
    let ratio = |den: usize| if den == 0 { 0.0 } else { matched.len() as f64 / den as f64 };
    let precision = ratio(matrix.num_predictions);
    let recall = ratio(matrix.num_references);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (PrecisionRecall { precision, recall, f1 }, matched)
}

/// Average precision of a single ranking of every (row, col) pair by
/// similarity, where the relevant pairs are the assigned ones at or above γ.
pub fn mean_average_precision(
    matrix: &SimilarityMatrix,
    assignment: &[(usize, usize)],
    config: &EvalConfig,
) -> f64 {
    let m = matrix.num_references;
    let mut is_relevant = vec![false; matrix.values.len()];
    let mut total = 0usize;
    for (i, j) in relevant(matrix, assignment, config) {
        is_relevant[i * m + j] = true;
        total += 1;
    }
    if total == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..matrix.values.len()).collect();
    // flat index order is (row, col) lexicographic
    order.sort_by(|&a, &b| matrix.values[b].total_cmp(&matrix.values[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if is_relevant[idx] {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
            if hits == total {
                break;
            }
        }
    }
    sum / total as f64
}

pub fn ms_summary(scores: impl IntoIterator<Item = f64>) -> Result<f64, EvalError> {
    scores
        .into_iter()
        .reduce(f64::max)
        .ok_or(EvalError::EmptyResults)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ms: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map: f64,
    pub gamma: f64,
    pub matched_pairs: Vec<MatchedPair>,
}

/// Match, then compute every metric. `ms` is taken from `m_scores`.
pub fn evaluate(
    matrix: &SimilarityMatrix,
    m_scores: impl IntoIterator<Item = f64>,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    config.validate()?;
    let ms = ms_summary(m_scores)?;
    let assignment = hungarian_match(matrix)?;
    let (pr, matched_pairs) = precision_recall_f1(matrix, &assignment, config);
    Ok(EvalReport {
        ms,
        precision: pr.precision,
        recall: pr.recall,
        f1: pr.f1,
        map: mean_average_precision(matrix, &assignment, config),
        gamma: config.gamma,
        matched_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> SimilarityMatrix {
        SimilarityMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Best total over all injections of the smaller side into the larger.
    fn brute_force(m: &SimilarityMatrix) -> f64 {
        fn go(m: &SimilarityMatrix, t: bool, i: usize, used: &mut Vec<bool>) -> f64 {
            let (n, k) = if t {
                (m.num_references, m.num_predictions)
            } else {
                (m.num_predictions, m.num_references)
            };
            if i == n {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for j in 0..k {
                if !used[j] {
                    used[j] = true;
                    let s = if t { m.get(j, i) } else { m.get(i, j) };
                    best = best.max(s + go(m, t, i + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        let t = m.num_predictions > m.num_references;
        let k = m.num_predictions.max(m.num_references);
        go(m, t, 0, &mut vec![false; k])
    }

    #[test]
    fn square_example() {
        let m = mat(&[&[0.9, 0.2], &[0.3, 0.8]]);
        let a = hungarian_match(&m).unwrap();
        assert_eq!(a, vec![(0, 0), (1, 1)]);
        assert!((assignment_total(&m, &a) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn rectangular_examples() {
        let m = mat(&[&[0.1, 0.9, 0.2], &[0.8, 0.7, 0.3]]);
        let a = hungarian_match(&m).unwrap();
        assert_eq!(a, vec![(0, 1), (1, 0)]);
        assert!((assignment_total(&m, &a) - 1.7).abs() < 1e-12);

        let t = mat(&[&[0.1, 0.8], &[0.9, 0.7], &[0.2, 0.3]]);
        assert_eq!(hungarian_match(&t).unwrap(), vec![(0, 1), (1, 0)]);
        assert_eq!(hungarian_match(&mat(&[&[0.5]])).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn empty_matrix() {
        let m = SimilarityMatrix::new(vec![], vec!["r".into()], vec![]).unwrap();
        assert_eq!(hungarian_match(&m), Err(EvalError::EmptyMatrix));
    }

    #[test]
    fn prf_hand_case() {
        // assigned sims 0.9, 0.75, 0.4 on a 3x4 matrix
        let m = mat(&[
            &[0.9, 0.1, 0.0, 0.0],
            &[0.1, 0.75, 0.0, 0.0],
            &[0.0, 0.0, 0.4, 0.1],
        ]);
        let a = hungarian_match(&m).unwrap();
        assert_eq!(a, vec![(0, 0), (1, 1), (2, 2)]);
        let (pr, matched) = precision_recall_f1(&m, &a, &EvalConfig::default());
        assert!((pr.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((pr.recall - 0.5).abs() < 1e-12);
        assert!((pr.f1 - 0.5714).abs() < 1e-4);
        assert_eq!(matched.len(), 2);
        assert_eq!(matched[1].ref_id, "r1");
    }

    #[test]
    fn prf_degenerate() {
        let m = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = hungarian_match(&m).unwrap();
        let (pr, _) = precision_recall_f1(&m, &a, &EvalConfig::default());
        assert_eq!((pr.precision, pr.recall, pr.f1), (1.0, 1.0, 1.0));
        let low = mat(&[&[0.2, 0.1], &[0.3, 0.6]]);
        let a = hungarian_match(&low).unwrap();
        let (pr, matched) = precision_recall_f1(&low, &a, &EvalConfig::default());
        assert_eq!((pr.precision, pr.recall, pr.f1), (0.0, 0.0, 0.0));
        assert!(matched.is_empty());
        assert_eq!(mean_average_precision(&low, &a, &EvalConfig::default()), 0.0);
    }

    #[test]
    fn map_hand_cases() {
        let cfg = EvalConfig::default();
        let m = mat(&[&[0.9, 0.6], &[0.5, 0.8]]);
        let a = hungarian_match(&m).unwrap();
        assert!((mean_average_precision(&m, &a, &cfg) - 1.0).abs() < 1e-12);

        let m = mat(&[&[0.9, 0.85], &[0.2, 0.8]]);
        let a = hungarian_match(&m).unwrap();
        assert_eq!(a, vec![(0, 0), (1, 1)]);
        assert!((mean_average_precision(&m, &a, &cfg) - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn ms_cases() {
        assert_eq!(ms_summary([1.0, 9.31, 4.0]).unwrap(), 9.31);
        assert_eq!(ms_summary([2.5]).unwrap(), 2.5);
        assert_eq!(ms_summary([-2.0, -1.0]).unwrap(), -1.0);
        assert_eq!(ms_summary([]), Err(EvalError::EmptyResults));
    }

    #[test]
    fn similarity_cases() {
        let a = SemanticEmbedding::new("a", vec![1.0, 0.0]);
        let b = SemanticEmbedding::new("b", vec![0.0, 2.0]);
        let s = build_similarity(&[a.clone(), b.clone()], &[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.values, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(s.pred_ids, vec!["a", "b"]);
        let z = SemanticEmbedding::new("z", vec![0.0, 0.0]);
        assert_eq!(build_similarity(&[a.clone()], &[z]), Err(EvalError::ZeroNormEmbedding("z".into())));
        let c = SemanticEmbedding::new("c", vec![1.0, 0.0, 0.0]);
        assert!(matches!(build_similarity(&[a], &[c]), Err(EvalError::DimensionMismatch { .. })));
    }

    #[test]
    fn gamma_validation() {
        assert!(EvalConfig { gamma: 0.0 }.validate().is_err());
        assert!(EvalConfig { gamma: 1.0 }.validate().is_ok());
        assert!(EvalConfig { gamma: 1.5 }.validate().is_err());
    }

    fn arb_matrix() -> impl Strategy<Value = SimilarityMatrix> {
        (1usize..=6, 1usize..=6).prop_flat_map(|(n, m)| {
            proptest::collection::vec(-1.0f64..1.0, n * m).prop_map(move |v| {
                SimilarityMatrix::new(
                    (0..n).map(|i| format!("p{i}")).collect(),
                    (0..m).map(|j| format!("r{j}")).collect(),
                    v,
                )
                .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn optimal_and_one_to_one(m in arb_matrix()) {
            let a = hungarian_match(&m).unwrap();
            prop_assert_eq!(a.len(), m.num_predictions.min(m.num_references));
            let mut rows: Vec<_> = a.iter().map(|p| p.0).collect();
            let mut cols: Vec<_> = a.iter().map(|p| p.1).collect();
            rows.dedup();
            cols.sort();
            cols.dedup();
            prop_assert_eq!(rows.len(), a.len());
            prop_assert_eq!(cols.len(), a.len());
            prop_assert!((assignment_total(&m, &a) - brute_force(&m)).abs() < 1e-9);
        }

        #[test]
        fn metrics_bounded_and_monotone(m in arb_matrix(), g1 in 0.01f64..1.0, g2 in 0.01f64..1.0) {
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let a = hungarian_match(&m).unwrap();
            let (p_lo, m_lo) = precision_recall_f1(&m, &a, &EvalConfig { gamma: lo });
            let (p_hi, m_hi) = precision_recall_f1(&m, &a, &EvalConfig { gamma: hi });
            prop_assert!(m_hi.len() <= m_lo.len());
            prop_assert!(p_hi.precision <= p_lo.precision && p_hi.recall <= p_lo.recall);
            for p in [p_lo, p_hi] {
                prop_assert!((0.0..=1.0).contains(&p.precision));
                prop_assert!((0.0..=1.0).contains(&p.recall));
                prop_assert!((0.0..=1.0).contains(&p.f1));
            }
            prop_assert_eq!(p_lo.f1 == 0.0, m_lo.is_empty());
            let ap = mean_average_precision(&m, &a, &EvalConfig { gamma: lo });
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }
}
