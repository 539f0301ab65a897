//! Representative-clip retrieval.
//!
//! Each (clip, feature) pair gets a score `r = mu * c`, where `mu` is the
//! feature's mean latent value over the clip's tokens and `c` the fraction of
//! tokens on which it fires. For every feature the `p` highest-scoring clips
//! form its high set and the `p` lowest its low set.
//!
//! Scores are produced as a stream ordered by clip, with only the features
//! that actually fired in a clip emitted; every other (clip, feature) pair is
//! an implicit zero. Selection keeps two bounded heaps per feature, so memory
//! is `O(d_z * p)` regardless of the number of clips.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sae::{SaeError, SaeModel};
use crate::store::{ActivationStore, StoreError};

/// Default number of representatives per side.
pub const DEFAULT_P: usize = 4;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("empty activation series")]
    EmptySeries,
    #[error("dimension mismatch: model d_x={model}, store d_x={store}")]
    DimensionMismatch { model: usize, store: usize },
    #[error(transparent)]
    Sae(#[from] SaeError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Mean activation, coverage, and their product for one latent series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Representativeness {
    pub mean_activation: f64,
    pub coverage: f64,
    pub score: f64,
}

impl Representativeness {
    pub const ZERO: Self = Self {
        mean_activation: 0.0,
        coverage: 0.0,
        score: 0.0,
    };

    fn from_sums(sum: f64, active: usize, num_tokens: usize) -> Self {
        let t = num_tokens as f64;
        let mean_activation = sum / t;
        let coverage = active as f64 / t;
        Self {
            mean_activation,
            coverage,
            score: mean_activation * coverage,
        }
    }
}

/// Score one feature's series over a clip's tokens.
pub fn representativeness(series: &[f32]) -> Result<Representativeness, RetrievalError> {
    if series.is_empty() {
        return Err(RetrievalError::EmptySeries);
    }
    let sum: f64 = series.iter().map(|&v| v as f64).sum();
    let active = series.iter().filter(|&&v| v > 0.0).count();
    Ok(Representativeness::from_sums(sum, active, series.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipFeatureScore {
    pub clip_id: String,
    pub feature: usize,
    #[serde(rename = "mu")]
    pub mean_activation: f64,
    #[serde(rename = "c")]
    pub coverage: f64,
    #[serde(rename = "r")]
    pub score: f64,
}

impl ClipFeatureScore {
    fn new(clip_id: &str, feature: usize, rep: Representativeness) -> Self {
        Self {
            clip_id: clip_id.to_string(),
            feature,
            mean_activation: rep.mean_activation,
            coverage: rep.coverage,
            score: rep.score,
        }
    }

    fn implicit_zero(clip_id: &str, feature: usize) -> Self {
        Self::new(clip_id, feature, Representativeness::ZERO)
    }
}

/// Scores for every feature that fired at least once in one clip, by feature.
pub fn score_clip(
    model: &SaeModel,
    tensor: &crate::store::ActivationTensor,
) -> Result<Vec<ClipFeatureScore>, RetrievalError> {
    let latent = model.encode(tensor)?;
    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for t in 0..latent.num_tokens() {
        let (idx, vals) = latent.row(t);
        for (&k, &v) in idx.iter().zip(vals) {
            let e = sums.entry(k).or_insert((0.0, 0));
            e.0 += v as f64;
            e.1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(k, (sum, active))| {
            ClipFeatureScore::new(
                &tensor.clip_id,
                k as usize,
                Representativeness::from_sums(sum, active, latent.num_tokens()),
            )
        })
        .collect())
}

/// Streaming scorer over a store: encodes one clip at a time and yields the
/// explicit scores of that clip before moving to the next.
pub struct ScoreStream<'a> {
    model: &'a SaeModel,
    store: &'a ActivationStore,
    next_clip: usize,
    pending: std::vec::IntoIter<ClipFeatureScore>,
    failed: bool,
}

impl Iterator for ScoreStream<'_> {
    type Item = Result<ClipFeatureScore, RetrievalError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(s) = self.pending.next() {
                return Some(Ok(s));
            }
            if self.failed {
                return None;
            }
            let clip = self.store.manifest().clips.get(self.next_clip)?;
            self.next_clip += 1;
            let scored = self
                .store
                .load_activation(&clip.id)
                .map_err(RetrievalError::from)
                .and_then(|x| score_clip(self.model, &x));
            match scored {
                Ok(scores) => self.pending = scores.into_iter(),
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
        }
    }
}

pub fn score_store<'a>(
    model: &'a SaeModel,
    store: &'a ActivationStore,
) -> Result<ScoreStream<'a>, RetrievalError> {
    if store.d_x() != model.d_x() {
        return Err(RetrievalError::DimensionMismatch {
            model: model.d_x(),
            store: store.d_x(),
        });
    }
    Ok(ScoreStream {
        model,
        store,
        next_clip: 0,
        pending: Vec::new().into_iter(),
        failed: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeSet {
    pub feature: usize,
    /// Descending by score, ties by clip id ascending.
    pub high: Vec<ClipFeatureScore>,
    /// Ascending by score, ties by clip id ascending.
    pub low: Vec<ClipFeatureScore>,
    /// Number of clips in which the feature fired at all.
    pub active_clips: usize,
}

/// Order used for the high set: higher score first, then lower clip id.
fn high_order(a: &ClipFeatureScore, b: &ClipFeatureScore) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.clip_id.cmp(&b.clip_id))
}

/// Order used for the low set: lower score first, then lower clip id.
fn low_order(a: &ClipFeatureScore, b: &ClipFeatureScore) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then_with(|| a.clip_id.cmp(&b.clip_id))
}

/// Heap entry whose `Ord` is a selection order; the heap top is the worst
/// retained entry.
struct Ranked<const HIGH: bool>(ClipFeatureScore);

impl<const HIGH: bool> Ranked<HIGH> {
    fn order(a: &ClipFeatureScore, b: &ClipFeatureScore) -> Ordering {
        if HIGH {
            high_order(a, b)
        } else {
            low_order(a, b)
        }
    }
}

impl<const HIGH: bool> PartialEq for Ranked<HIGH> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<const HIGH: bool> Eq for Ranked<HIGH> {}
impl<const HIGH: bool> PartialOrd for Ranked<HIGH> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<const HIGH: bool> Ord for Ranked<HIGH> {
    fn cmp(&self, other: &Self) -> Ordering {
        Self::order(&self.0, &other.0)
    }
}

/// Keeps the `p` best entries under one selection order.
struct BoundedHeap<const HIGH: bool> {
    cap: usize,
    heap: BinaryHeap<Ranked<HIGH>>,
}

impl<const HIGH: bool> BoundedHeap<HIGH> {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            heap: BinaryHeap::with_capacity(cap + 1),
        }
    }

    /// Whether `score`/`clip_id` would enter the heap.
    fn admits(&self, score: f64, clip_id: &str) -> bool {
        if self.heap.len() < self.cap {
            return true;
        }
        let worst = &self.heap.peek().unwrap().0;
        let ord = if HIGH {
            worst.score.total_cmp(&score)
        } else {
            score.total_cmp(&worst.score)
        };
        ord.then_with(|| clip_id.cmp(&worst.clip_id)) == Ordering::Less
    }

    fn offer(&mut self, make: impl FnOnce() -> ClipFeatureScore, score: f64, clip_id: &str) {
        if self.admits(score, clip_id) {
            self.heap.push(Ranked(make()));
            if self.heap.len() > self.cap {
                self.heap.pop();
            }
        }
    }

    fn into_sorted(self) -> Vec<ClipFeatureScore> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|r| r.0)
            .collect()
    }
}

struct FeatureSelection {
    high: BoundedHeap<true>,
    low: BoundedHeap<false>,
    active_clips: usize,
}

/// Per-feature bounded selection of representative clips.
///
/// Feed clips one at a time with [`push_clip`](Self::push_clip); clips that
/// never fired are added as all-zero clips.
pub struct RepresentativeSelector {
    features: Vec<FeatureSelection>,
    seen: HashSet<String>,
}

impl RepresentativeSelector {
    pub fn new(p: usize, d_z: usize) -> Self {
        let p = p.max(1);
        Self {
            features: (0..d_z)
                .map(|_| FeatureSelection {
                    high: BoundedHeap::new(p),
                    low: BoundedHeap::new(p),
                    active_clips: 0,
                })
                .collect(),
            seen: HashSet::new(),
        }
    }

    /// Add one clip. `explicit` holds the clip's scores for the features that
    /// fired, sorted by feature; all other features score 0 for this clip.
    pub fn push_clip(&mut self, clip_id: &str, explicit: &[ClipFeatureScore]) {
        self.seen.insert(clip_id.to_string());
        let mut explicit = explicit.iter().peekable();
        for (k, sel) in self.features.iter_mut().enumerate() {
            match explicit.next_if(|s| s.feature == k) {
                Some(s) => {
                    if s.score > 0.0 {
                        sel.active_clips += 1;
                    }
                    sel.high.offer(|| s.clone(), s.score, clip_id);
                    sel.low.offer(|| s.clone(), s.score, clip_id);
                }
                None => {
                    sel.high
                        .offer(|| ClipFeatureScore::implicit_zero(clip_id, k), 0.0, clip_id);
                    sel.low
                        .offer(|| ClipFeatureScore::implicit_zero(clip_id, k), 0.0, clip_id);
                }
            }
        }
    }

    pub fn finish(mut self, all_clip_ids: &[String]) -> Vec<RepresentativeSet> {
        for id in all_clip_ids {
            if !self.seen.contains(id) {
                self.push_clip(id, &[]);
            }
        }
        self.features
            .into_iter()
            .enumerate()
            .map(|(feature, sel)| RepresentativeSet {
                feature,
                high: sel.high.into_sorted(),
                low: sel.low.into_sorted(),
                active_clips: sel.active_clips,
            })
            .collect()
    }
}

/// Select the high and low representative sets for every feature.
///
/// `scores` must be grouped by clip (as produced by [`score_store`]); features
/// with ids `>= d_z` are ignored. Clips in `all_clip_ids` that never appear in
/// the stream count as scoring 0 on every feature.
pub fn select_representatives<I>(
    scores: I,
    p: usize,
    d_z: usize,
    all_clip_ids: &[String],
) -> Result<Vec<RepresentativeSet>, RetrievalError>
where
    I: IntoIterator<Item = Result<ClipFeatureScore, RetrievalError>>,
{
    let mut selector = RepresentativeSelector::new(p, d_z);
    let mut current: Option<String> = None;
    let mut group: Vec<ClipFeatureScore> = Vec::new();
    let flush = |selector: &mut RepresentativeSelector, id: &str, group: &mut Vec<ClipFeatureScore>| {
        group.sort_by_key(|s| s.feature);
        group.retain(|s| s.feature < d_z);
        selector.push_clip(id, group);
        group.clear();
    };
    for s in scores {
        let s = s?;
        if current.as_deref() != Some(s.clip_id.as_str()) {
            if let Some(id) = current.take() {
                flush(&mut selector, &id, &mut group);
            }
            current = Some(s.clip_id.clone());
        }
        group.push(s);
    }
    if let Some(id) = current.take() {
        flush(&mut selector, &id, &mut group);
    }
    Ok(selector.finish(all_clip_ids))
}
