//! Concept naming: caption each selected feature's most representative clips
//! with an external captioner, then ask an external summarizer for the common
//! concept across those captions.

mod cache;
mod provider;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::{ClipFeatureScore, RepresentativeSet};
use crate::store::ActivationStore;

pub use cache::{default_cache_dir, sha256_hex, ResponseCache, CACHE_DIR_ENV, DEFAULT_CACHE_DIR};
pub use provider::{ClipRef, FileProvider, HttpProvider, MockProvider, Provider, ProviderFailure, ProviderKind};

pub const DEFAULT_CAPTION_PROMPT: &str = "Generate a detailed caption for the audio clip";
pub const DEFAULT_SUMMARY_PROMPT: &str =
    "Describe the common sound-related concept present among these captions";

#[derive(Debug, Error)]
pub enum NamingError {
    #[error("no captions to summarize")]
    EmptyCaptions,
    #[error("provider returned an empty response")]
    EmptyResponse,
    #[error("provider unreachable: {0}")]
    ProviderUnreachable(String),
    #[error("summarization failed: {0}")]
    SummaryFailed(String),
    #[error("feature {0} has no representative set")]
    UnknownFeature(usize),
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub caption_prompt: String,
    pub summary_prompt: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff: Duration,
    /// Concurrent caption requests.
    pub max_in_flight: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            caption_prompt: DEFAULT_CAPTION_PROMPT.into(),
            summary_prompt: DEFAULT_SUMMARY_PROMPT.into(),
            timeout: Duration::from_secs(120),
            max_retries: 2,
            backoff: Duration::from_millis(500),
            max_in_flight: 4,
        }
    }
}

impl ProviderConfig {
    pub fn build_provider(&self) -> Result<Box<dyn Provider>, NamingError> {
        Ok(match &self.kind {
            ProviderKind::Mock => Box::new(MockProvider),
            ProviderKind::File(dir) => Box::new(FileProvider::new(dir)),
            ProviderKind::Http(url) => Box::new(
                HttpProvider::new(url, self.timeout, self.max_retries, self.backoff)
                    .map_err(|e| NamingError::ProviderUnreachable(e.to_string()))?,
            ),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub clip_id: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionFailed {
    pub clip_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaptionBatch {
    /// In input order.
    pub captions: Vec<Caption>,
    pub failures: Vec<CaptionFailed>,
}

/// A named top-C feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub feature: usize,
    pub m_score: f64,
    /// Empty when naming failed; see `error`.
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub captions: Vec<Caption>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub caption_failures: Vec<CaptionFailed>,
    /// Most representative clips, descending by score.
    pub representatives: Vec<ClipFeatureScore>,
    /// Least representative clips, ascending by score.
    pub low_representatives: Vec<ClipFeatureScore>,
}

/// Caption/summarize front end with response caching and call accounting.
pub struct ConceptNamer {
    provider: Box<dyn Provider>,
    caption_prompt: String,
    summary_prompt: String,
    max_in_flight: usize,
    cache: Option<ResponseCache>,
    calls: AtomicUsize,
}

impl ConceptNamer {
    pub fn new(provider: Box<dyn Provider>, config: &ProviderConfig, cache: Option<ResponseCache>) -> Self {
        Self {
            provider,
            caption_prompt: config.caption_prompt.clone(),
            summary_prompt: config.summary_prompt.clone(),
            max_in_flight: config.max_in_flight.max(1),
            cache,
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of requests actually sent to the provider (cache hits excluded).
    pub fn provider_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref().filter(|_| self.provider.cacheable())
    }

    fn caption_one(&self, clip: &ClipRef) -> Result<String, ProviderFailure> {
        let key = ResponseCache::key(&[
            "caption",
            &self.provider.fingerprint(),
            &clip.clip_id,
            &sha256_hex(&self.caption_prompt),
        ]);
        if let Some(hit) = self.cache().and_then(|c| c.get(&key)) {
            return Ok(hit);
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let caption = self.provider.caption(clip, &self.caption_prompt)?;
        let caption = caption.trim().to_string();
        if caption.is_empty() {
            return Err(ProviderFailure::Failed("empty caption".into()));
        }
        if let Some(cache) = self.cache() {
            if let Err(e) = cache.put(&key, "caption", &caption) {
                warn!("cache write failed: {e}");
            }
        }
        Ok(caption)
    }

    /// Caption every clip. Per-clip failures are collected rather than
    /// returned; the call errors only when every clip failed because the
    /// provider could not be reached.
    pub fn caption_clips(&self, clips: &[ClipRef]) -> Result<CaptionBatch, NamingError> {
        let results: Mutex<Vec<Option<Result<String, ProviderFailure>>>> =
            Mutex::new(vec![None; clips.len()]);
        let next = AtomicUsize::new(0);
        let workers = self.max_in_flight.min(clips.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(clip) = clips.get(i) else { break };
                    let r = self.caption_one(clip);
                    results.lock().unwrap()[i] = Some(r);
                });
            }
        });

        let mut batch = CaptionBatch::default();
        let mut unreachable = None;
        let mut unreachable_count = 0;
        for (clip, r) in clips.iter().zip(results.into_inner().unwrap()) {
            match r.expect("every clip is processed") {
                Ok(caption) => batch.captions.push(Caption {
                    clip_id: clip.clip_id.clone(),
                    caption,
                }),
                Err(e) => {
                    warn!("caption failed for {}: {e}", clip.clip_id);
                    if let ProviderFailure::Unreachable(m) = &e {
                        unreachable = Some(m.clone());
                        unreachable_count += 1;
                    }
                    batch.failures.push(CaptionFailed {
                        clip_id: clip.clip_id.clone(),
                        reason: e.to_string(),
                    });
                }
            }
        }
        if !clips.is_empty() && unreachable_count == clips.len() {
            return Err(NamingError::ProviderUnreachable(unreachable.unwrap_or_default()));
        }
        Ok(batch)
    }

    /// One summarize call over all captions; the trimmed response is the name.
    pub fn summarize_concept(&self, feature: Option<usize>, captions: &[String]) -> Result<String, NamingError> {
        if captions.is_empty() {
            return Err(NamingError::EmptyCaptions);
        }
        let key = ResponseCache::key(&[
            "summary",
            &self.provider.fingerprint(),
            &sha256_hex(serde_json::to_string(captions).unwrap_or_default()),
            &sha256_hex(&self.summary_prompt),
        ]);
        if let Some(hit) = self.cache().and_then(|c| c.get(&key)) {
            return Ok(hit);
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = self
            .provider
            .summarize(feature, captions, &self.summary_prompt)
            .map_err(|e| match e {
                ProviderFailure::Unreachable(m) => NamingError::ProviderUnreachable(m),
                ProviderFailure::Failed(m) => NamingError::SummaryFailed(m),
            })?;
        let text = text.trim().to_string();
        if text.is_empty() {
            return Err(NamingError::EmptyResponse);
        }
        if let Some(cache) = self.cache() {
            cache.put(&key, "summary", &text)?;
        }
        Ok(text)
    }

    /// Name each feature in `top` (pairs of feature and monosemanticity
    /// score) from the high set in `sets`. Features whose naming fails are
    /// kept with an empty name and an error message. Output is sorted by score
    /// descending, ties by feature.
    pub fn name_concepts(
        &self,
        top: &[(usize, f64)],
        sets: &[RepresentativeSet],
        store: &ActivationStore,
    ) -> Result<Vec<ConceptRecord>, NamingError> {
        let by_feature: HashMap<usize, &RepresentativeSet> =
            sets.iter().map(|s| (s.feature, s)).collect();
        let mut records = Vec::with_capacity(top.len());
        let mut unreachable = 0;
        for &(feature, m_score) in top {
            let set = by_feature
                .get(&feature)
                .ok_or(NamingError::UnknownFeature(feature))?;
            let clips: Vec<ClipRef> = set
                .high
                .iter()
                .map(|s| ClipRef {
                    clip_id: s.clip_id.clone(),
                    audio_path: store.audio_path(&s.clip_id),
                })
                .collect();
            let mut record = ConceptRecord {
                feature,
                m_score,
                name: String::new(),
                error: None,
                captions: Vec::new(),
                caption_failures: Vec::new(),
                representatives: set.high.clone(),
                low_representatives: set.low.clone(),
            };
            match self.caption_clips(&clips) {
                Ok(batch) => {
                    record.captions = batch.captions;
                    record.caption_failures = batch.failures;
                }
                Err(e) => {
                    unreachable += 1;
                    record.error = Some(e.to_string());
                }
            }
            if record.error.is_none() {
                if record.captions.is_empty() {
                    record.error = Some("every caption failed".into());
                } else {
                    let texts: Vec<String> =
                        record.captions.iter().map(|c| c.caption.clone()).collect();
                    match self.summarize_concept(Some(feature), &texts) {
                        Ok(name) => record.name = name,
                        Err(e) => {
                            if matches!(e, NamingError::ProviderUnreachable(_)) {
                                unreachable += 1;
                            }
                            record.error = Some(e.to_string());
                        }
                    }
                }
            }
            info!("feature {feature}: {:?}", record.name);
            records.push(record);
        }
        if !top.is_empty() && unreachable == top.len() {
            return Err(NamingError::ProviderUnreachable(
                "no feature could be named".into(),
            ));
        }
        records.sort_by(|a, b| {
            b.m_score
                .total_cmp(&a.m_score)
                .then(a.feature.cmp(&b.feature))
        });
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicBool;

    /// Mock that fails captions for chosen clips and can return empty text.
    struct Flaky {
        fail: Vec<String>,
        empty_summary: AtomicBool,
    }

    impl Provider for Flaky {
        fn fingerprint(&self) -> String {
            "flaky".into()
        }
        fn caption(&self, clip: &ClipRef, p: &str) -> Result<String, ProviderFailure> {
            if self.fail.contains(&clip.clip_id) {
                Err(ProviderFailure::Failed("boom".into()))
            } else {
                MockProvider.caption(clip, p)
            }
        }
        fn summarize(&self, f: Option<usize>, c: &[String], p: &str) -> Result<String, ProviderFailure> {
            if self.empty_summary.load(Ordering::SeqCst) {
                Ok("   ".into())
            } else {
                MockProvider.summarize(f, c, p)
            }
        }
    }

    fn clip(id: &str) -> ClipRef {
        ClipRef { clip_id: id.into(), audio_path: None }
    }

    #[test]
    fn default_prompts() {
        let cfg = ProviderConfig::default();
        assert_eq!(cfg.caption_prompt, "Generate a detailed caption for the audio clip");
        assert_eq!(
            cfg.summary_prompt,
            "Describe the common sound-related concept present among these captions"
        );
    }

    #[test]
    fn mock_caption_and_summary() {
        let namer = ConceptNamer::new(Box::new(MockProvider), &ProviderConfig::default(), None);
        let batch = namer.caption_clips(&[clip("a1")]).unwrap();
        assert_eq!(batch.captions, vec![Caption { clip_id: "a1".into(), caption: "mock-caption(a1)".into() }]);
        let name = namer
            .summarize_concept(None, &["dog barking".into(), "dog growling".into()])
            .unwrap();
        assert_eq!(name, "mock-summary(2 captions)");
        assert!(matches!(namer.summarize_concept(None, &[]), Err(NamingError::EmptyCaptions)));
    }

    #[test]
    fn partial_failures_and_empty_response() {
        let flaky = Flaky { fail: vec!["a2".into()], empty_summary: AtomicBool::new(false) };
        let namer = ConceptNamer::new(Box::new(flaky), &ProviderConfig::default(), None);
        let batch = namer
            .caption_clips(&[clip("a1"), clip("a2"), clip("a3"), clip("a4")])
            .unwrap();
        let ids: Vec<_> = batch.captions.iter().map(|c| c.clip_id.as_str()).collect();
        assert_eq!(ids, ["a1", "a3", "a4"]);
        assert_eq!(batch.failures.len(), 1);

        let flaky = Flaky { fail: vec![], empty_summary: AtomicBool::new(true) };
        let namer = ConceptNamer::new(Box::new(flaky), &ProviderConfig::default(), None);
        assert!(matches!(
            namer.summarize_concept(None, &["x".into()]),
            Err(NamingError::EmptyResponse)
        ));
    }

    #[test]
    fn warm_cache_makes_no_calls() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ProviderConfig::default();
        let clips = [clip("a1"), clip("a2")];
        let cold = ConceptNamer::new(Box::new(MockProvider), &cfg, Some(ResponseCache::new(dir.path()).unwrap()));
        let first = cold.caption_clips(&clips).unwrap();
        assert_eq!(cold.provider_calls(), 2);
        let warm = ConceptNamer::new(Box::new(MockProvider), &cfg, Some(ResponseCache::new(dir.path()).unwrap()));
        assert_eq!(warm.caption_clips(&clips).unwrap(), first);
        assert_eq!(warm.provider_calls(), 0);

        // a different prompt is a different cache key
        let other = ProviderConfig { caption_prompt: "Caption this".into(), ..cfg };
        let namer = ConceptNamer::new(Box::new(MockProvider), &other, Some(ResponseCache::new(dir.path()).unwrap()));
        namer.caption_clips(&clips).unwrap();
        assert_eq!(namer.provider_calls(), 2);
    }
}
