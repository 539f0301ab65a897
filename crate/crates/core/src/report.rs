//! The pipeline report and expert annotations against it.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::naming::ConceptRecord;
use crate::sae::SaeModel;
use crate::store::StoreManifest;

pub const REPORT_SCHEMA: u32 = 1;
pub const MAX_RATING: i64 = 5;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("unsupported report schema {0}")]
    UnsupportedSchema(u32),
    #[error("concepts are not sorted by m_score descending at index {0}")]
    Unsorted(usize),
    #[error("clip {clip_id:?} of feature {feature} is not in the store manifest")]
    UnknownClip { feature: usize, clip_id: String },
    #[error("annotation references feature {0} which is not in the report")]
    DanglingConceptReference(usize),
    #[error("rating {0} outside 0..=5")]
    InvalidRating(i64),
    #[error("no annotations")]
    NoAnnotations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub d_x: usize,
    pub d_z: usize,
    #[serde(rename = "K")]
    pub topk: usize,
    pub expansion: usize,
    pub layer_tag: String,
}

impl ModelMeta {
    pub fn new(model: &SaeModel, layer_tag: impl Into<String>) -> Self {
        Self {
            d_x: model.d_x(),
            d_z: model.d_z(),
            topk: model.topk(),
            expansion: model.expansion(),
            layer_tag: layer_tag.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema: u32,
    pub toolkit_version: String,
    pub created_at: String,
    pub model_meta: ModelMeta,
    pub concepts: Vec<ConceptRecord>,
}

impl PipelineReport {
    pub fn new(
        toolkit_version: impl Into<String>,
        created_at: impl Into<String>,
        model_meta: ModelMeta,
        mut concepts: Vec<ConceptRecord>,
    ) -> Self {
        concepts.sort_by(|a, b| b.m_score.total_cmp(&a.m_score).then(a.feature.cmp(&b.feature)));
        Self {
            schema: REPORT_SCHEMA,
            toolkit_version: toolkit_version.into(),
            created_at: created_at.into(),
            model_meta,
            concepts,
        }
    }

    pub fn validate(&self, manifest: Option<&StoreManifest>) -> Result<(), ReportError> {
        if self.schema != REPORT_SCHEMA {
            return Err(ReportError::UnsupportedSchema(self.schema));
        }
        if let Some(i) = self
            .concepts
            .windows(2)
            .position(|w| w[0].m_score < w[1].m_score)
        {
            return Err(ReportError::Unsorted(i + 1));
        }
        if let Some(manifest) = manifest {
            let ids: HashSet<&str> = manifest.clips.iter().map(|c| c.id.as_str()).collect();
            for c in &self.concepts {
                let clips = c
                    .representatives
                    .iter()
                    .chain(&c.low_representatives)
                    .map(|s| s.clip_id.as_str())
                    .chain(c.captions.iter().map(|cap| cap.clip_id.as_str()));
                for id in clips {
                    if !ids.contains(id) {
                        return Err(ReportError::UnknownClip {
                            feature: c.feature,
                            clip_id: id.to_string(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn concept(&self, feature: usize) -> Option<&ConceptRecord> {
        self.concepts.iter().find(|c| c.feature == feature)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub concept_feature: usize,
    pub annotator: String,
    pub label: String,
    pub rating: i64,
    /// Assigned by the server on receipt.
    #[serde(default)]
    pub created_at: String,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<(), ReportError> {
        if (0..=MAX_RATING).contains(&self.rating) {
            Ok(())
        } else {
            Err(ReportError::InvalidRating(self.rating))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingStats {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation, 0 for a single rating.
    pub std: f64,
}

impl RatingStats {
    pub fn of(ratings: &[i64]) -> Option<Self> {
        if ratings.is_empty() {
            return None;
        }
        let n = ratings.len() as f64;
        let mean = ratings.iter().map(|&r| r as f64).sum::<f64>() / n;
        let std = if ratings.len() < 2 {
            0.0
        } else {
            let ss: f64 = ratings.iter().map(|&r| (r as f64 - mean).powi(2)).sum();
            (ss / (n - 1.0)).sqrt()
        };
        Some(Self {
            count: ratings.len(),
            mean,
            std,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertLabel {
    pub annotator: String,
    pub label: String,
    pub rating: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptAnnotations {
    pub feature: usize,
    pub generated_name: String,
    pub stats: RatingStats,
    pub expert_labels: Vec<ExpertLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSummary {
    pub count: usize,
    pub mean_rating: f64,
    pub std_rating: f64,
    /// In report order.
    pub per_concept: Vec<ConceptAnnotations>,
}

pub fn annotation_summary(
    annotations: &[AnnotationRecord],
    report: &PipelineReport,
) -> Result<AnnotationSummary, ReportError> {
    let mut by_feature: BTreeMap<usize, Vec<&AnnotationRecord>> = BTreeMap::new();
    for a in annotations {
        a.validate()?;
        if report.concept(a.concept_feature).is_none() {
            return Err(ReportError::DanglingConceptReference(a.concept_feature));
        }
        by_feature.entry(a.concept_feature).or_default().push(a);
    }
    let all: Vec<i64> = annotations.iter().map(|a| a.rating).collect();
    let overall = RatingStats::of(&all).ok_or(ReportError::NoAnnotations)?;
    let per_concept = report
        .concepts
        .iter()
        .filter_map(|c| {
            let recs = by_feature.get(&c.feature)?;
            let ratings: Vec<i64> = recs.iter().map(|a| a.rating).collect();
            Some(ConceptAnnotations {
                feature: c.feature,
                generated_name: c.name.clone(),
                stats: RatingStats::of(&ratings)?,
                expert_labels: recs
                    .iter()
                    .map(|a| ExpertLabel {
                        annotator: a.annotator.clone(),
                        label: a.label.clone(),
                        rating: a.rating,
                    })
                    .collect(),
            })
        })
        .collect();
    Ok(AnnotationSummary {
        count: overall.count,
        mean_rating: overall.mean,
        std_rating: overall.std,
        per_concept,
    })
}

/// Parse a JSON-lines annotation log, skipping blank lines.
pub fn parse_annotation_log(text: &str) -> Result<Vec<AnnotationRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn concept(feature: usize, m: f64) -> ConceptRecord {
        ConceptRecord {
            feature,
            m_score: m,
            name: format!("n{feature}"),
            error: None,
            captions: vec![],
            caption_failures: vec![],
            representatives: vec![],
            low_representatives: vec![],
        }
    }

    fn report() -> PipelineReport {
        let meta = ModelMeta {
            d_x: 4,
            d_z: 16,
            topk: 2,
            expansion: 4,
            layer_tag: "l".into(),
        };
        PipelineReport::new("0", "t", meta, vec![concept(3, 1.0), concept(7, 5.0)])
    }

    fn ann(feature: usize, rating: i64) -> AnnotationRecord {
        AnnotationRecord {
            concept_feature: feature,
            annotator: "x".into(),
            label: "dog barking".into(),
            rating,
            created_at: String::new(),
        }
    }

    #[test]
    fn sorted_on_construction() {
        let r = report();
        assert_eq!(r.concepts[0].feature, 7);
        assert_eq!(r.schema, 1);
        r.validate(None).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["model_meta"]["K"], 2);
    }

    #[test]
    fn summary_stats() {
        let s = annotation_summary(&[ann(7, 4), ann(7, 5), ann(3, 4)], &report()).unwrap();
        assert!((s.mean_rating - 13.0 / 3.0).abs() < 1e-12);
        assert!((s.std_rating - 0.57735).abs() < 1e-4);
        assert_eq!(s.per_concept[0].feature, 7);
        assert_eq!(s.per_concept[0].stats.count, 2);
        assert_eq!(s.per_concept[0].generated_name, "n7");
        let single = annotation_summary(&[ann(3, 3)], &report()).unwrap();
        assert_eq!((single.mean_rating, single.std_rating), (3.0, 0.0));
    }

    #[test]
    fn summary_errors() {
        assert_eq!(
            annotation_summary(&[ann(9, 4)], &report()),
            Err(ReportError::DanglingConceptReference(9))
        );
        assert_eq!(annotation_summary(&[ann(7, 6)], &report()), Err(ReportError::InvalidRating(6)));
        assert_eq!(annotation_summary(&[], &report()), Err(ReportError::NoAnnotations));
    }

    #[test]
    fn log_parsing() {
        let line = serde_json::to_string(&ann(7, 4)).unwrap();
        let recs = parse_annotation_log(&format!("{line}\n\n{line}\n")).unwrap();
        assert_eq!(recs.len(), 2);
        let no_ts: AnnotationRecord =
            serde_json::from_str(r#"{"concept_feature":1,"annotator":"a","label":"b","rating":2}"#).unwrap();
        assert_eq!(no_ts.created_at, "");
    }
}
