//! Feature steering and the sensitivity metric.
//!
//! Steering overwrites one feature's pre-activation with a fixed value on
//! every token, re-applies TopK, and decodes. The result replaces the layer
//! output for whatever runs downstream; that model execution and the judging
//! of its outputs happen outside this crate.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sae::{topk_sparse, LatentActivations, SaeError, SaeModel};
use crate::store::{ActivationStore, ActivationTensor, StoreError};

#[derive(Debug, Error)]
pub enum SteeringError {
    #[error("feature {feature} out of range for d_z={d_z}")]
    FeatureOutOfRange { feature: usize, d_z: usize },
    #[error("invalid steering value {0}: must be finite and >= 0")]
    InvalidValue(f64),
    #[error("no outcome rows")]
    EmptyRows,
    #[error("no rows with baseline label {0:?}")]
    NoSourceSamples(String),
    #[error(transparent)]
    Sae(#[from] SaeError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringSpec {
    pub feature: usize,
    /// Replacement pre-activation, in latent units.
    pub value: f64,
}

impl SteeringSpec {
    fn validate(&self, model: &SaeModel) -> Result<(), SteeringError> {
        if self.feature >= model.d_z() {
            return Err(SteeringError::FeatureOutOfRange {
                feature: self.feature,
                d_z: model.d_z(),
            });
        }
        if !(self.value.is_finite() && self.value >= 0.0) {
            return Err(SteeringError::InvalidValue(self.value));
        }
        Ok(())
    }
}

/// Steered latent codes for every token of `x`.
pub fn steer_latents(
    model: &SaeModel,
    x: &ActivationTensor,
    spec: &SteeringSpec,
) -> Result<LatentActivations, SteeringError> {
    spec.validate(model)?;
    if x.width != model.d_x() {
        return Err(SaeError::DimensionMismatch {
            expected: model.d_x(),
            actual: x.width,
        }
        .into());
    }
    let mut out = LatentActivations::with_capacity(x.num_tokens, model.d_z(), model.topk());
    let mut pre = Vec::with_capacity(model.d_z());
    let mut scratch = Vec::with_capacity(model.d_z());
    for row in x.rows() {
        model.preactivations_into(row, &mut pre);
        pre[spec.feature] = spec.value;
        let support = topk_sparse(&pre, model.topk(), &mut scratch);
        out.push_row(support.into_iter().map(|(k, v)| (k as u32, v as f32)));
    }
    Ok(out)
}

/// Steer then decode: the activations to feed back in place of `x`.
pub fn steer_activations(
    model: &SaeModel,
    x: &ActivationTensor,
    spec: &SteeringSpec,
) -> Result<ActivationTensor, SteeringError> {
    let z = steer_latents(model, x, spec)?;
    let mut out = model.decode(&z)?;
    out.clip_id = x.clip_id.clone();
    Ok(out)
}

/// Write a new store at `out_path` holding the steered activations of every
/// clip in `store`. Manifest entries are copied unchanged; clip embeddings and
/// audio are not.
pub fn export_steered_store(
    model: &SaeModel,
    store: &ActivationStore,
    spec: &SteeringSpec,
    out_path: impl AsRef<Path>,
) -> Result<ActivationStore, SteeringError> {
    spec.validate(model)?;
    let mut manifest = store.manifest().clone();
    manifest.layer_tag = format!(
        "{}+steer(f{}={})",
        manifest.layer_tag, spec.feature, spec.value
    );
    let out = ActivationStore::create(out_path, manifest)?;
    for id in store.clip_ids() {
        let x = store.load_activation(id)?;
        out.write_activation(&steer_activations(model, &x, spec)?)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteeringOutcomeRow {
    pub sample_id: String,
    pub baseline_label: String,
    pub steered_label: String,
    pub source_label: String,
    pub target_label: String,
}

/// One line of the judged-labels CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgedLabel {
    pub sample_id: String,
    pub baseline_label: String,
    pub steered_label: String,
}

impl JudgedLabel {
    pub fn with_concepts(self, source: &str, target: &str) -> SteeringOutcomeRow {
        SteeringOutcomeRow {
            sample_id: self.sample_id,
            baseline_label: self.baseline_label,
            steered_label: self.steered_label,
            source_label: source.to_string(),
            target_label: target.to_string(),
        }
    }
}

/// Read `sample_id,baseline_label,steered_label` rows.
pub fn read_judged_labels(reader: impl std::io::Read) -> Result<Vec<JudgedLabel>, csv::Error> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader)
        .deserialize()
        .collect()
}

/// Among rows whose baseline label is the source concept, the fraction whose
/// steered label is the target concept.
pub fn sensitivity(rows: &[SteeringOutcomeRow]) -> Result<f64, SteeringError> {
    let first = rows.first().ok_or(SteeringError::EmptyRows)?;
    let source_rows: Vec<_> = rows
        .iter()
        .filter(|r| r.baseline_label == r.source_label)
        .collect();
    if source_rows.is_empty() {
        return Err(SteeringError::NoSourceSamples(first.source_label.clone()));
    }
    let shifted = source_rows
        .iter()
        .filter(|r| r.steered_label == r.target_label)
        .count();
    Ok(shifted as f64 / source_rows.len() as f64)
}
