//! Sparse-autoencoder concept discovery over stored model activations.
//!
//! Pipeline: [`store`] holds activations and embeddings, [`sae`] trains a
//! TopK sparse autoencoder, [`retrieval`] finds each feature's most and least
//! representative clips, [`scoring`] ranks features by monosemanticity,
//! [`naming`] captions and names them, and [`evaluation`] compares names to
//! reference labels. [`steering`] edits a feature and decodes.

pub mod evaluation;
pub mod naming;
pub mod report;
pub mod retrieval;
pub mod sae;
pub mod scoring;
pub mod steering;
pub mod store;
pub mod synthetic;
