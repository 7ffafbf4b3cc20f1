//! Landmark recognition by re-ranked retrieval.
//!
//! Per-model embeddings are L2-normalized, concatenated and re-normalized
//! into one ensemble space. Each query retrieves its exact top-k index
//! images there, and every candidate's cosine is adjusted by a
//! classification logit and a distractor penalty. Adjusted scores are summed
//! per landmark together with the query's top-1 classification vote, and the
//! best landmark becomes the prediction. Predictions are scored with Global
//! Average Precision.
//!
//! | module | contents |
//! |---|---|
//! | [`vector`] | normalization, cosine, GeM pooling, blocked top-k, ensembling |
//! | [`store`] | EMB1 files, label TSVs, manifests, per-model alignment |
//! | [`arcface`] | adaptive margins, class logits, loss and gradient, center fitting |
//! | [`rerank`] | distractor maps, candidate adjustment, aggregation, batch prediction |
//! | [`metrics`] | GAP and top-1 accuracy |
//! | [`synth`] | deterministic synthetic datasets |
//! | [`harness`] | the command bodies of the `lmrerank` binary |
//!
//! Batch loops run on rayon when the `parallel` feature (on by default) is
//! enabled. Outputs are bit-identical for any thread count or block size.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arcface;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod par;
pub mod rerank;
pub mod store;
pub mod synth;
pub mod vector;

pub use error::{Error, Result};
pub use par::Execution;

/// Opaque image identifier.
pub type ImageId = u64;
/// Landmark (class) identifier.
pub type LandmarkId = u32;
