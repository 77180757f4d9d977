//! Generative slate reranking at desk scale.
//!
//! The pipeline reranks a candidate set into an ordered slate with a
//! single generative model instead of a generator/evaluator pair:
//!
//! * [`graph`] — a small dense-tensor core with reverse-mode automatic
//!   differentiation, enough for a transformer and every loss below.
//! * [`model`] — the reranker itself: a bidirectional candidate encoder,
//!   a causal decoder, a dynamic output vocabulary built from the current
//!   session's candidate embeddings, and several ordered prediction heads
//!   sharing one trunk.
//! * [`data`] — session-log ingestion, a synthetic session simulator with
//!   a causally-chained click model, and preference-pair construction.
//! * [`training`] — exposure-order pre-training with a multi-token
//!   prediction objective, preference post-training against a frozen
//!   reference, Adam, and checkpoint persistence.
//! * [`decoding`] — greedy autoregressive decoding and masked parallel
//!   multi-head decoding that cuts forward passes to `ceil(n / H)`.
//! * [`evaluation`] — AUC / NDCG metrics, a single-sample latency
//!   benchmark, and an ablation harness over the training stages.

pub mod data;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod scalar;
pub mod seeding;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, Tensor};
pub use model::{GenRerankerModel, ModelConfig};
pub use scalar::Scalar;
