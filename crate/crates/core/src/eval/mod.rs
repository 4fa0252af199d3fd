//! Similarity matching, Precision@1 reports and the combination-bias experiment.

pub mod bias;
pub mod report;
pub mod retrieval;

pub use bias::{bias_experiment, Architecture, BiasCell, BiasReport};
pub use report::{evaluate, score_embeddings, BucketScore, ScoreReport};
pub use retrieval::{build_index, match_query, precision_at_1, CandidateIndex};
