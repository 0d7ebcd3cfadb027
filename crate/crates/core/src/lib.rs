//! Cross-validated evaluation and ensemble aggregation for binary
//! (Hateful / NotHateful) text classifiers.
//!
//! The crate is organised around a file-based prediction exchange: any model
//! runner that writes `<model>.pred.tsv` score files can be evaluated, fused by
//! Majority Vote or Highest Sum, and reported in a grouped results table. A
//! small character n-gram logistic regression ([`baseline`]) is bundled so the
//! whole protocol runs without external models.

pub mod baseline;
pub mod cli;
pub mod corpus;
pub mod ensemble;
pub mod experiment;
pub mod metrics;
pub mod seed;

pub use corpus::{Corpus, CorpusStats, FoldPlan, Label, LabeledExample};
pub use ensemble::{EnsembleInput, PredictionSet, ScoreVector, TiePolicy};
pub use metrics::{ConfusionMatrix, MetricsReport};

/// Mapping from example id to a per-example value. Ordered so that every
/// derived artifact is independent of input row order.
pub type IdMap<T> = std::collections::BTreeMap<String, T>;
