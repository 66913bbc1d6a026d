//! Concept-based interpretation of attention MIL slide classifiers.
//!
//! A gated-attention MIL backbone is trained on tile embeddings; its hidden
//! tile representations are clustered into concepts; each slide becomes a
//! vector of concept fractions; a transparent rule over those fractions
//! predicts the slide label. The crate also ships the evaluation harness, a
//! synthetic cohort generator with planted concepts, and figure rendering.

pub mod classifier;
pub mod concepts;
pub mod data;
pub mod error;
pub mod eval;
pub mod fractions;
pub mod kmeans;
pub mod metrics;
pub mod mil;
pub mod persist;
pub mod render;
pub mod report;
pub mod synth;
mod text;

pub use classifier::{FitMetadata, LogisticConfig, LogisticFractionModel, RuleClassifier};
pub use concepts::{ConceptAssignment, ConceptModel, ConceptSpace, ElbowCurve};
pub use data::{
    load_cohort, save_cohort, Class, Cohort, ConceptFractionVector, FractionMode, LabelKind,
    SlideBag, TileRecord,
};
pub use error::{Error, Result};
pub use eval::{Method, MethodReport, PipelineBundle, PipelineConfig};
pub use fractions::{BootstrapConfig, ClassAveragedFractions, GridRect};
pub use kmeans::KMeansConfig;
pub use metrics::{Metric, MetricStat, MetricsVector, RecoveryScore};
pub use mil::{ForwardOutput, MilParams, TrainConfig};
pub use synth::SyntheticSpec;
pub use text::{fmt_f64, fmt_opt};
