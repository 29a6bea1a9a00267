//! Cohort-aware risk prediction: fuse patient metadata with imaging features,
//! retrieve the most similar reference cohort, route to that cohort's best
//! model, and evaluate routing strategies.

pub mod agent;
pub mod eval;
pub mod formats;
pub mod fusion;
pub mod models;
pub mod policy;
pub mod retrieval;
pub mod synth;
pub mod types;
pub mod vindex;

pub use agent::{Agent, AgentConfig, AgentError, AgentOutcome};
pub use eval::{EvalError, SplitSpec, Strategy, StrategyReport};
pub use fusion::{Aggregation, EncodingStats, FusionConfig};
pub use models::{ModelRegistry, ModelSpec};
pub use policy::{PerformanceTable, PolicyConfig, SelectionBackend, SelectionDecision};
pub use retrieval::CohortAssignment;
pub use types::{
    CohortId, DatasetSchema, FeatureMap, FieldSpec, FusedVector, MetadataRecord, MetadataValue, ModelId, PatientRecord,
    RiskPrediction, FEATURE_COLS, FEATURE_ROWS,
};
pub use vindex::{Metric, VectorIndex};
