//! The two-stage agent: cohort retrieval followed by model selection and scoring.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{fit_encoding, fuse, EncodingStats, FusionConfig, FusionError};
use crate::models::{predict, ModelError, ModelRegistry, PredictionOutput, ScoringTransport};
use crate::policy::{
    ranked_models, select_model, PerformanceTable, PolicyConfig, PolicyError, SelectionBackend, SelectionDecision,
};
use crate::retrieval::{majority_vote, CohortAssignment, RetrievalError, DEFAULT_K};
use crate::types::{validate_record, CohortId, DatasetSchema, ModelId, PatientRecord, RiskPrediction, ValidationError};
use crate::vindex::{IndexEntry, IndexError, Metric, VectorIndex};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("index dimension {index} does not match fused dimension {fused}")]
    DimensionMismatch { index: usize, fused: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub policy: PolicyConfig,
}

fn default_k() -> usize {
    DEFAULT_K
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            metric: Metric::Cosine,
            k: DEFAULT_K,
            policy: PolicyConfig::default(),
        }
    }
}

/// Everything produced for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentOutcome {
    pub prediction: RiskPrediction,
    pub assignment: CohortAssignment,
    pub decision: SelectionDecision,
    pub output: PredictionOutput,
    /// The selected model could not score the patient; `prediction.model` is the substitute.
    pub substituted: bool,
}

pub(crate) struct Scored {
    pub model: ModelId,
    pub output: PredictionOutput,
    /// Wall-clock seconds spent inside model calls.
    pub measured_s: f64,
}

/// Immutable after construction; share across threads freely.
pub struct Agent {
    schema: DatasetSchema,
    stats: EncodingStats,
    index: VectorIndex,
    registry: ModelRegistry,
    table: PerformanceTable,
    config: AgentConfig,
    backend: SelectionBackend,
    transport: Option<Arc<dyn ScoringTransport>>,
}

impl Agent {
    /// Fits the encoding on `database`, fuses every record and builds the index.
    pub fn build(
        schema: DatasetSchema,
        database: &[PatientRecord],
        registry: ModelRegistry,
        table: PerformanceTable,
        config: AgentConfig,
    ) -> Result<Self, AgentError> {
        let stats = fit_encoding(database, &schema)?;
        let index = build_index(database, &stats, &config.fusion, config.metric)?;
        Self::from_parts(schema, stats, index, registry, table, config)
    }

    /// Assembles an agent from a previously saved index and encoding.
    pub fn from_parts(
        schema: DatasetSchema,
        stats: EncodingStats,
        index: VectorIndex,
        registry: ModelRegistry,
        table: PerformanceTable,
        config: AgentConfig,
    ) -> Result<Self, AgentError> {
        config.fusion.validate()?;
        table.validate()?;
        if config.k == 0 {
            return Err(AgentError::InvalidK);
        }
        let fused = stats.fused_dim(config.fusion.aggregation);
        if fused != index.dim() {
            return Err(AgentError::DimensionMismatch {
                index: index.dim(),
                fused,
            });
        }
        Ok(Self {
            schema,
            stats,
            index,
            registry,
            table,
            config,
            backend: SelectionBackend::Rule,
            transport: None,
        })
    }

    pub fn with_backend(mut self, backend: SelectionBackend) -> Self {
        self.backend = backend;
        self
    }

    pub fn with_transport(mut self, transport: Arc<dyn ScoringTransport>) -> Self {
        self.transport = Some(transport);
        self
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    pub fn stats(&self) -> &EncodingStats {
        &self.stats
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn registry(&self) -> &ModelRegistry {
        &self.registry
    }

    pub fn table(&self) -> &PerformanceTable {
        &self.table
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn backend(&self) -> &SelectionBackend {
        &self.backend
    }

    pub fn assign(&self, record: &PatientRecord) -> Result<CohortAssignment, AgentError> {
        self.assign_with_k(record, self.config.k)
    }

    pub fn assign_with_k(&self, record: &PatientRecord, k: usize) -> Result<CohortAssignment, AgentError> {
        if k == 0 {
            return Err(AgentError::InvalidK);
        }
        let query = fuse(record, &self.stats, &self.config.fusion)?;
        let neighbors = self.index.search(query.as_slice(), k)?;
        Ok(majority_vote(neighbors)?)
    }

    pub fn select(&self, record: &PatientRecord, cohort: &CohortId) -> Result<SelectionDecision, AgentError> {
        Ok(select_model(
            &self.backend,
            &self.config.policy,
            record,
            cohort,
            &self.table,
            &self.registry,
        )?)
    }

    /// Scores with `model`; if it is not applicable to the patient, tries the
    /// ranked models of `cohort`, then of the patient's own cohort.
    pub(crate) fn score_with_fallback(
        &self,
        record: &PatientRecord,
        model: &ModelId,
        cohort: &CohortId,
    ) -> Result<Scored, AgentError> {
        let mut candidates = vec![model.clone()];
        for c in [cohort, &record.cohort] {
            if let Ok(ranked) = ranked_models(&self.table, &self.registry, c, record) {
                candidates.extend(ranked.into_iter().map(|(m, _)| m));
            }
        }
        let mut first_err = None;
        let mut measured_s = 0.0;
        let mut tried = Vec::new();
        for m in candidates {
            if tried.contains(&m) {
                continue;
            }
            tried.push(m.clone());
            let spec = self.registry.get(&m)?;
            let started = Instant::now();
            let result = predict(spec, record, self.transport.as_deref());
            measured_s += started.elapsed().as_secs_f64();
            match result {
                Ok(output) => {
                    return Ok(Scored {
                        model: m,
                        output,
                        measured_s,
                    })
                }
                Err(e @ ModelError::NotApplicable { .. }) => {
                    first_err.get_or_insert(e);
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(first_err
            .unwrap_or_else(|| ModelError::NotApplicable {
                model: model.clone(),
                reason: "no candidate model".into(),
            })
            .into())
    }

    pub fn predict(&self, record: &PatientRecord) -> Result<AgentOutcome, AgentError> {
        self.predict_with_k(record, self.config.k)
    }

    /// Validates, retrieves a cohort, selects a model and scores the patient.
    pub fn predict_with_k(&self, record: &PatientRecord, k: usize) -> Result<AgentOutcome, AgentError> {
        let record = validate_record(record.clone(), &self.schema)?;
        let assignment = self.assign_with_k(&record, k)?;
        let decision = self.select(&record, &assignment.cohort)?;
        let scored = self.score_with_fallback(&record, &decision.model, &assignment.cohort)?;
        let prediction = RiskPrediction {
            patient_id: record.patient_id.clone(),
            probability: scored.output.probability,
            model: scored.model.clone(),
            cohort: assignment.cohort.clone(),
            neighbor_ids: assignment.neighbors.ids(),
            votes: assignment.vote_counts.clone(),
        };
        Ok(AgentOutcome {
            substituted: scored.model != decision.model,
            prediction,
            assignment,
            decision,
            output: scored.output,
        })
    }
}

/// Fuses every record (in parallel) and builds the index in input order.
pub fn build_index(
    records: &[PatientRecord],
    stats: &EncodingStats,
    fusion: &FusionConfig,
    metric: Metric,
) -> Result<VectorIndex, AgentError> {
    let entries: Vec<IndexEntry> = records
        .par_iter()
        .map(|r| {
            Ok(IndexEntry {
                vector: fuse(r, stats, fusion)?,
                cohort: r.cohort.clone(),
                patient_id: r.patient_id.clone(),
            })
        })
        .collect::<Result<_, FusionError>>()?;
    Ok(VectorIndex::build(entries, metric)?)
}

/// Builds the agent from fitted statistics and an index using the rule backend.
pub fn fit_agent(
    schema: &DatasetSchema,
    database: &[PatientRecord],
    registry: &ModelRegistry,
    table: &PerformanceTable,
    config: &AgentConfig,
) -> Result<Agent, AgentError> {
    Agent::build(
        schema.clone(),
        database,
        registry.clone(),
        table.clone(),
        config.clone(),
    )
}
