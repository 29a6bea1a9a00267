//! Model selection for a retrieved cohort.
//!
//! The rule backend picks the cohort's historically best applicable model.
//! The LLM backend renders a prompt, parses the reply, and falls back to the
//! rule whenever the reply does not name a registered, applicable model.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::ModelRegistry;
use crate::types::{CohortId, MetadataValue, ModelId, PatientRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub auc: f64,
    pub applicable: bool,
}

/// Historical (cohort, model) → AUC map with applicability flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerformanceTable {
    entries: BTreeMap<(CohortId, ModelId), TableEntry>,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("cohort {0} is not in the performance table")]
    UnknownCohort(CohortId),
    #[error("no applicable model for cohort {0}")]
    NoApplicableModel(CohortId),
    #[error("LLM backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("invalid performance table: {0}")]
    InvalidTable(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct TableRow {
    cohort: CohortId,
    model: ModelId,
    auc: f64,
    applicable: bool,
}

impl PerformanceTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, cohort: CohortId, model: ModelId, auc: f64, applicable: bool) {
        self.entries.insert((cohort, model), TableEntry { auc, applicable });
    }

    pub fn get(&self, cohort: &CohortId, model: &ModelId) -> Option<TableEntry> {
        self.entries.get(&(cohort.clone(), model.clone())).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cohorts(&self) -> Vec<CohortId> {
        let mut out: Vec<CohortId> = self.entries.keys().map(|(c, _)| c.clone()).collect();
        out.dedup();
        out
    }

    pub fn contains_cohort(&self, cohort: &CohortId) -> bool {
        self.entries.keys().any(|(c, _)| c == cohort)
    }

    /// Rows of one cohort in model-id order.
    pub fn rows(&self, cohort: &CohortId) -> Vec<(ModelId, TableEntry)> {
        self.entries
            .iter()
            .filter(|((c, _), _)| c == cohort)
            .map(|((_, m), e)| (m.clone(), *e))
            .collect()
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        for ((c, m), e) in &self.entries {
            if !(0.0..=1.0).contains(&e.auc) {
                return Err(PolicyError::InvalidTable(format!(
                    "AUC {} for ({c}, {m}) outside [0, 1]",
                    e.auc
                )));
            }
        }
        for c in self.cohorts() {
            if !self.rows(&c).iter().any(|(_, e)| e.applicable) {
                return Err(PolicyError::InvalidTable(format!("cohort {c} has no applicable model")));
            }
        }
        Ok(())
    }

    /// CSV with header `cohort,model,auc,applicable`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for ((cohort, model), e) in &self.entries {
            w.serialize(TableRow {
                cohort: cohort.clone(),
                model: model.clone(),
                auc: e.auc,
                applicable: e.applicable,
            })
            .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Self, PolicyError> {
        let mut table = Self::new();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        for (i, row) in reader.deserialize::<TableRow>().enumerate() {
            let row = row.map_err(|e| PolicyError::InvalidTable(format!("row {}: {e}", i + 2)))?;
            table.insert(row.cohort, row.model, row.auc, row.applicable);
        }
        table.validate()?;
        Ok(table)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Rule,
    Llm,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Rule => "rule",
            BackendKind::Llm => "llm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub model: ModelId,
    pub cohort: CohortId,
    pub backend: BackendKind,
    pub rationale: String,
    /// The LLM reply was unusable and the rule decided.
    #[serde(default)]
    pub fallback: bool,
}

/// Applicable models of `cohort` that the record can feed, best first:
/// higher AUC, then lower per-patient cost, then model id.
pub fn ranked_models(
    table: &PerformanceTable,
    registry: &ModelRegistry,
    cohort: &CohortId,
    record: &PatientRecord,
) -> Result<Vec<(ModelId, f64)>, PolicyError> {
    if !table.contains_cohort(cohort) {
        return Err(PolicyError::UnknownCohort(cohort.clone()));
    }
    let mut candidates: Vec<(ModelId, f64, f64)> = table
        .rows(cohort)
        .into_iter()
        .filter(|(_, e)| e.applicable)
        .filter_map(|(m, e)| {
            let spec = registry.get(&m).ok()?;
            spec.requirements_met(record).then_some((m, e.auc, spec.cost_s))
        })
        .collect();
    candidates.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(a.2.total_cmp(&b.2))
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(candidates.into_iter().map(|(m, auc, _)| (m, auc)).collect())
}

/// The cohort's historically best model the record is eligible for.
pub fn best_model(
    table: &PerformanceTable,
    registry: &ModelRegistry,
    cohort: &CohortId,
    record: &PatientRecord,
) -> Result<SelectionDecision, PolicyError> {
    let ranked = ranked_models(table, registry, cohort, record)?;
    let (model, auc) = ranked
        .into_iter()
        .next()
        .ok_or_else(|| PolicyError::NoApplicableModel(cohort.clone()))?;
    Ok(SelectionDecision {
        rationale: format!("highest historical AUC {auc:.3} for cohort {cohort}"),
        model,
        cohort: cohort.clone(),
        backend: BackendKind::Rule,
        fallback: false,
    })
}

/// A text-completion endpoint.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, String>;
}

#[derive(Clone)]
pub enum SelectionBackend {
    Rule,
    Llm(Arc<dyn LlmBackend>),
}

impl SelectionBackend {
    pub fn kind(&self) -> BackendKind {
        match self {
            SelectionBackend::Rule => BackendKind::Rule,
            SelectionBackend::Llm(_) => BackendKind::Llm,
        }
    }
}

impl fmt::Debug for SelectionBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SelectionBackend::{}", self.kind())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default = "default_query")]
    pub query_text: String,
    /// Maximum prompt length in characters.
    #[serde(default = "default_budget")]
    pub prompt_budget: usize,
    /// Extra attempts after a failed completion request.
    #[serde(default = "default_llm_retries")]
    pub retries: u32,
    /// Use the rule when the LLM cannot be reached; otherwise surface an error.
    #[serde(default = "default_true")]
    pub fallback_on_unavailable: bool,
}

fn default_query() -> String {
    "Estimate this patient's lung cancer risk with the most suitable prediction model.".into()
}

fn default_budget() -> usize {
    4000
}

fn default_llm_retries() -> u32 {
    2
}

fn default_true() -> bool {
    true
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            query_text: default_query(),
            prompt_budget: default_budget(),
            retries: default_llm_retries(),
            fallback_on_unavailable: true,
        }
    }
}

/// Deterministic prompt: task, cohort with its model AUC rows, answer
/// instructions, then the patient profile. Imaging features are summarized
/// by row norms. Truncated to `budget` characters.
pub fn render_prompt(
    query_text: &str,
    record: &PatientRecord,
    cohort: &CohortId,
    table: &PerformanceTable,
    budget: usize,
) -> String {
    let mut p = String::new();
    let _ = writeln!(p, "### Task\n{}", query_text.trim());
    let _ = writeln!(p, "\n### Retrieved cohort\n{cohort}");
    let _ = writeln!(p, "\n### Historical model performance in {cohort} (AUC)");
    let rows = table.rows(cohort);
    if rows.is_empty() {
        let _ = writeln!(p, "(no recorded models)");
    }
    let mut names = Vec::new();
    for (model, e) in &rows {
        if e.applicable {
            names.push(model.as_str());
            let _ = writeln!(p, "- {model}: {:.3}", e.auc);
        } else {
            let _ = writeln!(p, "- {model}: {:.3} (not applicable)", e.auc);
        }
    }
    let _ = writeln!(
        p,
        "\n### Answer\nReply with exactly one model name from: {}.",
        names.join(", ")
    );
    let _ = writeln!(p, "\n### Patient profile\ntimepoints: {}", record.timepoints);
    for (name, value) in record.metadata.iter() {
        let _ = match value {
            MetadataValue::Number(v) => writeln!(p, "{name}: {v}"),
            MetadataValue::Category(c) => writeln!(p, "{name}: {c}"),
            MetadataValue::Missing => writeln!(p, "{name}: unknown"),
        };
    }
    let norms: Vec<String> = (0..record.features.rows())
        .map(|r| {
            let n = record
                .features
                .row(r)
                .iter()
                .map(|v| f64::from(*v).powi(2))
                .sum::<f64>()
                .sqrt();
            format!("{n:.3}")
        })
        .collect();
    let _ = writeln!(p, "imaging feature row norms: [{}]", norms.join(", "));

    if p.chars().count() > budget {
        p = p.chars().take(budget).collect();
    }
    p
}

/// Extracts a registered model name from a free-text reply, case-insensitively.
pub fn parse_model_name(reply: &str, registry: &ModelRegistry) -> Option<ModelId> {
    let lookup = |token: &str| {
        let token = token.trim_matches(|c: char| !c.is_alphanumeric() && c != '-' && c != '_');
        let token = token.trim_matches(|c: char| c == '-' || c == '_');
        registry
            .ids()
            .find(|id| id.as_str().eq_ignore_ascii_case(token))
            .cloned()
    };
    lookup(reply.trim()).or_else(|| reply.split_whitespace().find_map(lookup))
}

pub fn select_model(
    backend: &SelectionBackend,
    config: &PolicyConfig,
    record: &PatientRecord,
    cohort: &CohortId,
    table: &PerformanceTable,
    registry: &ModelRegistry,
) -> Result<SelectionDecision, PolicyError> {
    let rule = best_model(table, registry, cohort, record)?;
    let SelectionBackend::Llm(llm) = backend else {
        return Ok(rule);
    };

    let prompt = render_prompt(&config.query_text, record, cohort, table, config.prompt_budget);
    let mut reply = Err(String::new());
    for _ in 0..=config.retries {
        reply = llm.complete(&prompt);
        if reply.is_ok() {
            break;
        }
    }
    let fallback = |why: String| SelectionDecision {
        rationale: format!("{why}; fell back to {}", rule.rationale),
        backend: BackendKind::Llm,
        fallback: true,
        ..rule.clone()
    };
    let reply = match reply {
        Ok(r) => r,
        Err(e) if config.fallback_on_unavailable => return Ok(fallback(format!("LLM backend unavailable ({e})"))),
        Err(e) => return Err(PolicyError::BackendUnavailable(e)),
    };

    let Some(model) = parse_model_name(&reply, registry) else {
        return Ok(fallback(format!(
            "invalid model name in reply {:?}",
            truncate(&reply, 80)
        )));
    };
    let ranked = ranked_models(table, registry, cohort, record)?;
    if !ranked.iter().any(|(m, _)| *m == model) {
        return Ok(fallback(format!("model {model} is not applicable for cohort {cohort}")));
    }
    Ok(SelectionDecision {
        rationale: format!("LLM selected {model}"),
        model,
        cohort: cohort.clone(),
        backend: BackendKind::Llm,
        fallback: false,
    })
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}
