//! The model pool: every risk predictor behind one `predict` contract.
//!
//! Three kinds are supported:
//! - `logistic`: closed-form scores, σ(β₀ + Σ βⱼ·termⱼ), parameters from config files;
//! - `adapter`: an external scoring endpoint reached through a [`ScoringTransport`];
//! - `binormal_stub`: synthetic stand-ins whose scores are drawn so that, per
//!   cohort, their AUC is a planted target.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::types::{CohortId, MetadataValue, ModelId, PatientRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model not applicable: {model}: {reason}")]
    NotApplicable { model: ModelId, reason: String },
    #[error("adapter unavailable: {model}: {reason}")]
    AdapterUnavailable { model: ModelId, reason: String },
    #[error("missing covariate {0}")]
    MissingCovariate(String),
    #[error("non-finite linear predictor")]
    NonFinite,
    #[error("target AUC must lie in (0, 1), got {0}")]
    TargetAuc(f64),
    #[error("invalid probability {0} returned by {1}")]
    InvalidProbability(f64, ModelId),
    #[error("duplicate model id {0}")]
    DuplicateModel(ModelId),
    #[error("unknown model {0}")]
    UnknownModel(ModelId),
    #[error("invalid model spec {0}: {1}")]
    InvalidSpec(ModelId, String),
}

/// Transformation applied to a raw metadata value before it enters a logistic term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    #[default]
    Identity,
    /// `v - at`
    Center { at: f64 },
    /// `(v / scale)^exponent - offset`
    Power { scale: f64, exponent: f64, offset: f64 },
    /// 1 when the categorical value is one of `values`, else 0.
    In { values: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticTerm {
    pub covariate: String,
    pub coefficient: f64,
    #[serde(default)]
    pub transform: Transform,
    /// Label of the term; defaults to the covariate name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl LogisticTerm {
    pub fn label(&self) -> &str {
        self.name.as_deref().unwrap_or(&self.covariate)
    }

    fn value(&self, record: &PatientRecord) -> Result<f64, ModelError> {
        let raw = record.metadata.get(&self.covariate);
        let missing = || ModelError::MissingCovariate(self.covariate.clone());
        Ok(match &self.transform {
            Transform::Identity => raw.as_number().ok_or_else(missing)?,
            Transform::Center { at } => raw.as_number().ok_or_else(missing)? - at,
            Transform::Power {
                scale,
                exponent,
                offset,
            } => (raw.as_number().ok_or_else(missing)? / scale).powf(*exponent) - offset,
            Transform::In { values } => match raw {
                MetadataValue::Category(c) => f64::from(u8::from(values.contains(c))),
                _ => return Err(missing()),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub intercept: f64,
    #[serde(default)]
    pub terms: Vec<LogisticTerm>,
    /// Where the coefficients were transcribed from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl LogisticParams {
    pub fn coefficients(&self) -> Vec<(String, f64)> {
        self.terms
            .iter()
            .map(|t| (t.label().to_string(), t.coefficient))
            .collect()
    }

    /// Term values keyed by term label.
    pub fn covariates(&self, record: &PatientRecord) -> Result<BTreeMap<String, f64>, ModelError> {
        self.terms
            .iter()
            .map(|t| Ok((t.label().to_string(), t.value(record)?)))
            .collect()
    }

    pub fn risk(&self, record: &PatientRecord) -> Result<f64, ModelError> {
        logistic_risk(self.intercept, &self.coefficients(), &self.covariates(record)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterEndpoint {
    pub url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubParams {
    /// Planted AUC per cohort.
    #[serde(default)]
    pub target_auc: BTreeMap<CohortId, f64>,
    /// Used for cohorts absent from `target_auc`; without it those cohorts are not applicable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_auc: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl StubParams {
    pub fn target_for(&self, cohort: &CohortId) -> Option<f64> {
        self.target_auc.get(cohort).copied().or(self.default_auc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Logistic(LogisticParams),
    Adapter(AdapterEndpoint),
    BinormalStub(StubParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Requirements {
    #[serde(default = "one")]
    pub min_timepoints: u32,
    #[serde(default)]
    pub required_fields: Vec<String>,
}

fn one() -> u32 {
    1
}

impl Default for Requirements {
    fn default() -> Self {
        Self {
            min_timepoints: 1,
            required_fields: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: ModelId,
    #[serde(flatten)]
    pub kind: ModelKind,
    #[serde(default)]
    pub requirements: Requirements,
    /// Per-patient inference cost in seconds. Reported as the wall time of
    /// stub predictions and used to break selection ties.
    #[serde(default)]
    pub cost_s: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidSpec(self.id.clone(), msg.to_string()));
        if self.requirements.min_timepoints < 1 {
            return bad("min_timepoints must be >= 1");
        }
        if !(self.cost_s.is_finite() && self.cost_s >= 0.0) {
            return bad("cost_s must be finite and non-negative");
        }
        if let ModelKind::BinormalStub(p) = &self.kind {
            for auc in p.target_auc.values().chain(p.default_auc.iter()) {
                if !(*auc > 0.0 && *auc < 1.0) {
                    return Err(ModelError::TargetAuc(*auc));
                }
            }
        }
        Ok(())
    }

    /// Timepoint and field requirements only.
    pub fn requirements_met(&self, record: &PatientRecord) -> bool {
        record.timepoints >= self.requirements.min_timepoints
            && self
                .requirements
                .required_fields
                .iter()
                .all(|f| !record.metadata.get(f).is_missing())
    }

    /// Checks the record against the declared input requirements and, for
    /// stubs, the presence of a planted profile for the record's cohort.
    pub fn check_applicable(&self, record: &PatientRecord) -> Result<(), ModelError> {
        let not_applicable = |reason: String| ModelError::NotApplicable {
            model: self.id.clone(),
            reason,
        };
        if record.timepoints < self.requirements.min_timepoints {
            return Err(not_applicable(format!(
                "requires {} timepoints, patient has {}",
                self.requirements.min_timepoints, record.timepoints
            )));
        }
        if let Some(f) = self
            .requirements
            .required_fields
            .iter()
            .find(|f| record.metadata.get(f).is_missing())
        {
            return Err(not_applicable(format!("required field {f} is missing")));
        }
        if let ModelKind::BinormalStub(p) = &self.kind {
            if p.target_for(&record.cohort).is_none() {
                return Err(not_applicable(format!(
                    "no planted profile for cohort {}",
                    record.cohort
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionOutput {
    pub probability: f64,
    /// Seconds. Configured cost for in-process models, measured for adapters.
    pub wall_time: f64,
}

/// Transport for `adapter` models: one request per patient returning a probability.
pub trait ScoringTransport: Send + Sync {
    fn score(&self, endpoint: &AdapterEndpoint, record: &PatientRecord) -> Result<f64, String>;
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// σ(β₀ + Σ βⱼ vⱼ). Every named coefficient needs a covariate value.
pub fn logistic_risk(
    intercept: f64,
    coefficients: &[(String, f64)],
    covariates: &BTreeMap<String, f64>,
) -> Result<f64, ModelError> {
    let mut t = intercept;
    for (name, beta) in coefficients {
        let v = covariates
            .get(name)
            .ok_or_else(|| ModelError::MissingCovariate(name.clone()))?;
        t += beta * v;
    }
    if !t.is_finite() {
        return Err(ModelError::NonFinite);
    }
    Ok(sigmoid(t))
}

/// Mean shift of the positive class for a binormal model with the given AUC:
/// μ = √2 · Φ⁻¹(auc), so that Φ(μ/√2) = auc.
pub fn binormal_shift(target_auc: f64) -> Result<f64, ModelError> {
    if !(target_auc > 0.0 && target_auc < 1.0) {
        return Err(ModelError::TargetAuc(target_auc));
    }
    let std_normal = Normal::standard();
    Ok(std::f64::consts::SQRT_2 * std_normal.inverse_cdf(target_auc))
}

/// Negatives ~ N(0,1), positives ~ N(μ,1), mapped through σ. One RNG stream per call.
pub fn binormal_scores(target_auc: f64, labels: &[u8], seed: u64) -> Result<Vec<f64>, ModelError> {
    Ok(binormal_raw_scores(target_auc, labels, seed)?
        .into_iter()
        .map(sigmoid)
        .collect())
}

/// Unmapped binormal draws; [`binormal_scores`] is σ applied to these.
pub fn binormal_raw_scores(target_auc: f64, labels: &[u8], seed: u64) -> Result<Vec<f64>, ModelError> {
    let mu = binormal_shift(target_auc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(labels
        .iter()
        .map(|l| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z + if *l == 1 { mu } else { 0.0 }
        })
        .collect())
}

/// 64-bit FNV-1a, stable across platforms and releases.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3)
    })
}

fn stub_probability(id: &ModelId, params: &StubParams, record: &PatientRecord) -> Result<f64, ModelError> {
    let auc = params
        .target_for(&record.cohort)
        .ok_or_else(|| ModelError::NotApplicable {
            model: id.clone(),
            reason: format!("no planted profile for cohort {}", record.cohort),
        })?;
    let mu = binormal_shift(auc)?;
    let seed = params.seed ^ fnv1a(id.as_str().as_bytes()).rotate_left(17) ^ fnv1a(record.patient_id.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: f64 = StandardNormal.sample(&mut rng);
    Ok(sigmoid(z + if record.label == 1 { mu } else { 0.0 }))
}

/// Applies one model to one patient. Applicability is always checked first.
pub fn predict(
    spec: &ModelSpec,
    record: &PatientRecord,
    transport: Option<&dyn ScoringTransport>,
) -> Result<PredictionOutput, ModelError> {
    spec.check_applicable(record)?;
    let started = Instant::now();
    let (probability, wall_time) = match &spec.kind {
        ModelKind::Logistic(params) => (params.risk(record)?, spec.cost_s),
        ModelKind::BinormalStub(params) => (stub_probability(&spec.id, params, record)?, spec.cost_s),
        ModelKind::Adapter(endpoint) => {
            let transport = transport.ok_or_else(|| ModelError::AdapterUnavailable {
                model: spec.id.clone(),
                reason: "no transport configured".into(),
            })?;
            let mut last = String::new();
            let mut got = None;
            for _ in 0..=endpoint.retries {
                match transport.score(endpoint, record) {
                    Ok(p) => {
                        got = Some(p);
                        break;
                    }
                    Err(e) => last = e,
                }
            }
            let p = got.ok_or_else(|| ModelError::AdapterUnavailable {
                model: spec.id.clone(),
                reason: last,
            })?;
            (p, started.elapsed().as_secs_f64())
        }
    };
    if !(0.0..=1.0).contains(&probability) {
        return Err(ModelError::InvalidProbability(probability, spec.id.clone()));
    }
    Ok(PredictionOutput { probability, wall_time })
}

/// Read-only after construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelRegistry {
    models: BTreeMap<ModelId, ModelSpec>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: ModelSpec) -> Result<(), ModelError> {
        spec.validate()?;
        if self.models.contains_key(&spec.id) {
            return Err(ModelError::DuplicateModel(spec.id));
        }
        self.models.insert(spec.id.clone(), spec);
        Ok(())
    }

    pub fn get(&self, id: &ModelId) -> Result<&ModelSpec, ModelError> {
        self.models.get(id).ok_or_else(|| ModelError::UnknownModel(id.clone()))
    }

    pub fn contains(&self, id: &ModelId) -> bool {
        self.models.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ModelId> {
        self.models.keys()
    }

    pub fn specs(&self) -> impl Iterator<Item = &ModelSpec> {
        self.models.values()
    }

    pub fn from_specs(specs: impl IntoIterator<Item = ModelSpec>) -> Result<Self, ModelError> {
        let mut reg = Self::new();
        for spec in specs {
            reg.register(spec)?;
        }
        Ok(reg)
    }

    pub fn to_json(&self) -> String {
        let specs: Vec<&ModelSpec> = self.models.values().collect();
        serde_json::to_string_pretty(&specs).expect("model specs serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let specs: Vec<ModelSpec> = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Self::from_specs(specs).map_err(|e| e.to_string())
    }

    /// The eight-model pool: Mayo and Brock logistic scores plus binormal stubs
    /// for the six imaging models. DLI, DLS and Sybil carry the per-cohort
    /// profiles of [`crate::synth::COHORT_PROFILES`]; Liao, TD-ViT and DLSTM
    /// ship without profiles and are inapplicable until configured.
    pub fn standard_pool(seed: u64) -> Self {
        let mut reg = Self::new();
        for text in [
            include_str!("../models/mayo.json"),
            include_str!("../models/brock.json"),
        ] {
            let spec: ModelSpec = serde_json::from_str(text).expect("bundled logistic spec parses");
            reg.register(spec).expect("bundled logistic spec is valid");
        }
        for spec in standard_stubs(seed) {
            reg.register(spec).expect("standard stubs are valid");
        }
        reg
    }
}

/// Stub specs for the six imaging models with simulated per-patient costs.
pub fn standard_stubs(seed: u64) -> Vec<ModelSpec> {
    use crate::synth::COHORT_PROFILES;
    let profile = |col: usize| -> BTreeMap<CohortId, f64> {
        COHORT_PROFILES
            .iter()
            .map(|p| (CohortId::from(p.name), p.auc[col]))
            .collect()
    };
    let stub = |id: &str, target_auc, min_timepoints, cost_s| ModelSpec {
        id: ModelId::from(id),
        kind: ModelKind::BinormalStub(StubParams {
            target_auc,
            default_auc: None,
            seed,
        }),
        requirements: Requirements {
            min_timepoints,
            required_fields: Vec::new(),
        },
        cost_s,
    };
    vec![
        stub("DLI", profile(0), 1, 0.005),
        stub("DLS", profile(1), 1, 0.005),
        stub("Sybil", profile(2), 1, 12.5),
        stub("Liao", BTreeMap::new(), 1, 3.0),
        stub("TD-ViT", BTreeMap::new(), 2, 1.5),
        stub("DLSTM", BTreeMap::new(), 2, 0.5),
    ]
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Logistic(_) => "logistic",
            ModelKind::Adapter(_) => "adapter",
            ModelKind::BinormalStub(_) => "binormal_stub",
        })
    }
}
