//! Domain types shared by every stage of the pipeline.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rows of the per-patient imaging feature map (temporal axis).
pub const FEATURE_ROWS: usize = 5;
/// Columns of the per-patient imaging feature map (embedding axis).
pub const FEATURE_COLS: usize = 128;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(name: impl Into<String>) -> Self {
                Self(name.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// Name of a reference cohort (the retrieval class label).
    CohortId
);
string_id!(
    /// Name of a registered risk model.
    ModelId
);

/// One metadata value. Serialized as a JSON number, string or `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetadataValue {
    Number(f64),
    Category(String),
    Missing,
}

impl MetadataValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            MetadataValue::Number(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_category(&self) -> Option<&str> {
        match self {
            MetadataValue::Category(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, MetadataValue::Missing)
    }
}

/// Metadata fields of one patient keyed by field name. Absent fields read as missing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetadataRecord(BTreeMap<String, MetadataValue>);

impl MetadataRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, value: MetadataValue) -> Self {
        self.insert(name, value);
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, value: MetadataValue) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &MetadataValue {
        const MISSING: MetadataValue = MetadataValue::Missing;
        self.0.get(name).unwrap_or(&MISSING)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &MetadataValue)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldKind {
    Numeric,
    Categorical { categories: Vec<String> },
}

/// Declaration of one metadata field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    /// Adds a 0/1 missing-indicator column to the encoded metadata.
    #[serde(default = "default_true")]
    pub missing_indicator: bool,
}

fn default_true() -> bool {
    true
}

impl FieldSpec {
    pub fn numeric(name: impl Into<String>, unit: Option<&str>) -> Self {
        Self {
            name: name.into(),
            kind: FieldKind::Numeric,
            unit: unit.map(str::to_string),
            missing_indicator: true,
        }
    }

    pub fn categorical<S: Into<String>>(name: impl Into<String>, categories: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.into(),
            kind: FieldKind::Categorical {
                categories: categories.into_iter().map(Into::into).collect(),
            },
            unit: None,
            missing_indicator: true,
        }
    }
}

/// Declared cohort set and metadata fields of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub cohorts: Vec<CohortId>,
    pub fields: Vec<FieldSpec>,
}

impl DatasetSchema {
    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn has_cohort(&self, cohort: &CohortId) -> bool {
        self.cohorts.contains(cohort)
    }
}

/// Dense row-major imaging feature map. The standard shape is 5×128; other
/// shapes are representable so that validation can report them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

#[derive(Debug, Error, PartialEq)]
#[error("feature values length {len} does not match {rows}x{cols}")]
pub struct FeatureLengthError {
    pub rows: usize,
    pub cols: usize,
    pub len: usize,
}

impl FeatureMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self, FeatureLengthError> {
        if values.len() != rows * cols {
            return Err(FeatureLengthError {
                rows,
                cols,
                len: values.len(),
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros() -> Self {
        Self::filled(0.0)
    }

    pub fn filled(value: f32) -> Self {
        Self {
            rows: FEATURE_ROWS,
            cols: FEATURE_COLS,
            values: vec![value; FEATURE_ROWS * FEATURE_COLS],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self { rows, cols, values }
    }

    /// Builds a map from nested rows; ragged input is rejected.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, FeatureLengthError> {
        let cols = rows.first().map_or(0, Vec::len);
        let values: Vec<f32> = rows.iter().flatten().copied().collect();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(FeatureLengthError {
                rows: rows.len(),
                cols,
                len: values.len(),
            });
        }
        Self::new(rows.len(), cols, values)
    }

    pub fn to_rows(&self) -> Vec<Vec<f32>> {
        self.values.chunks(self.cols.max(1)).map(<[f32]>::to_vec).collect()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn has_standard_shape(&self) -> bool {
        self.shape() == (FEATURE_ROWS, FEATURE_COLS)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// One patient of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub cohort: CohortId,
    pub metadata: MetadataRecord,
    pub features: FeatureMap,
    /// 1 = cancer, 0 = benign.
    pub label: u8,
    /// Number of available scans.
    pub timepoints: u32,
}

/// Retrieval representation: encoded metadata followed by the weighted
/// aggregated imaging block.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedVector(Vec<f64>);

impl FusedVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for FusedVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Output of the two-stage agent for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskPrediction {
    pub patient_id: String,
    pub probability: f64,
    pub model: ModelId,
    /// Retrieved cohort.
    pub cohort: CohortId,
    pub neighbor_ids: Vec<String>,
    pub votes: BTreeMap<CohortId, usize>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationIssue {
    #[error("feature shape {rows}x{cols}, expected {FEATURE_ROWS}x{FEATURE_COLS}")]
    FeatureShape { rows: usize, cols: usize },
    #[error("non-finite feature value at ({row}, {col})")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("label domain: {0} is not 0 or 1")]
    LabelDomain(u8),
    #[error("timepoints must be >= 1")]
    Timepoints,
    #[error("unknown cohort {0}")]
    UnknownCohort(CohortId),
    #[error("out-of-schema metadata field {0}")]
    UnknownField(String),
    #[error("metadata field {field}: expected {expected} value")]
    KindMismatch { field: String, expected: &'static str },
    #[error("metadata field {0}: non-finite number")]
    NonFiniteMetadata(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("patient {patient_id}: {}", join_issues(.issues))]
pub struct ValidationError {
    pub patient_id: String,
    pub issues: Vec<ValidationIssue>,
}

fn join_issues(issues: &[ValidationIssue]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Checks every record invariant against `schema`, returning the record
/// unchanged or the full list of violations. Missing metadata is accepted.
pub fn validate_record(record: PatientRecord, schema: &DatasetSchema) -> Result<PatientRecord, ValidationError> {
    let mut issues = Vec::new();

    if !record.features.has_standard_shape() {
        issues.push(ValidationIssue::FeatureShape {
            rows: record.features.rows(),
            cols: record.features.cols(),
        });
    }
    if let Some(i) = record.features.values().iter().position(|v| !v.is_finite()) {
        let cols = record.features.cols().max(1);
        issues.push(ValidationIssue::NonFiniteFeature {
            row: i / cols,
            col: i % cols,
        });
    }
    if record.label > 1 {
        issues.push(ValidationIssue::LabelDomain(record.label));
    }
    if record.timepoints < 1 {
        issues.push(ValidationIssue::Timepoints);
    }
    if !schema.has_cohort(&record.cohort) {
        issues.push(ValidationIssue::UnknownCohort(record.cohort.clone()));
    }
    for (name, value) in record.metadata.iter() {
        let Some(spec) = schema.field(name) else {
            issues.push(ValidationIssue::UnknownField(name.to_string()));
            continue;
        };
        match (&spec.kind, value) {
            (_, MetadataValue::Missing) => {}
            (FieldKind::Numeric, MetadataValue::Number(v)) => {
                if !v.is_finite() {
                    issues.push(ValidationIssue::NonFiniteMetadata(name.to_string()));
                }
            }
            (FieldKind::Numeric, _) => issues.push(ValidationIssue::KindMismatch {
                field: name.to_string(),
                expected: "numeric",
            }),
            (FieldKind::Categorical { .. }, MetadataValue::Category(_)) => {}
            (FieldKind::Categorical { .. }, _) => issues.push(ValidationIssue::KindMismatch {
                field: name.to_string(),
                expected: "categorical",
            }),
        }
    }

    if issues.is_empty() {
        Ok(record)
    } else {
        Err(ValidationError {
            patient_id: record.patient_id,
            issues,
        })
    }
}
