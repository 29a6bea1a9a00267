//! Conversion of patient records into retrieval vectors.
//!
//! Metadata is z-scored (numeric) or one-hot encoded (categorical) with
//! statistics fitted on the retrieval database only. The imaging map is
//! average-pooled over its temporal axis (or flattened), multiplied by the
//! feature weight, and appended to the metadata block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{
    DatasetSchema, FeatureMap, FieldKind, FusedVector, MetadataValue, PatientRecord, FEATURE_COLS, FEATURE_ROWS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Pooled,
    Flattened,
}

impl Aggregation {
    pub fn output_dim(self) -> usize {
        match self {
            Aggregation::Pooled => FEATURE_COLS,
            Aggregation::Flattened => FEATURE_ROWS * FEATURE_COLS,
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Pooled => "pooled",
            Aggregation::Flattened => "flattened",
        })
    }
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pooled" => Ok(Aggregation::Pooled),
            "flattened" => Ok(Aggregation::Flattened),
            other => Err(format!("unknown aggregation {other:?} (expected pooled|flattened)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Weight applied to the aggregated imaging block before concatenation.
    #[serde(default = "default_feature_weight")]
    pub feature_weight: f64,
}

fn default_feature_weight() -> f64 {
    0.1
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::Pooled,
            feature_weight: default_feature_weight(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.feature_weight.is_finite() && self.feature_weight >= 0.0) {
            return Err(FusionError::FeatureWeight(self.feature_weight));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldStats {
    Numeric {
        name: String,
        mean: f64,
        /// Sample standard deviation; 0 marks a constant field encoded as 0.
        sd: f64,
        indicator: bool,
    },
    Categorical {
        name: String,
        categories: Vec<String>,
        indicator: bool,
    },
}

impl FieldStats {
    pub fn name(&self) -> &str {
        match self {
            FieldStats::Numeric { name, .. } | FieldStats::Categorical { name, .. } => name,
        }
    }

    fn width(&self) -> usize {
        match self {
            FieldStats::Numeric { indicator, .. } => 1 + usize::from(*indicator),
            FieldStats::Categorical {
                categories, indicator, ..
            } => categories.len() + usize::from(*indicator),
        }
    }
}

/// Metadata encoding fitted on a retrieval database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingStats {
    pub fields: Vec<FieldStats>,
}

impl EncodingStats {
    pub fn metadata_dim(&self) -> usize {
        self.fields.iter().map(FieldStats::width).sum()
    }

    pub fn fused_dim(&self, aggregation: Aggregation) -> usize {
        self.metadata_dim() + aggregation.output_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncodingWarning {
    /// A categorical value outside the declared list; its one-hot block is all zero.
    UnknownCategory { field: String, value: String },
    /// A value of the wrong kind; encoded as missing.
    KindMismatch { field: String },
}

impl fmt::Display for EncodingWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncodingWarning::UnknownCategory { field, value } => {
                write!(f, "field {field}: unknown category {value:?} encoded as all-zero")
            }
            EncodingWarning::KindMismatch { field } => write!(f, "field {field}: wrong value kind encoded as missing"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("cannot fit encoding on an empty database")]
    EmptyDatabase,
    #[error("feature shape {0}x{1}, expected {FEATURE_ROWS}x{FEATURE_COLS}")]
    FeatureShape(usize, usize),
    #[error("feature weight must be finite and non-negative, got {0}")]
    FeatureWeight(f64),
}

/// Fits z-score statistics (sample sd, n-1) and one-hot category lists from
/// the database. Missing values are excluded from the statistics.
pub fn fit_encoding(database: &[PatientRecord], schema: &DatasetSchema) -> Result<EncodingStats, FusionError> {
    if database.is_empty() {
        return Err(FusionError::EmptyDatabase);
    }
    let fields = schema
        .fields
        .iter()
        .map(|spec| match &spec.kind {
            FieldKind::Numeric => {
                let values: Vec<f64> = database
                    .iter()
                    .filter_map(|r| r.metadata.get(&spec.name).as_number())
                    .collect();
                let (mean, sd) = mean_and_sample_sd(&values);
                FieldStats::Numeric {
                    name: spec.name.clone(),
                    mean,
                    sd,
                    indicator: spec.missing_indicator,
                }
            }
            FieldKind::Categorical { categories } => FieldStats::Categorical {
                name: spec.name.clone(),
                categories: categories.clone(),
                indicator: spec.missing_indicator,
            },
        })
        .collect();
    Ok(EncodingStats { fields })
}

fn mean_and_sample_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sd = (ss / (n - 1.0)).sqrt();
    // Rounding can leave a tiny positive sd on a constant column.
    let sd = if values.iter().all(|v| *v == values[0]) {
        0.0
    } else {
        sd
    };
    (mean, sd)
}

/// Encodes the metadata block. Unknown categories produce a warning, never an error.
pub fn encode_metadata(record: &PatientRecord, stats: &EncodingStats) -> (Vec<f64>, Vec<EncodingWarning>) {
    let mut out = Vec::with_capacity(stats.metadata_dim());
    let mut warnings = Vec::new();
    for field in &stats.fields {
        let value = record.metadata.get(field.name());
        match field {
            FieldStats::Numeric {
                name,
                mean,
                sd,
                indicator,
            } => {
                let number = match value {
                    MetadataValue::Number(v) => Some(*v),
                    MetadataValue::Missing => None,
                    MetadataValue::Category(_) => {
                        warnings.push(EncodingWarning::KindMismatch { field: name.clone() });
                        None
                    }
                };
                let z = match number {
                    Some(v) if *sd > 0.0 => (v - mean) / sd,
                    _ => 0.0,
                };
                out.push(z);
                if *indicator {
                    out.push(if number.is_none() { 1.0 } else { 0.0 });
                }
            }
            FieldStats::Categorical {
                name,
                categories,
                indicator,
            } => {
                let start = out.len();
                out.resize(start + categories.len(), 0.0);
                let missing = match value {
                    MetadataValue::Category(c) => {
                        match categories.iter().position(|k| k == c) {
                            Some(i) => out[start + i] = 1.0,
                            None => warnings.push(EncodingWarning::UnknownCategory {
                                field: name.clone(),
                                value: c.clone(),
                            }),
                        }
                        false
                    }
                    MetadataValue::Missing => true,
                    MetadataValue::Number(_) => {
                        warnings.push(EncodingWarning::KindMismatch { field: name.clone() });
                        true
                    }
                };
                if *indicator {
                    out.push(if missing { 1.0 } else { 0.0 });
                }
            }
        }
    }
    (out, warnings)
}

fn check_shape(map: &FeatureMap) -> Result<(), FusionError> {
    if map.has_standard_shape() {
        Ok(())
    } else {
        Err(FusionError::FeatureShape(map.rows(), map.cols()))
    }
}

/// Column means over the temporal axis: a 128-vector.
pub fn pool_features(map: &FeatureMap) -> Result<Vec<f64>, FusionError> {
    check_shape(map)?;
    let mut out = vec![0.0f64; FEATURE_COLS];
    for r in 0..FEATURE_ROWS {
        for (acc, v) in out.iter_mut().zip(map.row(r)) {
            *acc += f64::from(*v);
        }
    }
    let n = FEATURE_ROWS as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Row-major concatenation of the map: a 640-vector.
pub fn flatten_features(map: &FeatureMap) -> Result<Vec<f64>, FusionError> {
    check_shape(map)?;
    Ok(map.values().iter().map(|v| f64::from(*v)).collect())
}

pub fn fuse(record: &PatientRecord, stats: &EncodingStats, config: &FusionConfig) -> Result<FusedVector, FusionError> {
    fuse_with_warnings(record, stats, config).map(|(v, _)| v)
}

pub fn fuse_with_warnings(
    record: &PatientRecord,
    stats: &EncodingStats,
    config: &FusionConfig,
) -> Result<(FusedVector, Vec<EncodingWarning>), FusionError> {
    config.validate()?;
    let features = match config.aggregation {
        Aggregation::Pooled => pool_features(&record.features)?,
        Aggregation::Flattened => flatten_features(&record.features)?,
    };
    let (mut values, warnings) = encode_metadata(record, stats);
    values.extend(features.into_iter().map(|v| config.feature_weight * v));
    Ok((FusedVector::new(values), warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{FieldSpec, MetadataRecord};
    use proptest::prelude::*;

    fn schema() -> DatasetSchema {
        DatasetSchema {
            cohorts: vec!["A".into()],
            fields: vec![
                FieldSpec::numeric("age", Some("years")),
                FieldSpec::categorical("smoking_status", ["current", "former", "never"]),
            ],
        }
    }

    fn patient(id: &str, age: MetadataValue, smoking: MetadataValue, features: FeatureMap) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            cohort: "A".into(),
            metadata: MetadataRecord::new().with("age", age).with("smoking_status", smoking),
            features,
            label: 0,
            timepoints: 1,
        }
    }

    fn aged(id: &str, age: f64) -> PatientRecord {
        patient(
            id,
            MetadataValue::Number(age),
            MetadataValue::Category("never".into()),
            FeatureMap::zeros(),
        )
    }

    fn age_stats() -> EncodingStats {
        fit_encoding(&[aged("a", 40.0), aged("b", 60.0)], &schema()).unwrap()
    }

    #[test]
    fn fit_uses_sample_sd() {
        let stats = age_stats();
        let FieldStats::Numeric { mean, sd, .. } = &stats.fields[0] else {
            panic!()
        };
        assert_eq!(*mean, 50.0);
        assert!((sd - 14.142_135_623_730_951).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_empty_database() {
        assert_eq!(fit_encoding(&[], &schema()), Err(FusionError::EmptyDatabase));
    }

    #[test]
    fn one_hot_in_declared_order() {
        let stats = age_stats();
        let r = patient(
            "x",
            MetadataValue::Number(50.0),
            MetadataValue::Category("former".into()),
            FeatureMap::zeros(),
        );
        let (v, w) = encode_metadata(&r, &stats);
        assert!(w.is_empty());
        // age z, age missing, current, former, never, smoking missing
        assert_eq!(v, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(stats.metadata_dim(), 6);
    }

    #[test]
    fn z_score_of_one_sd() {
        let (v, _) = encode_metadata(&aged("x", 64.1421), &age_stats());
        assert!((v[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_field_encodes_zero() {
        let stats = fit_encoding(&[aged("a", 55.0), aged("b", 55.0), aged("c", 55.0)], &schema()).unwrap();
        let (v, _) = encode_metadata(&aged("x", 80.0), &stats);
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn missing_numeric_sets_indicator() {
        let r = patient(
            "x",
            MetadataValue::Missing,
            MetadataValue::Category("never".into()),
            FeatureMap::zeros(),
        );
        let (v, _) = encode_metadata(&r, &age_stats());
        assert_eq!(&v[..2], &[0.0, 1.0]);
    }

    #[test]
    fn unknown_category_warns_and_zeroes() {
        let r = patient(
            "x",
            MetadataValue::Number(50.0),
            MetadataValue::Category("vaping".into()),
            FeatureMap::zeros(),
        );
        let (v, w) = encode_metadata(&r, &age_stats());
        assert_eq!(&v[2..], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(
            w,
            vec![EncodingWarning::UnknownCategory {
                field: "smoking_status".into(),
                value: "vaping".into()
            }]
        );
    }

    #[test]
    fn pool_of_ones_and_ramp() {
        assert!(pool_features(&FeatureMap::filled(1.0))
            .unwrap()
            .iter()
            .all(|v| *v == 1.0));
        let ramp = FeatureMap::from_fn(5, 128, |r, c| if c == 7 { (r + 1) as f32 } else { 0.0 });
        let pooled = pool_features(&ramp).unwrap();
        assert_eq!(pooled[7], 3.0);
        assert_eq!(pooled[6], 0.0);
        assert!(pool_features(&FeatureMap::zeros()).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn flatten_is_row_major() {
        let map = FeatureMap::from_fn(5, 128, |r, _| (r + 1) as f32);
        let flat = flatten_features(&map).unwrap();
        assert_eq!(flat.len(), 640);
        assert!(flat[..128].iter().all(|v| *v == 1.0));
        assert!(flat[128..256].iter().all(|v| *v == 2.0));
        assert!(flat[512..].iter().all(|v| *v == 5.0));
        assert!(flatten_features(&FeatureMap::zeros())
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn aggregation_rejects_bad_shape() {
        let map = FeatureMap::from_fn(4, 128, |_, _| 0.0);
        assert_eq!(pool_features(&map), Err(FusionError::FeatureShape(4, 128)));
        assert_eq!(flatten_features(&map), Err(FusionError::FeatureShape(4, 128)));
    }

    #[test]
    fn fuse_weights_the_feature_block() {
        let stats = age_stats();
        let r = patient(
            "x",
            MetadataValue::Number(50.0),
            MetadataValue::Category("never".into()),
            FeatureMap::filled(3.0),
        );
        let v = fuse(&r, &stats, &FusionConfig::default()).unwrap();
        assert_eq!(v.dim(), 6 + 128);
        assert!((v.as_slice()[6] - 0.3).abs() < 1e-15);

        let zero = FusionConfig {
            feature_weight: 0.0,
            ..Default::default()
        };
        let v = fuse(&r, &stats, &zero).unwrap();
        assert!(v.as_slice()[6..].iter().all(|x| *x == 0.0));

        let flat = FusionConfig {
            aggregation: Aggregation::Flattened,
            ..Default::default()
        };
        assert_eq!(fuse(&r, &stats, &flat).unwrap().dim(), 6 + 640);
    }

    #[test]
    fn fused_dim_is_concatenation_length() {
        let schema = DatasetSchema {
            cohorts: vec!["A".into()],
            fields: (0..5).map(|i| FieldSpec::numeric(format!("f{i}"), None)).collect(),
        };
        let stats = fit_encoding(&[aged("a", 1.0)], &schema).unwrap();
        assert_eq!(stats.metadata_dim(), 10);
        assert_eq!(stats.fused_dim(Aggregation::Pooled), 138);
    }

    #[test]
    fn negative_weight_rejected() {
        let stats = age_stats();
        let cfg = FusionConfig {
            feature_weight: -0.5,
            ..Default::default()
        };
        assert_eq!(
            fuse(&aged("x", 1.0), &stats, &cfg),
            Err(FusionError::FeatureWeight(-0.5))
        );
    }

    fn feature_map() -> impl Strategy<Value = FeatureMap> {
        proptest::collection::vec(-100.0f32..100.0, 640).prop_map(|v| FeatureMap::new(5, 128, v).unwrap())
    }

    fn l2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    proptest! {
        #[test]
        fn pooling_is_linear(map in feature_map(), c in -4.0f32..4.0) {
            // Power-of-two scale keeps the f32 products exact.
            let c = c.round().exp2();
            let lhs = pool_features(&map.scaled(c)).unwrap();
            let rhs: Vec<f64> = pool_features(&map).unwrap().iter().map(|v| v * f64::from(c)).collect();
            for (a, b) in lhs.iter().zip(&rhs) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn pooling_identical_rows_returns_the_row(row in proptest::collection::vec(-100.0f32..100.0, 128)) {
            let map = FeatureMap::from_fn(5, 128, |_, c| row[c]);
            let pooled = pool_features(&map).unwrap();
            for (p, r) in pooled.iter().zip(&row) {
                prop_assert!((p - f64::from(*r)).abs() <= 1e-12 * (1.0 + r.abs() as f64));
            }
        }

        #[test]
        fn zero_weight_distances_equal_metadata_distances(
            a in feature_map(), b in feature_map(), age_a in 20.0f64..90.0, age_b in 20.0f64..90.0,
        ) {
            let stats = age_stats();
            let cfg = FusionConfig { feature_weight: 0.0, ..Default::default() };
            let ra = patient("a", MetadataValue::Number(age_a), MetadataValue::Category("current".into()), a);
            let rb = patient("b", MetadataValue::Number(age_b), MetadataValue::Missing, b);
            let fa = fuse(&ra, &stats, &cfg).unwrap();
            let fb = fuse(&rb, &stats, &cfg).unwrap();
            let (ma, _) = encode_metadata(&ra, &stats);
            let (mb, _) = encode_metadata(&rb, &stats);
            prop_assert_eq!(l2(fa.as_slice(), fb.as_slice()), l2(&ma, &mb));
        }

        #[test]
        fn fuse_is_deterministic(map in feature_map(), age in 20.0f64..90.0) {
            let stats = age_stats();
            let r = patient("a", MetadataValue::Number(age), MetadataValue::Category("current".into()), map);
            let x = fuse(&r, &stats, &FusionConfig::default()).unwrap();
            let y = fuse(&r, &stats, &FusionConfig::default()).unwrap();
            let xb: Vec<u64> = x.as_slice().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.as_slice().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(xb, yb);
        }
    }
}
