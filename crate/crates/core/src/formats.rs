//! On-disk formats: JSONL patient records, the dense feature file, schema and
//! dataset directories.
//!
//! Feature file layout (little-endian): `CAFV`, version u32, count u32,
//! rows u32, cols u32, then count × rows × cols f32 row-major.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{PerformanceTable, PolicyError};
use crate::types::{
    validate_record, CohortId, DatasetSchema, FeatureMap, MetadataRecord, PatientRecord, ValidationError, FEATURE_COLS,
    FEATURE_ROWS,
};

pub const FEATURE_MAGIC: &[u8; 4] = b"CAFV";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER: usize = 20;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const FEATURES_FILE: &str = "features.cafv";
pub const SCHEMA_FILE: &str = "schema.json";
pub const TABLE_FILE: &str = "table.csv";

const RECORD_FIELDS: [&str; 6] = ["patient_id", "cohort", "metadata", "label", "timepoints", "feature_ref"];

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("feature file: {0}")]
    Features(String),
    #[error("patient {patient_id}: feature_ref {feature_ref} beyond feature file of {count} maps")]
    DanglingRef {
        patient_id: String,
        feature_ref: u64,
        count: usize,
    },
    #[error("duplicate patient_id {0}")]
    DuplicateId(String),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Table(#[from] PolicyError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One line of the records file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLine {
    pub patient_id: String,
    pub cohort: CohortId,
    pub metadata: MetadataRecord,
    pub label: u8,
    #[serde(default = "one")]
    pub timepoints: u32,
    pub feature_ref: u64,
}

fn one() -> u32 {
    1
}

/// Parses one records line. Strict mode rejects fields outside the fixed set.
pub fn parse_record_line(text: &str, line: usize, lenient: bool) -> Result<RecordLine, FormatError> {
    let parse = |message: String| FormatError::Parse { line, message };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse(e.to_string()))?;
    let object = value.as_object().ok_or_else(|| parse("expected an object".into()))?;
    if !lenient {
        if let Some(key) = object.keys().find(|k| !RECORD_FIELDS.contains(&k.as_str())) {
            return Err(parse(format!("unknown field `{key}`")));
        }
    }
    serde_json::from_value(value).map_err(|e| parse(e.to_string()))
}

/// Reads every non-blank line; line numbers are one-based.
pub fn read_records(path: &Path, lenient: bool) -> Result<Vec<RecordLine>, FormatError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record_line(&line, i + 1, lenient)?);
    }
    Ok(out)
}

/// Writes records with `feature_ref` equal to the record's position.
pub fn write_records(path: &Path, records: &[PatientRecord]) -> Result<(), FormatError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for (i, r) in records.iter().enumerate() {
        let line = RecordLine {
            patient_id: r.patient_id.clone(),
            cohort: r.cohort.clone(),
            metadata: r.metadata.clone(),
            label: r.label,
            timepoints: r.timepoints,
            feature_ref: i as u64,
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| FormatError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn encode_features(maps: &[&FeatureMap]) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(FEATURE_HEADER + maps.len() * FEATURE_ROWS * FEATURE_COLS * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    let count = u32::try_from(maps.len()).map_err(|_| FormatError::Features("too many maps".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&(FEATURE_ROWS as u32).to_le_bytes());
    out.extend_from_slice(&(FEATURE_COLS as u32).to_le_bytes());
    for (i, m) in maps.iter().enumerate() {
        if !m.has_standard_shape() {
            let (r, c) = m.shape();
            return Err(FormatError::Features(format!(
                "map {i} is {r}x{c}, expected {FEATURE_ROWS}x{FEATURE_COLS}"
            )));
        }
        for v in m.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<FeatureMap>, FormatError> {
    let bad = |m: String| FormatError::Features(m);
    if bytes.len() < FEATURE_HEADER {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let (version, count, rows, cols) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize);
    if version != FEATURE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    if rows != FEATURE_ROWS || cols != FEATURE_COLS {
        return Err(bad(format!(
            "feature shape {rows}x{cols}, expected {FEATURE_ROWS}x{FEATURE_COLS}"
        )));
    }
    let per = rows * cols * 4;
    let expected = count
        .checked_mul(per)
        .and_then(|n| n.checked_add(FEATURE_HEADER))
        .ok_or_else(|| bad("count overflows".into()))?;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for {count} maps, found {}",
            bytes.len()
        )));
    }
    Ok(bytes[FEATURE_HEADER..]
        .chunks_exact(per)
        .map(|chunk| {
            let values = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            FeatureMap::new(rows, cols, values).expect("length matches header")
        })
        .collect())
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureMap>, FormatError> {
    decode_features(&fs::read(path).map_err(io_err(path))?)
}

pub fn write_features(path: &Path, maps: &[&FeatureMap]) -> Result<(), FormatError> {
    fs::write(path, encode_features(maps)?).map_err(io_err(path))
}

pub fn read_schema(path: &Path) -> Result<DatasetSchema, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| FormatError::Schema(e.to_string()))
}

pub fn write_schema(path: &Path, schema: &DatasetSchema) -> Result<(), FormatError> {
    let text = serde_json::to_string_pretty(schema).map_err(|e| FormatError::Schema(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_table(path: &Path) -> Result<PerformanceTable, FormatError> {
    Ok(PerformanceTable::from_csv(
        &fs::read_to_string(path).map_err(io_err(path))?,
    )?)
}

pub fn write_table(path: &Path, table: &PerformanceTable) -> Result<(), FormatError> {
    fs::write(path, table.to_csv()).map_err(io_err(path))
}

/// Resolves feature references and validates every record against the schema.
pub fn assemble(
    lines: Vec<RecordLine>,
    features: &[FeatureMap],
    schema: &DatasetSchema,
) -> Result<Vec<PatientRecord>, FormatError> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(lines.len());
    for line in lines {
        if !seen.insert(line.patient_id.clone()) {
            return Err(FormatError::DuplicateId(line.patient_id));
        }
        let features = usize::try_from(line.feature_ref)
            .ok()
            .and_then(|i| features.get(i))
            .ok_or_else(|| FormatError::DanglingRef {
                patient_id: line.patient_id.clone(),
                feature_ref: line.feature_ref,
                count: features.len(),
            })?
            .clone();
        let record = PatientRecord {
            patient_id: line.patient_id,
            cohort: line.cohort,
            metadata: line.metadata,
            features,
            label: line.label,
            timepoints: line.timepoints,
        };
        out.push(validate_record(record, schema)?);
    }
    Ok(out)
}

/// Per-cohort record and positive counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestSummary {
    pub records: usize,
    pub positives: usize,
    pub cohorts: BTreeMap<CohortId, usize>,
}

impl IngestSummary {
    pub fn of(records: &[PatientRecord]) -> Self {
        let mut s = Self {
            records: records.len(),
            ..Self::default()
        };
        for r in records {
            s.positives += usize::from(r.label);
            *s.cohorts.entry(r.cohort.clone()).or_default() += 1;
        }
        s
    }
}

pub fn ingest(
    records: &Path,
    features: &Path,
    schema: &DatasetSchema,
    lenient: bool,
) -> Result<Vec<PatientRecord>, FormatError> {
    let lines = read_records(records, lenient)?;
    let maps = read_features(features)?;
    assemble(lines, &maps, schema)
}

/// A dataset directory: records, features, schema and (optionally) a table.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetDir {
    pub root: PathBuf,
}

impl DatasetDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn records(&self) -> PathBuf {
        self.root.join(RECORDS_FILE)
    }

    pub fn features(&self) -> PathBuf {
        self.root.join(FEATURES_FILE)
    }

    pub fn schema(&self) -> PathBuf {
        self.root.join(SCHEMA_FILE)
    }

    pub fn table(&self) -> PathBuf {
        self.root.join(TABLE_FILE)
    }

    pub fn write(
        &self,
        schema: &DatasetSchema,
        records: &[PatientRecord],
        table: Option<&PerformanceTable>,
    ) -> Result<(), FormatError> {
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        write_schema(&self.schema(), schema)?;
        write_records(&self.records(), records)?;
        let maps: Vec<&FeatureMap> = records.iter().map(|r| &r.features).collect();
        write_features(&self.features(), &maps)?;
        if let Some(t) = table {
            write_table(&self.table(), t)?;
        }
        Ok(())
    }

    pub fn load(&self, lenient: bool) -> Result<(DatasetSchema, Vec<PatientRecord>), FormatError> {
        let schema = read_schema(&self.schema())?;
        let records = ingest(&self.records(), &self.features(), &schema, lenient)?;
        Ok((schema, records))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{FieldSpec, MetadataValue};

    fn schema() -> DatasetSchema {
        DatasetSchema {
            cohorts: vec!["A".into(), "B".into()],
            fields: vec![
                FieldSpec::numeric("age", Some("years")),
                FieldSpec::categorical("gender", ["female", "male"]),
            ],
        }
    }

    fn record(i: usize) -> PatientRecord {
        PatientRecord {
            patient_id: format!("p{i}"),
            cohort: if i % 2 == 0 { "A".into() } else { "B".into() },
            metadata: MetadataRecord::new()
                .with("age", MetadataValue::Number(50.0 + i as f64 * 0.1))
                .with(
                    "gender",
                    if i % 3 == 0 {
                        MetadataValue::Missing
                    } else {
                        MetadataValue::Category("male".into())
                    },
                ),
            features: FeatureMap::from_fn(FEATURE_ROWS, FEATURE_COLS, |r, c| {
                (i * 1000 + r * 128 + c) as f32 * 0.25
            }),
            label: (i % 2) as u8,
            timepoints: 1 + (i % 3) as u32,
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<PatientRecord> = (0..10).map(record).collect();
        let ds = DatasetDir::new(dir.path().join("data"));
        ds.write(&schema(), &records, None).unwrap();
        let (s, back) = ds.load(false).unwrap();
        assert_eq!(s, schema());
        assert_eq!(back, records);
        let bytes = fs::read(ds.features()).unwrap();
        assert_eq!(bytes.len(), 20 + 10 * 640 * 4);
        assert_eq!(&bytes[..4], b"CAFV");
    }

    #[test]
    fn strict_and_lenient_lines() {
        let text = r#"{"patient_id":"x","cohort":"A","metadata":{"age":61.5,"gender":null},"label":1,"timepoints":2,"feature_ref":0,"site":"north"}"#;
        let err = parse_record_line(text, 7, false).unwrap_err();
        assert_eq!(err.to_string(), "line 7: unknown field `site`");
        let line = parse_record_line(text, 7, true).unwrap();
        assert_eq!(line.metadata.get("gender"), &MetadataValue::Missing);
        assert_eq!(line.timepoints, 2);
        assert!(matches!(
            parse_record_line("{", 3, false),
            Err(FormatError::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn dangling_and_duplicate() {
        let maps = vec![FeatureMap::zeros()];
        let line = |id: &str, r: u64| RecordLine {
            patient_id: id.into(),
            cohort: "A".into(),
            metadata: MetadataRecord::new(),
            label: 0,
            timepoints: 1,
            feature_ref: r,
        };
        let err = assemble(vec![line("a", 0), line("b", 5)], &maps, &schema()).unwrap_err();
        assert!(matches!(&err, FormatError::DanglingRef { patient_id, .. } if patient_id == "b"));
        let err = assemble(vec![line("a", 0), line("a", 0)], &maps, &schema()).unwrap_err();
        assert_eq!(err.to_string(), "duplicate patient_id a");
    }

    #[test]
    fn feature_file_errors() {
        let m = FeatureMap::zeros();
        let mut bytes = encode_features(&[&m, &m]).unwrap();
        assert_eq!(decode_features(&bytes).unwrap().len(), 2);
        bytes.pop();
        assert!(decode_features(&bytes).is_err());
        let mut wrong = encode_features(&[&m]).unwrap();
        wrong[12] = 4;
        assert!(decode_features(&wrong)
            .unwrap_err()
            .to_string()
            .contains("feature shape 4x128"));
        assert!(encode_features(&[&FeatureMap::new(4, 128, vec![0.0; 512]).unwrap()]).is_err());
    }
}
