//! Synthetic multi-cohort datasets with planted retrieval geometry and model performance.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{fnv1a, standard_stubs, ModelKind, ModelRegistry, ModelSpec, Requirements, StubParams};
use crate::policy::PerformanceTable;
use crate::types::{
    CohortId, DatasetSchema, FeatureMap, FieldSpec, MetadataRecord, MetadataValue, ModelId, PatientRecord,
    FEATURE_COLS, FEATURE_ROWS,
};

/// Per-cohort size and planted DLI / DLS / Sybil AUCs of the reference study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortProfile {
    pub name: &'static str,
    pub size: usize,
    pub auc: [f64; 3],
}

/// Column order of [`CohortProfile::auc`].
pub const PROFILE_MODELS: [&str; 3] = ["DLI", "DLS", "Sybil"];

/// Sizes are the retrieval holdout counts divided by 0.30, adjusted to total 3750.
pub const COHORT_PROFILES: [CohortProfile; 9] = [
    CohortProfile {
        name: "BRONCH",
        size: 364,
        auc: [0.609, 0.643, 0.657],
    },
    CohortProfile {
        name: "MCL_VUMC",
        size: 274,
        auc: [0.827, 0.765, 0.829],
    },
    CohortProfile {
        name: "MCL_UPMC",
        size: 104,
        auc: [0.983, 0.880, 0.923],
    },
    CohortProfile {
        name: "MCL_DECAMP",
        size: 120,
        auc: [0.738, 0.753, 0.654],
    },
    CohortProfile {
        name: "MCL_UCD",
        size: 107,
        auc: [0.938, 0.805, 0.801],
    },
    CohortProfile {
        name: "VLSP",
        size: 858,
        auc: [0.510, 0.811, 0.783],
    },
    CohortProfile {
        name: "LI-VUMC",
        size: 204,
        auc: [0.824, 0.545, 0.725],
    },
    CohortProfile {
        name: "NLST_test_nodule",
        size: 851,
        auc: [0.545, 0.627, 0.853],
    },
    CohortProfile {
        name: "NLST_test",
        size: 868,
        auc: [0.534, 0.634, 0.838],
    },
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericDist {
    pub mean: f64,
    pub sd: f64,
}

/// Generative description of one cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSpec {
    pub name: CohortId,
    pub n_patients: usize,
    pub numeric: BTreeMap<String, NumericDist>,
    /// Category weights in declaration order.
    pub categorical: BTreeMap<String, Vec<(String, f64)>>,
    pub feature_centroid: FeatureMap,
    pub feature_noise_sd: f64,
    pub prevalence: f64,
    pub model_auc_profile: BTreeMap<ModelId, f64>,
    /// (timepoint count, weight).
    pub timepoints: Vec<(u32, f64)>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("no cohort specs given")]
    Empty,
    #[error("duplicate cohort name {0}")]
    DuplicateCohort(CohortId),
    #[error("degenerate spec for cohort {cohort}: {reason}")]
    Degenerate { cohort: CohortId, reason: String },
}

/// Records in generation order plus the table mirroring the planted profiles.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub schema: DatasetSchema,
    pub records: Vec<PatientRecord>,
    pub table: PerformanceTable,
}

impl CohortSpec {
    fn check(&self) -> Result<(), SynthError> {
        let bad = |reason: String| {
            Err(SynthError::Degenerate {
                cohort: self.name.clone(),
                reason,
            })
        };
        if self.n_patients < 4 {
            return bad(format!("n_patients {} < 4", self.n_patients));
        }
        let p = self.prevalence;
        let n = self.n_patients as f64;
        if !(p > 0.0 && p < 1.0) || n * p < 1.0 || n * (1.0 - p) < 1.0 {
            return bad(format!(
                "prevalence {p} gives fewer than one expected positive or negative"
            ));
        }
        for (name, d) in &self.numeric {
            if !d.mean.is_finite() || !(d.sd.is_finite() && d.sd >= 0.0) {
                return bad(format!("numeric field {name} has invalid distribution"));
            }
        }
        for (name, weights) in &self.categorical {
            if weights.is_empty()
                || weights.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0))
                || weights.iter().all(|(_, w)| *w == 0.0)
            {
                return bad(format!("categorical field {name} has invalid weights"));
            }
            if self.numeric.contains_key(name) {
                return bad(format!("field {name} is both numeric and categorical"));
            }
        }
        if !self.feature_centroid.has_standard_shape() {
            let (r, c) = self.feature_centroid.shape();
            return bad(format!("feature centroid is {r}x{c}"));
        }
        if !self.feature_centroid.values().iter().all(|v| v.is_finite()) {
            return bad("feature centroid is not finite".into());
        }
        if !(self.feature_noise_sd.is_finite() && self.feature_noise_sd >= 0.0) {
            return bad(format!("feature noise sd {}", self.feature_noise_sd));
        }
        for (m, a) in &self.model_auc_profile {
            if !(*a > 0.0 && *a < 1.0) {
                return bad(format!("target AUC {a} for {m} outside (0, 1)"));
            }
        }
        if self.timepoints.is_empty()
            || self
                .timepoints
                .iter()
                .any(|(t, w)| *t == 0 || !(w.is_finite() && *w >= 0.0))
            || self.timepoints.iter().all(|(_, w)| *w == 0.0)
        {
            return bad("invalid timepoint distribution".into());
        }
        Ok(())
    }
}

/// Schema implied by the specs: cohorts in spec order, numeric fields then
/// categorical fields, each sorted by name; categories in first-seen order.
pub fn schema_for(specs: &[CohortSpec]) -> DatasetSchema {
    let numeric: BTreeSet<&String> = specs.iter().flat_map(|s| s.numeric.keys()).collect();
    let mut categorical: BTreeMap<&String, Vec<String>> = BTreeMap::new();
    for s in specs {
        for (name, weights) in &s.categorical {
            let cats = categorical.entry(name).or_default();
            for (c, _) in weights {
                if !cats.contains(c) {
                    cats.push(c.clone());
                }
            }
        }
    }
    let mut fields: Vec<FieldSpec> = numeric
        .into_iter()
        .map(|n| FieldSpec::numeric(n.clone(), unit_of(n)))
        .collect();
    fields.extend(
        categorical
            .into_iter()
            .map(|(n, cats)| FieldSpec::categorical(n.clone(), cats)),
    );
    DatasetSchema {
        cohorts: specs.iter().map(|s| s.name.clone()).collect(),
        fields,
    }
}

fn unit_of(field: &str) -> Option<&'static str> {
    match field {
        "age" => Some("years"),
        "bmi" => Some("kg/m2"),
        "pack_years" => Some("pack-years"),
        _ => None,
    }
}

/// Performance table with one applicable row per planted (cohort, model) AUC.
pub fn table_for(specs: &[CohortSpec]) -> PerformanceTable {
    let mut table = PerformanceTable::new();
    for s in specs {
        for (m, a) in &s.model_auc_profile {
            table.insert(s.name.clone(), m.clone(), *a, true);
        }
    }
    table
}

/// Samples every cohort in spec order from one ChaCha8 stream.
pub fn generate(specs: &[CohortSpec], seed: u64) -> Result<SyntheticDataset, SynthError> {
    if specs.is_empty() {
        return Err(SynthError::Empty);
    }
    let mut seen = BTreeSet::new();
    for s in specs {
        if !seen.insert(&s.name) {
            return Err(SynthError::DuplicateCohort(s.name.clone()));
        }
        s.check()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(specs.iter().map(|s| s.n_patients).sum());
    for spec in specs {
        let degenerate = |reason: String| SynthError::Degenerate {
            cohort: spec.name.clone(),
            reason,
        };
        let numeric: Vec<(&String, Normal<f64>)> = spec
            .numeric
            .iter()
            .map(|(n, d)| {
                Normal::new(d.mean, d.sd)
                    .map(|dist| (n, dist))
                    .map_err(|e| degenerate(e.to_string()))
            })
            .collect::<Result<_, _>>()?;
        let categorical: Vec<(&String, Vec<&String>, WeightedIndex<f64>)> = spec
            .categorical
            .iter()
            .map(|(n, w)| {
                let index = WeightedIndex::new(w.iter().map(|(_, x)| *x)).map_err(|e| degenerate(e.to_string()))?;
                Ok((n, w.iter().map(|(c, _)| c).collect(), index))
            })
            .collect::<Result<_, SynthError>>()?;
        let timepoints =
            WeightedIndex::new(spec.timepoints.iter().map(|(_, w)| *w)).map_err(|e| degenerate(e.to_string()))?;
        let noise_sd = spec.feature_noise_sd as f32;
        for i in 0..spec.n_patients {
            let mut metadata = MetadataRecord::new();
            for (name, dist) in &numeric {
                metadata.insert(name.as_str(), MetadataValue::Number(dist.sample(&mut rng)));
            }
            for (name, cats, index) in &categorical {
                metadata.insert(
                    name.as_str(),
                    MetadataValue::Category(cats[index.sample(&mut rng)].clone()),
                );
            }
            let label = u8::from(rng.random_bool(spec.prevalence));
            let timepoints = spec.timepoints[timepoints.sample(&mut rng)].0;
            let centroid = spec.feature_centroid.values();
            let values: Vec<f32> = centroid
                .iter()
                .map(|c| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    c + noise_sd * z
                })
                .collect();
            let features = FeatureMap::new(FEATURE_ROWS, FEATURE_COLS, values).expect("centroid shape checked");
            records.push(PatientRecord {
                patient_id: format!("{}-{i:04}", spec.name),
                cohort: spec.name.clone(),
                metadata,
                features,
                label,
                timepoints,
            });
        }
    }
    Ok(SyntheticDataset {
        schema: schema_for(specs),
        records,
        table: table_for(specs),
    })
}

/// Logistic models plus one binormal stub per model named in the profiles.
/// Stubs of the reference pool keep their simulated costs.
pub fn stub_registry(specs: &[CohortSpec], seed: u64) -> ModelRegistry {
    let mut profiles: BTreeMap<ModelId, BTreeMap<CohortId, f64>> = BTreeMap::new();
    for s in specs {
        for (m, a) in &s.model_auc_profile {
            profiles.entry(m.clone()).or_default().insert(s.name.clone(), *a);
        }
    }
    let standard: BTreeMap<ModelId, ModelSpec> = standard_stubs(seed).into_iter().map(|s| (s.id.clone(), s)).collect();
    let pool = ModelRegistry::standard_pool(seed);
    let mut out = ModelRegistry::new();
    for spec in pool.specs() {
        if !profiles.contains_key(&spec.id) {
            out.register(spec.clone()).expect("ids unique in source registry");
        }
    }
    for (id, target_auc) in profiles {
        let (requirements, cost_s) = standard
            .get(&id)
            .map(|s| (s.requirements.clone(), s.cost_s))
            .unwrap_or_else(|| (Requirements::default(), 0.0));
        out.register(ModelSpec {
            id,
            kind: ModelKind::BinormalStub(StubParams {
                target_auc,
                default_auc: None,
                seed,
            }),
            requirements,
            cost_s,
        })
        .expect("profile ids unique");
    }
    out
}

fn unit_gaussian(tag: &str, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(tag.as_bytes()));
    let v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Direction in feature space constant across the rows, so pooling keeps it intact.
fn feature_direction(tag: &str) -> Vec<f64> {
    let col = unit_gaussian(tag, FEATURE_COLS);
    let mut out = Vec::with_capacity(FEATURE_ROWS * FEATURE_COLS);
    for _ in 0..FEATURE_ROWS {
        out.extend_from_slice(&col);
    }
    out
}

fn centroid(parts: &[(&[f64], f64)]) -> FeatureMap {
    let values = (0..FEATURE_ROWS * FEATURE_COLS)
        .map(|i| parts.iter().map(|(v, w)| v[i] * w).sum::<f64>() as f32)
        .collect();
    FeatureMap::new(FEATURE_ROWS, FEATURE_COLS, values).expect("standard shape")
}

const BASE_SCALE: f64 = 5.0;
const BASE_AGE: NumericDist = NumericDist { mean: 63.0, sd: 7.0 };
const BASE_BMI: NumericDist = NumericDist { mean: 27.0, sd: 4.5 };
const BASE_PACK: NumericDist = NumericDist { mean: 40.0, sd: 20.0 };

fn shifted(base: NumericDist, by_sd: f64) -> NumericDist {
    NumericDist {
        mean: base.mean + by_sd * base.sd,
        sd: base.sd,
    }
}

fn base_numeric(offset: [f64; 3]) -> BTreeMap<String, NumericDist> {
    BTreeMap::from([
        ("age".to_string(), shifted(BASE_AGE, offset[0])),
        ("bmi".to_string(), shifted(BASE_BMI, offset[1])),
        ("pack_years".to_string(), shifted(BASE_PACK, offset[2])),
    ])
}

fn categories(gender_female: f64, smoking: [f64; 3]) -> BTreeMap<String, Vec<(String, f64)>> {
    BTreeMap::from([
        (
            "gender".to_string(),
            vec![
                ("female".to_string(), gender_female),
                ("male".to_string(), 1.0 - gender_female),
            ],
        ),
        (
            "smoking_status".to_string(),
            vec![
                ("current".to_string(), smoking[0]),
                ("former".to_string(), smoking[1]),
                ("never".to_string(), smoking[2]),
            ],
        ),
    ])
}

/// Where a mimic cohort sits: metadata offsets in sd units, gender and
/// smoking mix, and a feature centroid built from weighted named directions.
struct Placement {
    offset: [f64; 3],
    female: f64,
    smoking: [f64; 3],
    directions: &'static [(&'static str, f64)],
    prevalence: f64,
    timepoints: &'static [(u32, f64)],
}

const SINGLE: &[(u32, f64)] = &[(1, 0.8), (2, 0.2)];
const SERIAL: &[(u32, f64)] = &[(1, 0.3), (2, 0.4), (3, 0.3)];

/// Distinct: BRONCH, VLSP. Confusable: the MCL sites (UPMC sits almost on
/// top of VUMC) and the NLST pair. LI-VUMC leans towards NLST.
fn placement(name: &str) -> Placement {
    let p = |offset, female, smoking, directions, prevalence, timepoints| Placement {
        offset,
        female,
        smoking,
        directions,
        prevalence,
        timepoints,
    };
    const MCL: [f64; 3] = [0.6, -0.2, 0.5];
    const NLST: [f64; 3] = [-0.2, 0.0, 0.6];
    match name {
        "BRONCH" => p(
            [0.2, 1.5, -1.2],
            0.45,
            [0.5, 0.4, 0.1],
            &[("bronch", 40.0)],
            0.45,
            SINGLE,
        ),
        "MCL_VUMC" => p(
            MCL,
            0.40,
            [0.35, 0.55, 0.1],
            &[("mcl", 30.0), ("MCL_VUMC", 8.0)],
            0.35,
            SINGLE,
        ),
        "MCL_UPMC" => p(
            MCL,
            0.40,
            [0.35, 0.55, 0.1],
            &[("mcl", 30.0), ("MCL_VUMC", 8.0), ("MCL_UPMC", 1.0)],
            0.35,
            SINGLE,
        ),
        "MCL_DECAMP" => p(
            [0.9, -0.5, 0.8],
            0.35,
            [0.4, 0.55, 0.05],
            &[("mcl", 30.0), ("MCL_DECAMP", 12.0)],
            0.35,
            SINGLE,
        ),
        "MCL_UCD" => p(
            [0.3, 0.2, 0.2],
            0.45,
            [0.3, 0.55, 0.15],
            &[("mcl", 30.0), ("MCL_UCD", 10.0)],
            0.35,
            SINGLE,
        ),
        "VLSP" => p([-1.5, 0.4, -1.5], 0.55, [0.2, 0.3, 0.5], &[("vlsp", 40.0)], 0.2, SERIAL),
        "LI-VUMC" => p(
            [0.1, 0.3, 0.3],
            0.5,
            [0.3, 0.5, 0.2],
            &[("nlst", 30.0), ("LI-VUMC", 12.0)],
            0.25,
            SINGLE,
        ),
        "NLST_test_nodule" => p(
            NLST,
            0.42,
            [0.45, 0.55, 0.0],
            &[("nlst", 30.0), ("NLST", 8.0), ("NLST_test_nodule", 1.0)],
            0.15,
            SERIAL,
        ),
        _ => p(
            NLST,
            0.42,
            [0.45, 0.55, 0.0],
            &[("nlst", 30.0), ("NLST", 8.0), ("NLST_test", 1.0)],
            0.15,
            SERIAL,
        ),
    }
}

/// Nine cohorts shaped like the reference study: sizes, planted DLI / DLS /
/// Sybil AUCs and tiered separability.
pub fn mimic_specs() -> Vec<CohortSpec> {
    let base = feature_direction("base");
    COHORT_PROFILES
        .iter()
        .map(|profile| {
            let pl = placement(profile.name);
            let directions: Vec<(Vec<f64>, f64)> = pl
                .directions
                .iter()
                .map(|(tag, w)| (feature_direction(tag), *w))
                .collect();
            let mut parts: Vec<(&[f64], f64)> = vec![(&base, BASE_SCALE)];
            parts.extend(directions.iter().map(|(v, w)| (v.as_slice(), *w)));
            CohortSpec {
                name: CohortId::from(profile.name),
                n_patients: profile.size,
                numeric: base_numeric(pl.offset),
                categorical: categories(pl.female, pl.smoking),
                feature_centroid: centroid(&parts),
                feature_noise_sd: 1.0,
                prevalence: pl.prevalence,
                model_auc_profile: PROFILE_MODELS
                    .iter()
                    .zip(profile.auc)
                    .map(|(m, a)| (ModelId::from(*m), a))
                    .collect(),
                timepoints: pl.timepoints.to_vec(),
            }
        })
        .collect()
}

/// The table planted by [`mimic_specs`].
pub fn mimic_table() -> PerformanceTable {
    table_for(&mimic_specs())
}

/// `cohorts` cohorts on a line, adjacent ones `separation` noise sds apart in
/// every numeric field and in feature space. Categorical fields are pinned to
/// one value, so separation is the only thing telling cohorts apart.
/// Profiles alternate which of DLI / DLS is best so that routing matters.
pub fn separation_specs(cohorts: usize, separation: f64, n_patients: usize) -> Vec<CohortSpec> {
    let base = feature_direction("base");
    let axis = feature_direction("separation-axis");
    let meta_axis = [1.0 / 3f64.sqrt(); 3];
    (0..cohorts)
        .map(|i| {
            let t = i as f64 * separation;
            let (a, b) = if i % 2 == 0 { (0.85, 0.65) } else { (0.65, 0.85) };
            CohortSpec {
                name: CohortId::new(format!("C{i}")),
                n_patients,
                numeric: base_numeric(meta_axis.map(|x| x * t)),
                categorical: categories(1.0, [0.0, 1.0, 0.0]),
                feature_centroid: centroid(&[(&base, BASE_SCALE), (&axis, t)]),
                feature_noise_sd: 1.0,
                prevalence: 0.3,
                model_auc_profile: BTreeMap::from([(ModelId::from("DLI"), a), (ModelId::from("DLS"), b)]),
                timepoints: SINGLE.to_vec(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mimic_shape() {
        let specs = mimic_specs();
        assert_eq!(specs.len(), 9);
        assert_eq!(specs.iter().map(|s| s.n_patients).sum::<usize>(), 3750);
        assert!(specs.iter().all(|s| (104..=868).contains(&s.n_patients)));
        let bronch = &specs[0];
        assert_eq!(bronch.name.as_str(), "BRONCH");
        assert_eq!(bronch.model_auc_profile[&ModelId::from("DLI")], 0.609);
        assert_eq!(bronch.model_auc_profile[&ModelId::from("DLS")], 0.643);
        assert_eq!(bronch.model_auc_profile[&ModelId::from("Sybil")], 0.657);
        let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "BRONCH",
                "MCL_VUMC",
                "MCL_UPMC",
                "MCL_DECAMP",
                "MCL_UCD",
                "VLSP",
                "LI-VUMC",
                "NLST_test_nodule",
                "NLST_test"
            ]
        );
        assert_eq!(mimic_table().len(), 27);
    }

    #[test]
    fn deterministic_per_seed() {
        let specs = separation_specs(2, 1.0, 20);
        let a = generate(&specs, 9).unwrap();
        let b = generate(&specs, 9).unwrap();
        assert_eq!(a, b);
        let c = generate(&specs, 10).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn records_follow_schema() {
        let data = generate(&mimic_specs(), 1).unwrap();
        assert_eq!(data.records.len(), 3750);
        for r in data.records.iter().step_by(97) {
            crate::types::validate_record(r.clone(), &data.schema).unwrap();
        }
        let names: Vec<&str> = data.schema.fields.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names, ["age", "bmi", "pack_years", "gender", "smoking_status"]);
    }

    #[test]
    fn label_rate_tracks_prevalence() {
        let mut specs = separation_specs(1, 0.0, 4000);
        specs[0].prevalence = 0.25;
        let data = generate(&specs, 3).unwrap();
        let rate = data.records.iter().map(|r| f64::from(r.label)).sum::<f64>() / 4000.0;
        assert!((rate - 0.25).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn rejects_bad_specs() {
        let mut specs = separation_specs(2, 1.0, 10);
        specs[1].name = specs[0].name.clone();
        assert!(matches!(generate(&specs, 0), Err(SynthError::DuplicateCohort(_))));

        let mut specs = separation_specs(1, 1.0, 3);
        assert!(matches!(generate(&specs, 0), Err(SynthError::Degenerate { .. })));
        specs[0].n_patients = 10;
        specs[0].prevalence = 0.05;
        assert!(matches!(generate(&specs, 0), Err(SynthError::Degenerate { .. })));
        specs[0].prevalence = 0.5;
        specs[0].timepoints.clear();
        assert!(matches!(generate(&specs, 0), Err(SynthError::Degenerate { .. })));
        assert!(matches!(generate(&[], 0), Err(SynthError::Empty)));
    }

    #[test]
    fn stub_registry_covers_profiles() {
        let specs = separation_specs(2, 1.0, 10);
        let reg = stub_registry(&specs, 4);
        assert!(reg.contains(&"DLI".into()));
        assert!(reg.contains(&"Mayo".into()));
        let dli = reg.get(&"DLI".into()).unwrap();
        assert_eq!(dli.cost_s, 0.005);
        match &dli.kind {
            ModelKind::BinormalStub(p) => assert_eq!(p.target_auc.len(), 2),
            other => panic!("unexpected kind {other}"),
        }
    }
}
