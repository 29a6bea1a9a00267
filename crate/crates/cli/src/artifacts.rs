//! Index artifacts written by `build-index` and the loader shared by
//! `retrieve`, `predict` and `serve`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use cohort_core::agent::build_index;
use cohort_core::eval::{split, SplitSpec};
use cohort_core::formats::{read_table, DatasetDir};
use cohort_core::fusion::fit_encoding;
use cohort_core::{
    Agent, AgentConfig, DatasetSchema, EncodingStats, ModelRegistry, PatientRecord, PerformanceTable, VectorIndex,
};
use serde::{Deserialize, Serialize};

pub const INDEX_FILE: &str = "index.cavi";
pub const MANIFEST_FILE: &str = "agent.json";
pub const REGISTRY_FILE: &str = "registry.json";

/// Everything besides the index needed to rebuild the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentManifest {
    pub config: AgentConfig,
    /// `None` when every record was indexed.
    pub split: Option<SplitSpec>,
    pub seed: u64,
    pub database: usize,
    pub stats: EncodingStats,
}

pub fn registry_path(data: &DatasetDir) -> PathBuf {
    data.root.join(REGISTRY_FILE)
}

/// The dataset's `registry.json` when present, else the standard pool.
pub fn load_registry(data: &DatasetDir, seed: u64) -> anyhow::Result<ModelRegistry> {
    let path = registry_path(data);
    if path.exists() {
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        ModelRegistry::from_json(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    } else {
        Ok(ModelRegistry::standard_pool(seed))
    }
}

pub fn load_table(data: &DatasetDir) -> anyhow::Result<PerformanceTable> {
    let path = data.table();
    read_table(&path).with_context(|| format!("loading performance table {}", path.display()))
}

/// Splits (unless `split` is `None`), fits the encoding on the database part,
/// and writes the index plus manifest into `out`.
pub fn build_artifacts(
    records: &[PatientRecord],
    schema: &DatasetSchema,
    out: &Path,
    config: &AgentConfig,
    split_spec: Option<SplitSpec>,
    seed: u64,
) -> anyhow::Result<AgentManifest> {
    config.fusion.validate()?;
    let database = match &split_spec {
        Some(s) => split(records, s)?.0,
        None => records.to_vec(),
    };
    let stats = fit_encoding(&database, schema)?;
    let index = build_index(&database, &stats, &config.fusion, config.metric)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    index.save(out.join(INDEX_FILE))?;
    let manifest = AgentManifest {
        config: config.clone(),
        split: split_spec,
        seed,
        database: database.len(),
        stats,
    };
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// A dataset plus an agent assembled from saved artifacts.
pub struct Loaded {
    pub schema: DatasetSchema,
    pub records: Vec<PatientRecord>,
    pub manifest: AgentManifest,
    pub agent: Agent,
}

impl Loaded {
    pub fn record(&self, patient_id: &str) -> anyhow::Result<&PatientRecord> {
        self.records
            .iter()
            .find(|r| r.patient_id == patient_id)
            .with_context(|| format!("no patient {patient_id} in the dataset"))
    }
}

/// `configure` may adjust the saved agent configuration (k, policy) before assembly.
pub fn load(
    data: &DatasetDir,
    index_dir: &Path,
    lenient: bool,
    configure: impl FnOnce(&mut AgentConfig),
) -> anyhow::Result<Loaded> {
    let (schema, records) = data
        .load(lenient)
        .with_context(|| format!("loading dataset {}", data.root.display()))?;
    let manifest_path = index_dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?;
    let mut manifest: AgentManifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", manifest_path.display()))?;
    configure(&mut manifest.config);
    let index = VectorIndex::load(index_dir.join(INDEX_FILE))
        .with_context(|| format!("loading index from {}", index_dir.display()))?;
    let registry = load_registry(data, manifest.seed)?;
    let table = load_table(data)?;
    let agent = Agent::from_parts(
        schema.clone(),
        manifest.stats.clone(),
        index,
        registry,
        table,
        manifest.config.clone(),
    )?;
    Ok(Loaded {
        schema,
        records,
        manifest,
        agent,
    })
}
