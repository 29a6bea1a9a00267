//! Subcommand definitions and their implementations.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cohort_core::eval::{
    bootstrap_delta_auc, overall_auc_ci, render_comparison, retrieval_confusion, run_strategy, split, OverallStatistic,
    SplitSpec, Strategy,
};
use cohort_core::formats::{self, DatasetDir, IngestSummary};
use cohort_core::synth::{generate, mimic_specs, separation_specs, stub_registry};
use cohort_core::{
    Agent, AgentConfig, Aggregation, FusionConfig, Metric, PatientRecord, PolicyConfig, SelectionBackend,
};
use serde_json::json;

use crate::artifacts::{self, build_artifacts, load_registry, load_table, registry_path};
use crate::config::{required_path, BackendChoice, RunConfig, DEFAULT_ADDR, DEFAULT_BODY_LIMIT, DEFAULT_MAX_INFLIGHT};
use crate::http::{HttpLlm, HttpScoring};
use crate::service::{self, FeatureStore, Ready};

#[derive(Debug, Parser)]
#[command(
    name = "cohort-agent",
    version,
    about = "Cohort-aware lung cancer risk agent",
    arg_required_else_help = true
)]
pub struct Cli {
    /// Run configuration file (TOML); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Ignore unknown fields in records files.
    #[arg(long, global = true)]
    pub lenient: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset, its performance table and model registry.
    Generate(GenerateArgs),
    /// Validate a records file against a feature file and schema.
    Ingest(IngestArgs),
    /// Fuse the retrieval database and save the vector index.
    BuildIndex(BuildIndexArgs),
    /// Retrieve cohorts for one stored patient, or for every held-out patient.
    Retrieve(RetrieveArgs),
    /// Run the full agent for one stored patient and print its risk prediction.
    Predict(PatientArgs),
    /// Compare routing strategies on a held-out split.
    Evaluate(EvaluateArgs),
    /// Serve predictions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Mimic,
    Separation,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "mimic")]
    pub preset: Preset,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Adjacent-cohort separation in noise standard deviations (separation preset).
    #[arg(long, default_value_t = 10.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 2)]
    pub cohorts: usize,
    #[arg(long, default_value_t = 200)]
    pub per_cohort: usize,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    /// Performance table copied into the output dataset.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Write the validated dataset here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FusionArgs {
    /// Feature block weight α.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub aggregation: Option<AggregationArg>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Held-out fraction per cohort; 0 indexes every record.
    #[arg(long)]
    pub holdout: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    Pooled,
    Flattened,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Cosine,
    L2,
}

#[derive(Debug, Clone, Default, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum)]
    pub backend: Option<BackendChoice>,
    #[arg(long)]
    pub llm_endpoint: Option<String>,
    /// Surface LLM outages as errors instead of falling back to the rule.
    #[arg(long)]
    pub no_fallback: bool,
    #[arg(long)]
    pub max_inflight: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub fusion: FusionArgs,
}

#[derive(Debug, Args)]
pub struct PatientArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub patient_id: String,
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Without it, one line per patient outside the index.
    #[arg(long)]
    pub patient_id: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory for report files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// retrieval | per_cohort_best | single:<model>; repeat or comma-separate.
    #[arg(long = "strategy")]
    pub strategies: Vec<String>,
    #[command(flatten)]
    pub fusion: FusionArgs,
    #[arg(long)]
    pub resamples: Option<usize>,
    /// Confidence level of the bootstrap intervals.
    #[arg(long)]
    pub level: Option<f64>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub addr: Option<String>,
    /// Maximum request body in bytes.
    #[arg(long)]
    pub body_limit: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

/// Parses argv and runs; returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        // Closed stdout, e.g. piped into `head`.
        Err(e)
            if e.chain().any(|c| {
                c.downcast_ref::<std::io::Error>()
                    .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
            }) =>
        {
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let lenient = cli.lenient || config.lenient.unwrap_or(false);
    match cli.command {
        Command::Generate(a) => cmd_generate(a, &config, out),
        Command::Ingest(a) => cmd_ingest(a, lenient, out),
        Command::BuildIndex(a) => cmd_build_index(a, &config, lenient, out),
        Command::Retrieve(a) => cmd_retrieve(a, &config, lenient, out),
        Command::Predict(a) => cmd_predict(a, &config, lenient, out),
        Command::Evaluate(a) => cmd_evaluate(a, &config, lenient, out),
        Command::Serve(a) => cmd_serve(a, &config, lenient),
    }
}

fn cmd_generate(a: GenerateArgs, config: &RunConfig, out: &mut dyn Write) -> anyhow::Result<()> {
    let seed = config.seed(a.seed);
    let specs = match a.preset {
        Preset::Mimic => mimic_specs(),
        Preset::Separation => separation_specs(a.cohorts, a.separation, a.per_cohort),
    };
    let data = generate(&specs, seed)?;
    let dir = DatasetDir::new(&a.out);
    dir.write(&data.schema, &data.records, Some(&data.table))?;
    fs::write(registry_path(&dir), stub_registry(&specs, seed).to_json() + "\n")?;
    writeln!(
        out,
        "{}",
        json!({
            "out": a.out,
            "seed": seed,
            "records": data.records.len(),
            "cohorts": data.schema.cohorts,
        })
    )?;
    Ok(())
}

fn cmd_ingest(a: IngestArgs, lenient: bool, out: &mut dyn Write) -> anyhow::Result<()> {
    let schema = formats::read_schema(&a.schema)?;
    let records = formats::ingest(&a.records, &a.features, &schema, lenient)?;
    if let Some(dir) = &a.out {
        let table = a.table.as_deref().map(formats::read_table).transpose()?;
        DatasetDir::new(dir).write(&schema, &records, table.as_ref())?;
    }
    writeln!(out, "{}", serde_json::to_string(&IngestSummary::of(&records))?)?;
    Ok(())
}

/// Resolves fusion, metric, k, split and seed from flags over config over defaults.
fn agent_settings(f: &FusionArgs, config: &RunConfig) -> anyhow::Result<(AgentConfig, Option<SplitSpec>, u64)> {
    let seed = config.seed(f.seed);
    let mut fusion = FusionConfig::default();
    if let Some(a) = f.aggregation.map(|a| match a {
        AggregationArg::Pooled => Aggregation::Pooled,
        AggregationArg::Flattened => Aggregation::Flattened,
    }) {
        fusion.aggregation = a;
    } else if let Some(a) = config.fusion.aggregation {
        fusion.aggregation = a;
    }
    if let Some(w) = f.alpha.or(config.fusion.feature_weight) {
        fusion.feature_weight = w;
    }
    fusion.validate()?;
    let metric = match f.metric {
        Some(MetricArg::Cosine) => Metric::Cosine,
        Some(MetricArg::L2) => Metric::L2,
        None => config.metric.unwrap_or_default(),
    };
    let k = f.k.or(config.k).unwrap_or(cohort_core::retrieval::DEFAULT_K);
    if k == 0 {
        bail!("k must be at least 1");
    }
    let holdout = f.holdout.or(config.split.holdout_fraction).unwrap_or(0.30);
    let split = if holdout == 0.0 {
        None
    } else {
        Some(SplitSpec {
            holdout_fraction: holdout,
            seed,
        })
    };
    Ok((
        AgentConfig {
            fusion,
            metric,
            k,
            policy: PolicyConfig::default(),
        },
        split,
        seed,
    ))
}

fn selection_backend(b: &BackendArgs, config: &RunConfig) -> anyhow::Result<(SelectionBackend, bool)> {
    let fallback = !b.no_fallback && config.backend.fallback.unwrap_or(true);
    let kind = b.backend.or(config.backend.kind).unwrap_or(BackendChoice::Rule);
    let backend = match kind {
        BackendChoice::Rule => SelectionBackend::Rule,
        BackendChoice::Llm => {
            let Some(url) = b.llm_endpoint.clone().or_else(|| config.backend.endpoint.clone()) else {
                bail!("--backend llm needs --llm-endpoint (or backend.endpoint in the run configuration)");
            };
            let timeout = Duration::from_millis(config.backend.timeout_ms.unwrap_or(30_000));
            let inflight = b
                .max_inflight
                .or(config.backend.max_inflight)
                .unwrap_or(DEFAULT_MAX_INFLIGHT);
            SelectionBackend::Llm(Arc::new(HttpLlm::new(url, timeout, inflight)))
        }
    };
    Ok((backend, fallback))
}

fn cmd_build_index(a: BuildIndexArgs, config: &RunConfig, lenient: bool, out: &mut dyn Write) -> anyhow::Result<()> {
    let data = DatasetDir::new(required_path(a.data, &config.data, "data")?);
    let dest = required_path(a.out, &config.index, "out")?;
    let (agent_config, split, seed) = agent_settings(&a.fusion, config)?;
    let (schema, records) = data.load(lenient)?;
    let manifest = build_artifacts(&records, &schema, &dest, &agent_config, split, seed)?;
    writeln!(
        out,
        "{}",
        json!({
            "index": dest.join(artifacts::INDEX_FILE),
            "entries": manifest.database,
            "dim": manifest.stats.fused_dim(agent_config.fusion.aggregation),
            "metric": agent_config.metric,
            "seed": seed,
            "holdout_fraction": split.map_or(0.0, |s| s.holdout_fraction),
        })
    )?;
    Ok(())
}

fn load_agent(
    data: Option<PathBuf>,
    index: Option<PathBuf>,
    k: Option<usize>,
    backend: &BackendArgs,
    config: &RunConfig,
    lenient: bool,
) -> anyhow::Result<(DatasetDir, artifacts::Loaded)> {
    let data = DatasetDir::new(required_path(data, &config.data, "data")?);
    let index = required_path(index, &config.index, "index")?;
    let (selection, fallback) = selection_backend(backend, config)?;
    let k = k.or(config.k);
    let mut loaded = artifacts::load(&data, &index, lenient, |c| {
        if let Some(k) = k {
            c.k = k;
        }
        c.policy.fallback_on_unavailable = fallback;
    })?;
    loaded.agent = loaded
        .agent
        .with_backend(selection)
        .with_transport(Arc::new(HttpScoring::new(DEFAULT_MAX_INFLIGHT)));
    Ok((data, loaded))
}

fn cmd_retrieve(a: RetrieveArgs, config: &RunConfig, lenient: bool, out: &mut dyn Write) -> anyhow::Result<()> {
    let (_, loaded) = load_agent(a.data, a.index, a.k, &BackendArgs::default(), config, lenient)?;
    let queries: Vec<&PatientRecord> = match &a.patient_id {
        Some(pid) => vec![loaded.record(pid)?],
        None => {
            let indexed: HashSet<&str> = (0..loaded.agent.index().len())
                .map(|i| loaded.agent.index().patient_id(i))
                .collect();
            match &loaded.manifest.split {
                Some(spec) => {
                    let holdout: HashSet<String> = split(&loaded.records, spec)?
                        .1
                        .into_iter()
                        .map(|r| r.patient_id)
                        .collect();
                    loaded
                        .records
                        .iter()
                        .filter(|r| holdout.contains(&r.patient_id))
                        .collect()
                }
                None => loaded
                    .records
                    .iter()
                    .filter(|r| !indexed.contains(r.patient_id.as_str()))
                    .collect(),
            }
        }
    };
    for record in queries {
        let assignment = loaded.agent.assign(record)?;
        let neighbors: Vec<_> = assignment
            .neighbors
            .iter()
            .map(|n| json!({ "patient_id": n.patient_id, "cohort": n.cohort, "distance": n.distance }))
            .collect();
        writeln!(
            out,
            "{}",
            json!({
                "patient_id": record.patient_id,
                "true_cohort": record.cohort,
                "cohort": assignment.cohort,
                "votes": assignment.vote_counts,
                "tie_broken": assignment.tie_broken,
                "neighbors": neighbors,
            })
        )?;
    }
    Ok(())
}

fn cmd_predict(a: PatientArgs, config: &RunConfig, lenient: bool, out: &mut dyn Write) -> anyhow::Result<()> {
    let (_, loaded) = load_agent(a.data, a.index, a.k, &a.backend, config, lenient)?;
    let record = loaded.record(&a.patient_id)?;
    let outcome = loaded.agent.predict(record)?;
    writeln!(out, "{}", serde_json::to_string(&outcome.prediction)?)?;
    Ok(())
}

fn report_name(s: &Strategy) -> String {
    s.to_string().replace(':', "-")
}

fn cmd_evaluate(a: EvaluateArgs, config: &RunConfig, lenient: bool, out: &mut dyn Write) -> anyhow::Result<()> {
    let data = DatasetDir::new(required_path(a.data, &config.data, "data")?);
    let (agent_config, split, seed) = agent_settings(&a.fusion, config)?;
    let Some(split) = split else {
        bail!("evaluate needs a holdout fraction in (0, 1)");
    };
    let strategies = config.strategies(&a.strategies)?;
    let resamples = config.resamples(a.resamples);
    let level = a.level.or(config.level).unwrap_or(0.95);
    let (selection, fallback) = selection_backend(&a.backend, config)?;
    let mut agent_config = agent_config;
    agent_config.policy.fallback_on_unavailable = fallback;

    let (schema, records) = data.load(lenient)?;
    let (database, holdout) = cohort_core::eval::split(&records, &split)?;
    let agent = Agent::build(
        schema,
        &database,
        load_registry(&data, seed)?,
        load_table(&data)?,
        agent_config,
    )?
    .with_backend(selection)
    .with_transport(Arc::new(HttpScoring::new(DEFAULT_MAX_INFLIGHT)));

    let confusion = retrieval_confusion(&agent, &holdout)?;
    let mut reports = Vec::new();
    for s in &strategies {
        reports.push(run_strategy(s, &agent, &holdout).with_context(|| format!("strategy {s}"))?);
    }
    let mut rows = Vec::new();
    for r in &reports {
        let ci = overall_auc_ci(r, level, resamples, seed, OverallStatistic::Pooled).ok();
        rows.push(json!({
            "strategy": r.strategy.to_string(),
            "overall_auc": r.overall_auc,
            "pooled_auc": r.pooled_auc,
            "pooled_auc_ci": ci.map(|(l, h)| [l, h]),
            "time_s": r.overall_time_s,
            "substitutions": r.substitutions,
        }));
    }
    let find = |s: &Strategy| reports.iter().find(|r| &r.strategy == s);
    let delta = match (find(&Strategy::Retrieval), find(&Strategy::PerCohortBest)) {
        (Some(r), Some(o)) => Some(bootstrap_delta_auc(r, o, resamples, level, seed)?),
        _ => None,
    };
    let summary = json!({
        "seed": seed,
        "holdout_fraction": split.holdout_fraction,
        "database": database.len(),
        "holdout": holdout.len(),
        "k": agent.config().k,
        "metric": agent.config().metric,
        "fusion": agent.config().fusion,
        "retrieval_accuracy": confusion.accuracy(),
        "strategies": rows,
        "delta_retrieval_vs_per_cohort_best": delta,
    });

    let comparison = render_comparison(&reports);
    let confusion_text = confusion.render();
    if let Some(dir) = &a.out.or_else(|| config.out.clone()) {
        write_reports(dir, &reports, &comparison, &confusion_text, &summary)?;
    }
    writeln!(out, "seed {seed}")?;
    writeln!(out, "{comparison}")?;
    writeln!(out, "{confusion_text}")?;
    if let Some(d) = delta {
        writeln!(
            out,
            "retrieval - per_cohort_best: mean {:+.4}, {:.1}% CI [{:+.4}, {:+.4}] over {} cohorts",
            d.mean,
            d.level * 100.0,
            d.low,
            d.high,
            d.cohorts
        )?;
    }
    Ok(())
}

fn write_reports(
    dir: &Path,
    reports: &[cohort_core::StrategyReport],
    comparison: &str,
    confusion: &str,
    summary: &serde_json::Value,
) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for r in reports {
        let path = dir.join(format!("report-{}.json", report_name(&r.strategy)));
        fs::write(&path, serde_json::to_string_pretty(r)? + "\n")?;
    }
    fs::write(dir.join("comparison.txt"), comparison)?;
    fs::write(dir.join("confusion.txt"), confusion)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}

fn cmd_serve(a: ServeArgs, config: &RunConfig, lenient: bool) -> anyhow::Result<()> {
    let addr: SocketAddr = a
        .addr
        .or_else(|| config.serve.addr.clone())
        .unwrap_or_else(|| DEFAULT_ADDR.to_string())
        .parse()
        .context("parsing --addr")?;
    let body_limit = a.body_limit.or(config.serve.body_limit).unwrap_or(DEFAULT_BODY_LIMIT);
    let config = config.clone();
    let (data, index, k, backend) = (a.data, a.index, a.k, a.backend);
    let loader = move || -> anyhow::Result<Ready> {
        let (dir, loaded) = load_agent(data, index, k, &backend, &config, lenient)?;
        let store = FeatureStore::load(&dir, loaded.records, lenient)?;
        Ok(Ready {
            agent: loaded.agent,
            store,
        })
    };
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(service::serve(addr, body_limit, loader))
}
