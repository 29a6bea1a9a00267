//! Metrics and the strategy comparison harness.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentError};
use crate::models::fnv1a;
use crate::types::{CohortId, ModelId, PatientRecord};

pub const DEFAULT_SEED: u64 = 20_250_917;
pub const DEFAULT_RESAMPLES: usize = 1000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC undefined: need at least one positive and one negative")]
    AucUndefined,
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cohort {cohort} has {count} patient(s); at least 2 are needed to stratify")]
    CohortTooSmall { cohort: CohortId, count: usize },
    #[error("holdout fraction must lie in (0, 1), got {0}")]
    HoldoutFraction(f64),
    #[error("bootstrap needs at least 2 cohorts with defined AUC in both reports, found {0}")]
    TooFewCohorts(usize),
    #[error("confidence level must lie in (0, 1), got {0}")]
    Level(f64),
    #[error("no two-class resample after repeated attempts")]
    DegenerateResamples,
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Agent(#[from] AgentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_holdout() -> f64 {
    0.30
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            holdout_fraction: default_holdout(),
            seed: DEFAULT_SEED,
        }
    }
}

/// Stratified split into (retrieval database, holdout). Each cohort holds
/// out `round(n · fraction)` patients, clamped to `[1, n - 1]`. Both parts
/// keep the input order.
pub fn split(
    records: &[PatientRecord],
    spec: &SplitSpec,
) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>), EvalError> {
    if !(spec.holdout_fraction > 0.0 && spec.holdout_fraction < 1.0) {
        return Err(EvalError::HoldoutFraction(spec.holdout_fraction));
    }
    let mut by_cohort: BTreeMap<&CohortId, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_cohort.entry(&r.cohort).or_default().push(i);
    }
    let mut held = vec![false; records.len()];
    for (cohort, mut members) in by_cohort {
        let n = members.len();
        if n < 2 {
            return Err(EvalError::CohortTooSmall {
                cohort: cohort.clone(),
                count: n,
            });
        }
        let take = ((n as f64 * spec.holdout_fraction).round() as usize).clamp(1, n - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ fnv1a(cohort.as_str().as_bytes()));
        members.shuffle(&mut rng);
        for &i in &members[..take] {
            held[i] = true;
        }
    }
    let (hold, keep): (Vec<_>, Vec<_>) = records.iter().zip(&held).partition(|(_, h)| **h);
    Ok((
        keep.into_iter().map(|(r, _)| r.clone()).collect(),
        hold.into_iter().map(|(r, _)| r.clone()).collect(),
    ))
}

/// Exact Mann-Whitney count: `(2U, n_pos · n_neg)`, with tied pairs counting ½.
pub fn mann_whitney_twice_u(scores: &[f64], labels: &[u8]) -> Result<(u64, u64), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|l| **l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of doubled midranks over positives; ranks are 1-based.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]].total_cmp(&scores[order[i]]).is_eq() {
            j += 1;
        }
        let twice_midrank = (i + 1 + j) as u64;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        twice_rank_sum += twice_midrank * pos_in_group;
        i = j;
    }
    Ok((twice_rank_sum - n_pos * (n_pos + 1), n_pos * n_neg))
}

/// Mann-Whitney AUC with midrank ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let (twice_u, pairs) = mann_whitney_twice_u(scores, labels)?;
    Ok(twice_u as f64 / (2 * pairs) as f64)
}

/// Rows are true cohorts, columns assigned cohorts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<CohortId>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn row_total(&self, i: usize) -> usize {
        self.counts[i].iter().sum()
    }

    pub fn row_accuracy(&self, i: usize) -> Option<f64> {
        let total = self.row_total(i);
        (total > 0).then(|| self.counts[i][i] as f64 / total as f64)
    }

    pub fn correct(&self) -> usize {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.total().max(1) as f64
    }

    pub fn render(&self) -> String {
        let width = self.labels.iter().map(|l| l.as_str().len()).max().unwrap_or(4).max(7);
        let mut out = format!("{:<width$}", "");
        for l in &self.labels {
            let _ = write!(out, " {:>width$}", l.as_str());
        }
        out.push_str("  correct / total (acc)\n");
        for (i, l) in self.labels.iter().enumerate() {
            let _ = write!(out, "{:<width$}", l.as_str());
            for c in &self.counts[i] {
                let _ = write!(out, " {c:>width$}");
            }
            let acc = self.row_accuracy(i).map_or("-".to_string(), |a| format!("{a:.3}"));
            let _ = writeln!(out, "  {} / {} ({acc})", self.counts[i][i], self.row_total(i));
        }
        let _ = writeln!(
            out,
            "{:<width$}  {} / {} ({:.3})",
            "Overall",
            self.correct(),
            self.total(),
            self.accuracy()
        );
        out
    }
}

/// Builds the confusion matrix over `cohorts` (extra labels seen in the
/// assignments are appended in sorted order).
pub fn confusion(assignments: &[(CohortId, CohortId)], cohorts: &[CohortId]) -> ConfusionMatrix {
    let mut labels: Vec<CohortId> = cohorts.to_vec();
    let known: BTreeSet<&CohortId> = cohorts.iter().collect();
    let extra: BTreeSet<&CohortId> = assignments
        .iter()
        .flat_map(|(t, a)| [t, a])
        .filter(|c| !known.contains(c))
        .collect();
    labels.extend(extra.into_iter().cloned());
    let pos: BTreeMap<&CohortId, usize> = labels.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let mut counts = vec![vec![0usize; labels.len()]; labels.len()];
    for (truth, assigned) in assignments {
        counts[pos[truth]][pos[assigned]] += 1;
    }
    ConfusionMatrix { labels, counts }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum Strategy {
    /// One model for every patient.
    Single(ModelId),
    /// The true cohort's best model (oracle).
    PerCohortBest,
    /// The retrieved cohort's best model.
    Retrieval,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Single(m) => write!(f, "single:{m}"),
            Strategy::PerCohortBest => f.write_str("per_cohort_best"),
            Strategy::Retrieval => f.write_str("retrieval"),
        }
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "retrieval" => Ok(Strategy::Retrieval),
            "per_cohort_best" | "oracle" => Ok(Strategy::PerCohortBest),
            other => match other.strip_prefix("single:") {
                Some(m) if !m.is_empty() => Ok(Strategy::Single(ModelId::from(m))),
                _ => Err(format!(
                    "unknown strategy {other:?} (expected retrieval|per_cohort_best|single:<model>)"
                )),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientScore {
    pub patient_id: String,
    pub cohort: CohortId,
    /// Cohort used for model selection (retrieved or true).
    pub selection_cohort: Option<CohortId>,
    pub model: ModelId,
    pub score: f64,
    pub label: u8,
    /// Seconds: model inference plus retrieval and selection overhead.
    pub time_s: f64,
    /// The selected model could not score this patient; a next-best model did.
    pub substituted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortResult {
    pub cohort: CohortId,
    pub n: usize,
    pub positives: usize,
    pub auc: Option<f64>,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub cohorts: Vec<CohortResult>,
    /// Unweighted mean of the defined per-cohort AUCs.
    pub overall_auc: f64,
    /// AUC over all holdout patients pooled.
    pub pooled_auc: Option<f64>,
    pub overall_time_s: f64,
    /// Patients scored by a substitute model.
    pub substitutions: usize,
    pub patients: Vec<PatientScore>,
}

impl StrategyReport {
    pub fn cohort(&self, cohort: &CohortId) -> Option<&CohortResult> {
        self.cohorts.iter().find(|c| &c.cohort == cohort)
    }

    fn from_scores(strategy: Strategy, patients: Vec<PatientScore>, cohort_order: &[CohortId]) -> Self {
        let mut grouped: BTreeMap<&CohortId, Vec<&PatientScore>> = BTreeMap::new();
        for p in &patients {
            grouped.entry(&p.cohort).or_default().push(p);
        }
        let mut order: Vec<&CohortId> = cohort_order.iter().filter(|c| grouped.contains_key(c)).collect();
        let mut rest: Vec<&CohortId> = grouped.keys().copied().filter(|c| !cohort_order.contains(c)).collect();
        rest.sort();
        order.extend(rest);

        let cohorts: Vec<CohortResult> = order
            .into_iter()
            .map(|c| {
                let members = &grouped[c];
                let scores: Vec<f64> = members.iter().map(|p| p.score).collect();
                let labels: Vec<u8> = members.iter().map(|p| p.label).collect();
                CohortResult {
                    cohort: c.clone(),
                    n: members.len(),
                    positives: labels.iter().filter(|l| **l == 1).count(),
                    auc: auc(&scores, &labels).ok(),
                    time_s: members.iter().map(|p| p.time_s).sum(),
                }
            })
            .collect();
        let defined: Vec<f64> = cohorts.iter().filter_map(|c| c.auc).collect();
        let overall_auc = defined.iter().sum::<f64>() / defined.len().max(1) as f64;
        let scores: Vec<f64> = patients.iter().map(|p| p.score).collect();
        let labels: Vec<u8> = patients.iter().map(|p| p.label).collect();
        Self {
            strategy,
            overall_time_s: cohorts.iter().map(|c| c.time_s).sum(),
            overall_auc,
            pooled_auc: auc(&scores, &labels).ok(),
            substitutions: patients.iter().filter(|p| p.substituted).count(),
            cohorts,
            patients,
        }
    }
}

/// Scores every holdout patient under `strategy`. Per-cohort AUC groups
/// patients by their true cohort for every strategy.
pub fn run_strategy(
    strategy: &Strategy,
    agent: &Agent,
    holdout: &[PatientRecord],
) -> Result<StrategyReport, EvalError> {
    if holdout.is_empty() {
        return Err(EvalError::Empty);
    }
    let patients: Vec<PatientScore> = holdout
        .par_iter()
        .map(|record| score_patient(strategy, agent, record))
        .collect::<Result<_, _>>()?;
    Ok(StrategyReport::from_scores(
        strategy.clone(),
        patients,
        &agent.schema().cohorts,
    ))
}

fn score_patient(strategy: &Strategy, agent: &Agent, record: &PatientRecord) -> Result<PatientScore, EvalError> {
    let started = Instant::now();
    let (selection_cohort, primary) = match strategy {
        Strategy::Single(m) => (None, m.clone()),
        Strategy::PerCohortBest => (Some(record.cohort.clone()), agent.select(record, &record.cohort)?.model),
        Strategy::Retrieval => {
            let assigned = agent.assign(record)?.cohort;
            let model = agent.select(record, &assigned)?.model;
            (Some(assigned), model)
        }
    };
    let fallback_cohort = selection_cohort.as_ref().unwrap_or(&record.cohort);
    let scored = agent.score_with_fallback(record, &primary, fallback_cohort)?;
    let overhead = started.elapsed().as_secs_f64() - scored.measured_s;
    Ok(PatientScore {
        patient_id: record.patient_id.clone(),
        cohort: record.cohort.clone(),
        selection_cohort,
        substituted: scored.model != primary,
        model: scored.model,
        score: scored.output.probability,
        label: record.label,
        time_s: scored.output.wall_time + overhead.max(0.0),
    })
}

/// Assigns every holdout patient a cohort and tallies the confusion matrix.
pub fn retrieval_confusion(agent: &Agent, holdout: &[PatientRecord]) -> Result<ConfusionMatrix, EvalError> {
    let pairs: Vec<(CohortId, CohortId)> = holdout
        .par_iter()
        .map(|r| Ok((r.cohort.clone(), agent.assign(r)?.cohort)))
        .collect::<Result<_, AgentError>>()?;
    Ok(confusion(&pairs, &agent.schema().cohorts))
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaCi {
    /// Observed mean per-cohort ΔAUC (a − b).
    pub mean: f64,
    pub low: f64,
    pub high: f64,
    pub cohorts: usize,
    pub resamples: usize,
    pub level: f64,
}

impl DeltaCi {
    pub fn contains(&self, v: f64) -> bool {
        self.low <= v && v <= self.high
    }
}

fn check_level(level: f64) -> Result<(), EvalError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(EvalError::Level(level))
    }
}

/// Cohort-level bootstrap of the mean per-cohort AUC difference `a − b`.
pub fn bootstrap_delta_auc(
    a: &StrategyReport,
    b: &StrategyReport,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<DeltaCi, EvalError> {
    check_level(level)?;
    let deltas: Vec<f64> = a
        .cohorts
        .iter()
        .filter_map(|ca| Some(ca.auc? - b.cohort(&ca.cohort)?.auc?))
        .collect();
    if deltas.len() < 2 {
        return Err(EvalError::TooFewCohorts(deltas.len()));
    }
    let n = deltas.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..n_resamples.max(1))
        .map(|_| (0..n).map(|_| deltas[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(DeltaCi {
        mean: deltas.iter().sum::<f64>() / n as f64,
        low: percentile(&means, tail),
        high: percentile(&means, 1.0 - tail),
        cohorts: n,
        resamples: means.len(),
        level,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverallStatistic {
    /// AUC over all patients pooled; patients resampled jointly.
    #[default]
    Pooled,
    /// Mean per-cohort AUC; patients resampled within their cohort.
    CohortMean,
}

/// Patient-level bootstrap percentile interval of the overall AUC.
/// Resamples without both classes are redrawn, up to 10 attempts each.
pub fn overall_auc_ci(
    report: &StrategyReport,
    level: f64,
    n_resamples: usize,
    seed: u64,
    statistic: OverallStatistic,
) -> Result<(f64, f64), EvalError> {
    check_level(level)?;
    let patients = &report.patients;
    if patients.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(n_resamples);
    match statistic {
        OverallStatistic::Pooled => {
            let n = patients.len();
            for _ in 0..n_resamples.max(1) {
                let mut value = None;
                for _ in 0..10 {
                    let (s, l): (Vec<f64>, Vec<u8>) = (0..n)
                        .map(|_| {
                            let p = &patients[rng.random_range(0..n)];
                            (p.score, p.label)
                        })
                        .unzip();
                    if let Ok(v) = auc(&s, &l) {
                        value = Some(v);
                        break;
                    }
                }
                stats.push(value.ok_or(EvalError::DegenerateResamples)?);
            }
        }
        OverallStatistic::CohortMean => {
            let mut groups: BTreeMap<&CohortId, Vec<&PatientScore>> = BTreeMap::new();
            for p in patients {
                groups.entry(&p.cohort).or_default().push(p);
            }
            let groups: Vec<Vec<&PatientScore>> = groups
                .into_values()
                .filter(|g| g.iter().any(|p| p.label == 1) && g.iter().any(|p| p.label == 0))
                .collect();
            if groups.is_empty() {
                return Err(EvalError::AucUndefined);
            }
            for _ in 0..n_resamples.max(1) {
                let mut sum = 0.0;
                for g in &groups {
                    let mut value = None;
                    for _ in 0..10 {
                        let (s, l): (Vec<f64>, Vec<u8>) = (0..g.len())
                            .map(|_| {
                                let p = g[rng.random_range(0..g.len())];
                                (p.score, p.label)
                            })
                            .unzip();
                        if let Ok(v) = auc(&s, &l) {
                            value = Some(v);
                            break;
                        }
                    }
                    sum += value.ok_or(EvalError::DegenerateResamples)?;
                }
                stats.push(sum / groups.len() as f64);
            }
        }
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((percentile(&stats, tail), percentile(&stats, 1.0 - tail)))
}

/// Side-by-side cohort table: one AUC/Time column pair per report.
pub fn render_comparison(reports: &[StrategyReport]) -> String {
    let mut cohorts: Vec<&CohortId> = Vec::new();
    for r in reports {
        for c in &r.cohorts {
            if !cohorts.contains(&&c.cohort) {
                cohorts.push(&c.cohort);
            }
        }
    }
    let width = cohorts.iter().map(|c| c.as_str().len()).max().unwrap_or(6).max(7);
    let mut out = format!("{:<width$}", "Cohort");
    for r in reports {
        let _ = write!(out, " | {:^22}", r.strategy.to_string());
    }
    out.push('\n');
    let _ = write!(out, "{:<width$}", "");
    for _ in reports {
        let _ = write!(out, " | {:>8} {:>13}", "AUC", "Time (s)");
    }
    out.push('\n');
    for c in &cohorts {
        let _ = write!(out, "{:<width$}", c.as_str());
        for r in reports {
            match r.cohort(c) {
                Some(cr) => {
                    let auc = cr.auc.map_or("-".to_string(), |a| format!("{a:.3}"));
                    let _ = write!(out, " | {auc:>8} {:>13.2}", cr.time_s);
                }
                None => {
                    let _ = write!(out, " | {:>8} {:>13}", "-", "-");
                }
            }
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<width$}", "Overall");
    for r in reports {
        let _ = write!(out, " | {:>8.3} {:>13.2}", r.overall_auc, r.overall_time_s);
    }
    out.push('\n');
    for r in reports.iter().filter(|r| r.substitutions > 0) {
        let _ = writeln!(
            out,
            "* {}: {} patient(s) scored by a substitute model",
            r.strategy, r.substitutions
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{FeatureMap, MetadataRecord};
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest};
    use proptest::strategy::Strategy as Gen;

    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, si) in scores.iter().enumerate() {
            for (j, sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_hand_counted() {
        let scores = [0.35, 0.8, 0.1, 0.4];
        let labels = [1, 1, 0, 0];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.75);
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn auc_errors() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(EvalError::AucUndefined)));
        assert!(matches!(auc(&[0.1], &[1, 0]), Err(EvalError::LengthMismatch(1, 2))));
    }

    fn rec(id: usize, cohort: &str) -> PatientRecord {
        PatientRecord {
            patient_id: format!("p{id}"),
            cohort: cohort.into(),
            metadata: MetadataRecord::new(),
            features: FeatureMap::zeros(),
            label: (id % 2) as u8,
            timepoints: 1,
        }
    }

    #[test]
    fn split_fraction_and_determinism() {
        let data: Vec<_> = (0..100).map(|i| rec(i, "A")).collect();
        let spec = SplitSpec {
            holdout_fraction: 0.3,
            seed: 9,
        };
        let (db, hold) = split(&data, &spec).unwrap();
        assert_eq!((db.len(), hold.len()), (70, 30));
        let (db2, hold2) = split(&data, &spec).unwrap();
        assert_eq!((&db, &hold), (&db2, &hold2));
        let (_, other) = split(&data, &SplitSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(other, hold);
    }

    #[test]
    fn split_is_stratified_disjoint_exhaustive() {
        let data: Vec<_> = (0..50).map(|i| rec(i, if i % 5 == 0 { "B" } else { "A" })).collect();
        let (db, hold) = split(&data, &SplitSpec::default()).unwrap();
        let ids = |v: &[PatientRecord]| v.iter().map(|r| r.patient_id.clone()).collect::<BTreeSet<_>>();
        assert!(ids(&db).is_disjoint(&ids(&hold)));
        assert_eq!(db.len() + hold.len(), 50);
        for c in ["A", "B"] {
            assert!(db.iter().any(|r| r.cohort.as_str() == c));
            assert!(hold.iter().any(|r| r.cohort.as_str() == c));
        }
        assert_eq!(hold.iter().filter(|r| r.cohort.as_str() == "B").count(), 3);
    }

    #[test]
    fn split_rejects_singleton_cohort() {
        let data = vec![rec(0, "A"), rec(1, "A"), rec(2, "Solo")];
        assert!(matches!(
            split(&data, &SplitSpec::default()),
            Err(EvalError::CohortTooSmall { count: 1, .. })
        ));
        assert!(split(
            &data[..2],
            &SplitSpec {
                holdout_fraction: 1.0,
                seed: 0
            }
        )
        .is_err());
    }

    #[test]
    fn confusion_cases() {
        let cohorts: Vec<CohortId> = vec!["A".into(), "B".into()];
        let ab = |t: &str, a: &str| (CohortId::from(t), CohortId::from(a));
        let m = confusion(&[ab("A", "A"), ab("B", "B"), ab("B", "B")], &cohorts);
        assert_eq!(m.counts, vec![vec![1, 0], vec![0, 2]]);
        assert_eq!(m.accuracy(), 1.0);
        let swapped = confusion(&[ab("A", "B"), ab("B", "A")], &cohorts);
        assert_eq!(swapped.correct(), 0);
        assert_eq!(swapped.accuracy(), 0.0);
        let extra = confusion(&[ab("A", "Z")], &cohorts);
        assert_eq!(extra.labels.len(), 3);
        assert!(m.render().contains("Overall  3 / 3 (1.000)"));
    }

    #[test]
    fn confusion_overall_accuracy_rounds_like_reference() {
        let cohorts: Vec<CohortId> = vec!["A".into(), "B".into()];
        let mut pairs = vec![(CohortId::from("A"), CohortId::from("A")); 749];
        pairs.extend(vec![(CohortId::from("A"), CohortId::from("B")); 1123 - 749]);
        let m = confusion(&pairs, &cohorts);
        assert_eq!(format!("{:.3}", m.accuracy()), "0.667");
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("retrieval".parse::<Strategy>().unwrap(), Strategy::Retrieval);
        assert_eq!("oracle".parse::<Strategy>().unwrap(), Strategy::PerCohortBest);
        assert_eq!(
            "single:DLI".parse::<Strategy>().unwrap(),
            Strategy::Single("DLI".into())
        );
        assert!("single:".parse::<Strategy>().is_err());
        assert!("best".parse::<Strategy>().is_err());
    }

    fn report(aucs: &[f64]) -> StrategyReport {
        StrategyReport {
            strategy: Strategy::Retrieval,
            cohorts: aucs
                .iter()
                .enumerate()
                .map(|(i, a)| CohortResult {
                    cohort: CohortId::new(format!("c{i}")),
                    n: 10,
                    positives: 5,
                    auc: Some(*a),
                    time_s: 0.0,
                })
                .collect(),
            overall_auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
            pooled_auc: None,
            overall_time_s: 0.0,
            substitutions: 0,
            patients: vec![],
        }
    }

    #[test]
    fn bootstrap_of_identical_reports_is_zero() {
        let r = report(&[0.6, 0.7, 0.8, 0.9]);
        let ci = bootstrap_delta_auc(&r, &r, 1000, 0.95, 1).unwrap();
        assert_eq!((ci.mean, ci.low, ci.high), (0.0, 0.0, 0.0));
    }

    #[test]
    fn bootstrap_of_constant_delta() {
        let a = report(&[0.61, 0.71, 0.81]);
        let b = report(&[0.60, 0.70, 0.80]);
        let ci = bootstrap_delta_auc(&a, &b, 500, 0.95, 1).unwrap();
        for v in [ci.mean, ci.low, ci.high] {
            assert!((v - 0.01).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn bootstrap_needs_two_cohorts() {
        let r = report(&[0.6]);
        assert!(matches!(
            bootstrap_delta_auc(&r, &r, 10, 0.95, 1),
            Err(EvalError::TooFewCohorts(1))
        ));
    }

    #[test]
    fn bootstrap_interval_brackets_mean() {
        let a = report(&[0.60, 0.75, 0.82, 0.91, 0.55]);
        let b = report(&[0.62, 0.70, 0.80, 0.95, 0.50]);
        let ci = bootstrap_delta_auc(&a, &b, 1000, 0.95, 3).unwrap();
        assert!(ci.low < ci.mean && ci.mean < ci.high);
        assert_eq!(ci, bootstrap_delta_auc(&a, &b, 1000, 0.95, 3).unwrap());
    }

    fn scored(scores: &[f64], labels: &[u8]) -> StrategyReport {
        let patients = scores
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (s, l))| PatientScore {
                patient_id: format!("p{i}"),
                cohort: if i % 2 == 0 { "A".into() } else { "B".into() },
                selection_cohort: None,
                model: "M".into(),
                score: *s,
                label: *l,
                time_s: 0.0,
                substituted: false,
            })
            .collect();
        StrategyReport::from_scores(Strategy::Single("M".into()), patients, &[])
    }

    #[test]
    fn overall_ci_of_perfect_separation() {
        let labels: Vec<u8> = (0..40).map(|i| u8::from(i % 4 < 2)).collect();
        let scores: Vec<f64> = labels.iter().map(|l| f64::from(*l)).collect();
        let r = scored(&scores, &labels);
        for stat in [OverallStatistic::Pooled, OverallStatistic::CohortMean] {
            assert_eq!(overall_auc_ci(&r, 0.975, 200, 4, stat).unwrap(), (1.0, 1.0));
        }
    }

    #[test]
    fn wider_level_contains_narrower() {
        let labels: Vec<u8> = (0..300).map(|i| u8::from(i % 3 == 0)).collect();
        let scores = crate::models::binormal_scores(0.75, &labels, 8).unwrap();
        let r = scored(&scores, &labels);
        let wide = overall_auc_ci(&r, 0.975, 1000, 5, OverallStatistic::Pooled).unwrap();
        let narrow = overall_auc_ci(&r, 0.95, 1000, 5, OverallStatistic::Pooled).unwrap();
        assert!(wide.0 <= narrow.0 && narrow.1 <= wide.1);
        let pooled = r.pooled_auc.unwrap();
        assert!(narrow.0 < pooled && pooled < narrow.1);
    }

    #[test]
    fn ci_shrinks_with_sample_size() {
        let width = |n: usize| {
            let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
            let scores = crate::models::binormal_scores(0.8, &labels, 21).unwrap();
            let (lo, hi) = overall_auc_ci(&scored(&scores, &labels), 0.975, 400, 2, OverallStatistic::Pooled).unwrap();
            hi - lo
        };
        let (small, large) = (width(100), width(3000));
        assert!(large < small / 2.0, "{small} vs {large}");
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(percentile(&v, 0.5), 1.5);
        assert_eq!(percentile(&v, 0.0), 0.0);
        assert_eq!(percentile(&v, 1.0), 3.0);
    }

    fn scores_with_ties() -> impl Gen<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..200).prop_flat_map(|n| {
            (
                proptest::collection::vec((0i32..25).prop_map(|v| f64::from(v) / 4.0), n),
                proptest::collection::vec(0u8..2, n),
            )
        })
    }

    proptest! {
        #[test]
        fn rank_auc_matches_pairwise((scores, labels) in scores_with_ties()) {
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let fast = auc(&scores, &labels).unwrap();
            prop_assert!((fast - pairwise_auc(&scores, &labels)).abs() <= 1e-12);
        }

        #[test]
        fn complement_identity((scores, labels) in scores_with_ties()) {
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let (u, pairs) = mann_whitney_twice_u(&scores, &labels).unwrap();
            let (u_neg, _) = mann_whitney_twice_u(&neg, &labels).unwrap();
            prop_assert_eq!(u + u_neg, 2 * pairs);
            prop_assert!((auc(&neg, &labels).unwrap() - (1.0 - auc(&scores, &labels).unwrap())).abs() <= 2.0 * f64::EPSILON);
        }

        #[test]
        fn monotone_invariance((scores, labels) in scores_with_ties()) {
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let mapped: Vec<f64> = scores.iter().map(|s| (s / 2.0).exp() * 3.0 - 1.0).collect();
            prop_assert_eq!(auc(&mapped, &labels).unwrap(), auc(&scores, &labels).unwrap());
        }

        #[test]
        fn confusion_conserves_counts(pairs in proptest::collection::vec((0u8..4, 0u8..4), 1..100)) {
            let cohorts: Vec<CohortId> = (0..4).map(|i| CohortId::new(format!("c{i}"))).collect();
            let named: Vec<(CohortId, CohortId)> = pairs.iter().map(|(t, a)| (cohorts[*t as usize].clone(), cohorts[*a as usize].clone())).collect();
            let m = confusion(&named, &cohorts);
            prop_assert_eq!(m.total(), pairs.len());
            for (i, c) in cohorts.iter().enumerate() {
                prop_assert_eq!(m.row_total(i), named.iter().filter(|(t, _)| t == c).count());
            }
            // Relabel assigned cohorts by a column permutation: row sums are unchanged.
            let rotated: Vec<(CohortId, CohortId)> = pairs.iter().map(|(t, a)| (cohorts[*t as usize].clone(), cohorts[((*a + 1) % 4) as usize].clone())).collect();
            let r = confusion(&rotated, &cohorts);
            for i in 0..4 {
                prop_assert_eq!(r.row_total(i), m.row_total(i));
            }
        }
    }
}
