//! Fixtures shared by the benchmarks.

use cohort_core::eval::split;
use cohort_core::synth::{generate, mimic_specs, stub_registry};
use cohort_core::vindex::IndexEntry;
use cohort_core::{Agent, AgentConfig, CohortId, FusedVector, Metric, PatientRecord, SplitSpec, VectorIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Agent over the mimic database split plus its holdout.
pub fn mimic_agent(seed: u64, config: AgentConfig) -> (Agent, Vec<PatientRecord>) {
    let specs = mimic_specs();
    let data = generate(&specs, seed).expect("mimic specs are valid");
    let (db, holdout) = split(
        &data.records,
        &SplitSpec {
            holdout_fraction: 0.3,
            seed,
        },
    )
    .expect("split");
    let agent = Agent::build(data.schema, &db, stub_registry(&specs, seed), data.table, config).expect("agent");
    (agent, holdout)
}

/// Uniform random index of `n` vectors in `d` dimensions.
pub fn random_index(n: usize, d: usize, metric: Metric, seed: u64) -> VectorIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..n)
        .map(|i| IndexEntry {
            vector: FusedVector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()),
            cohort: CohortId::new(format!("c{}", i % 9)),
            patient_id: format!("p{i}"),
        })
        .collect();
    VectorIndex::build(entries, metric).expect("finite vectors")
}

pub fn random_query(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Scores with ties and both classes present.
pub fn scored_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
    let scores = labels
        .iter()
        .map(|l| f64::from(rng.random_range(0..500u32)) / 500.0 + f64::from(*l) * 0.2)
        .collect();
    (scores, labels)
}
