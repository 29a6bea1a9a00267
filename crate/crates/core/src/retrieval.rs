//! Cohort assignment by majority vote over the nearest database patients.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::fusion::{fuse, EncodingStats, FusionConfig, FusionError};
use crate::types::{CohortId, PatientRecord};
use crate::vindex::{IndexError, NeighborSet, VectorIndex};

/// Default neighborhood size for the vote.
pub const DEFAULT_K: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct CohortAssignment {
    pub cohort: CohortId,
    pub vote_counts: BTreeMap<CohortId, usize>,
    pub neighbors: NeighborSet,
    /// Several cohorts shared the maximal count.
    pub tie_broken: bool,
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot vote over an empty neighbor set")]
    NoNeighbors,
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Mode of the neighbor cohorts. Ties at the maximal count go to the tied
/// cohort owning the nearest neighbor (the set is already ordered by
/// distance, then insertion position).
pub fn majority_vote(neighbors: NeighborSet) -> Result<CohortAssignment, RetrievalError> {
    if neighbors.is_empty() {
        return Err(RetrievalError::NoNeighbors);
    }
    let mut vote_counts: BTreeMap<CohortId, usize> = BTreeMap::new();
    for n in &neighbors {
        *vote_counts.entry(n.cohort.clone()).or_default() += 1;
    }
    let best = vote_counts.values().copied().max().unwrap_or(0);
    let tied = vote_counts.values().filter(|c| **c == best).count();
    let cohort = neighbors
        .iter()
        .find(|n| vote_counts[&n.cohort] == best)
        .map(|n| n.cohort.clone())
        .ok_or(RetrievalError::NoNeighbors)?;
    Ok(CohortAssignment {
        cohort,
        vote_counts,
        neighbors,
        tie_broken: tied > 1,
    })
}

/// Fuse, search, vote.
pub fn retrieve_cohort(
    index: &VectorIndex,
    record: &PatientRecord,
    stats: &EncodingStats,
    config: &FusionConfig,
    k: usize,
) -> Result<CohortAssignment, RetrievalError> {
    let query = fuse(record, stats, config)?;
    let neighbors = index.search(query.as_slice(), k)?;
    majority_vote(neighbors)
}
