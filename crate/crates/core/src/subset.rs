//! Choosing which caches to enable by replaying recorded validation
//! predictions instead of re-running the model for every subset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheModel, Prediction, Threshold};
use crate::error::{Error, Result};
use crate::medial::{MedialDataset, Split};

pub const MAX_CACHES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub ordinal: usize,
    pub layer: String,
    pub threshold: Threshold,
    pub cache_flops: u64,
    pub fallback_flops: u64,
    /// One entry per validation sample, in [`ValRecord::ids`] order.
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub ids: Vec<String>,
    pub caches: Vec<CacheRecord>,
}

impl ValRecord {
    pub fn new(ids: Vec<String>, mut caches: Vec<CacheRecord>) -> Result<Self> {
        caches.sort_by_key(|c| c.ordinal);
        for w in caches.windows(2) {
            if w[0].ordinal == w[1].ordinal {
                return Err(Error::Config(format!("duplicate cache ordinal {}", w[0].ordinal)));
            }
        }
        for c in &caches {
            if c.predictions.len() != ids.len() {
                return Err(Error::InvalidTensor(format!(
                    "cache {} recorded {} predictions for {} samples",
                    c.ordinal,
                    c.predictions.len(),
                    ids.len()
                )));
            }
        }
        Ok(Self { ids, caches })
    }

    pub fn ordinals(&self) -> Vec<usize> {
        self.caches.iter().map(|c| c.ordinal).collect()
    }

    fn cache(&self, ordinal: usize) -> Result<&CacheRecord> {
        self.caches
            .iter()
            .find(|c| c.ordinal == ordinal)
            .ok_or_else(|| Error::Config(format!("no recorded cache with ordinal {ordinal}")))
    }
}

/// One pass per cache over its validation split; thresholds are applied
/// later, at replay.
pub fn record_val_predictions(caches: &[CacheModel], datasets: &[MedialDataset]) -> Result<ValRecord> {
    let mut ids: Option<Vec<String>> = None;
    let mut records = Vec::with_capacity(caches.len());
    for cache in caches {
        let md = datasets
            .iter()
            .find(|m| m.layer == cache.layer)
            .ok_or_else(|| Error::Config(format!("no medial dataset for layer `{}`", cache.layer)))?;
        let idx = md.split_indices(Split::Val)?;
        let these: Vec<String> = idx.iter().map(|&i| md.ids[i].clone()).collect();
        match &ids {
            None => ids = Some(these),
            Some(first) => {
                if let Some(pos) = (0..first.len().max(these.len()))
                    .find(|&i| first.get(i) != these.get(i))
                {
                    return Err(Error::SampleIdMismatch {
                        first: first.get(pos).cloned().unwrap_or_default(),
                        second: these.get(pos).cloned().unwrap_or_default(),
                    });
                }
            }
        }
        records.push(CacheRecord {
            ordinal: cache.ordinal,
            layer: cache.layer.clone(),
            threshold: cache.threshold,
            cache_flops: cache.cache_flops,
            fallback_flops: cache.fallback_flops,
            predictions: cache.predict(&md.activations.select_rows(&idx))?,
        });
    }
    ValRecord::new(ids.unwrap_or_default(), records)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheReplay {
    pub ordinal: usize,
    /// Sample positions resolved by this cache.
    pub hits: Vec<usize>,
    /// Sample positions that reached this cache and went on.
    pub misses: Vec<usize>,
}

/// Walks the caches of `subset` in ascending ordinal order; a sample hits
/// the first cache it reaches whose threshold admits its confidence.
pub fn replay_subset(record: &ValRecord, subset: &[usize]) -> Result<Vec<CacheReplay>> {
    let mut ordinals = subset.to_vec();
    ordinals.sort_unstable();
    ordinals.dedup();
    let mut live: Vec<usize> = (0..record.ids.len()).collect();
    let mut out = Vec::with_capacity(ordinals.len());
    for ord in ordinals {
        let cache = record.cache(ord)?;
        let (hits, misses): (Vec<usize>, Vec<usize>) = live
            .iter()
            .partition(|&&s| cache.threshold.admits(cache.predictions[s].confidence));
        live = misses.clone();
        out.push(CacheReplay {
            ordinal: ord,
            hits,
            misses,
        });
    }
    Ok(out)
}

/// Caching score: FLOPs saved by hits minus cache overhead paid by misses.
pub fn score_counts(counts: &[(usize, usize)], costs: &[(u64, u64)]) -> i64 {
    counts
        .iter()
        .zip(costs)
        .map(|(&(h, m), &(c1, c2))| h as i64 * (c2 as i64 - c1 as i64) - m as i64 * c1 as i64)
        .sum()
}

pub fn score_subset(record: &ValRecord, replay: &[CacheReplay]) -> Result<i64> {
    let mut counts = Vec::with_capacity(replay.len());
    let mut costs = Vec::with_capacity(replay.len());
    for r in replay {
        let c = record.cache(r.ordinal)?;
        counts.push((r.hits.len(), r.misses.len()));
        costs.push((c.cache_flops, c.fallback_flops));
    }
    Ok(score_counts(&counts, &costs))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetScore {
    /// Bit i set when the i-th cache (ascending ordinal) is enabled.
    pub mask: u32,
    pub subset: Vec<usize>,
    /// `(hits, misses)` per enabled cache, ascending ordinal.
    pub counts: Vec<(usize, usize)>,
    pub score: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizeOutcome {
    pub best: Vec<usize>,
    pub best_score: i64,
    pub table: Vec<SubsetScore>,
}

/// Subsets of `ordinals` (sorted) in mask order.
pub fn subsets(ordinals: &[usize]) -> Result<Vec<(u32, Vec<usize>)>> {
    if ordinals.len() > MAX_CACHES {
        return Err(Error::TooManyCaches {
            count: ordinals.len(),
            limit: MAX_CACHES,
        });
    }
    Ok((0..1u32 << ordinals.len())
        .map(|mask| {
            let s = (0..ordinals.len())
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| ordinals[i])
                .collect();
            (mask, s)
        })
        .collect())
}

/// Highest score; ties go to fewer caches, then the lexicographically
/// smallest ordinal list.
pub fn best_of<'a, I>(scored: I) -> Option<(&'a [usize], i64)>
where
    I: IntoIterator<Item = (&'a [usize], i64)>,
{
    scored.into_iter().min_by(|a, b| {
        b.1.cmp(&a.1)
            .then(a.0.len().cmp(&b.0.len()))
            .then(a.0.cmp(b.0))
    })
}

pub fn optimize(record: &ValRecord) -> Result<OptimizeOutcome> {
    let all = subsets(&record.ordinals())?;
    let table = all
        .into_par_iter()
        .map(|(mask, subset)| {
            let replay = replay_subset(record, &subset)?;
            let score = score_subset(record, &replay)?;
            Ok(SubsetScore {
                mask,
                counts: replay.iter().map(|r| (r.hits.len(), r.misses.len())).collect(),
                subset,
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (best, best_score) = best_of(table.iter().map(|t| (t.subset.as_slice(), t.score)))
        .map(|(s, k)| (s.to_vec(), k))
        .expect("the empty subset is always scored");
    Ok(OptimizeOutcome {
        best,
        best_score,
        table,
    })
}

/// Brute-force reference: runs the cache-enabled model once per subset.
/// Only meant for verifying [`optimize`] at small scale.
pub mod oracle {
    use super::*;
    use crate::engine::{CacheEnabledModel, Exit};
    use crate::graph::BackboneGraph;
    use crate::samples::SampleSet;

    #[derive(Debug, Clone, PartialEq, Eq)]
    pub struct OracleRow {
        pub subset: Vec<usize>,
        pub counts: Vec<(usize, usize)>,
        pub score: i64,
        /// Sum over samples of original minus cache-enabled path FLOPs.
        pub flops_saved: i64,
    }

    pub fn simulate(
        graph: &BackboneGraph,
        caches: &[CacheModel],
        subset: &[usize],
        samples: &SampleSet,
    ) -> Result<OracleRow> {
        let mut subset = subset.to_vec();
        subset.sort_unstable();
        let enabled: Vec<CacheModel> = caches
            .iter()
            .filter(|c| subset.contains(&c.ordinal))
            .cloned()
            .collect();
        let model = CacheEnabledModel::new(graph.clone(), enabled, 0.0)?;
        let records = model.infer_all(samples, 64)?;
        let mut reached = samples.len();
        let mut counts = Vec::new();
        let mut costs = Vec::new();
        for c in model.caches() {
            let hits = records.iter().filter(|r| r.exit == Exit::Cache(c.ordinal)).count();
            counts.push((hits, reached - hits));
            costs.push((c.cache_flops, c.fallback_flops));
            reached -= hits;
        }
        let flops_saved = records
            .iter()
            .map(|r| graph.total_flops() as i64 - r.path_flops as i64)
            .sum();
        Ok(OracleRow {
            score: score_counts(&counts, &costs),
            subset,
            counts,
            flops_saved,
        })
    }

    pub fn oracle_optimize(
        graph: &BackboneGraph,
        caches: &[CacheModel],
        samples: &SampleSet,
    ) -> Result<(Vec<usize>, Vec<OracleRow>)> {
        let mut ordinals: Vec<usize> = caches.iter().map(|c| c.ordinal).collect();
        ordinals.sort_unstable();
        let rows = subsets(&ordinals)?
            .into_iter()
            .map(|(_, s)| simulate(graph, caches, &s, samples))
            .collect::<Result<Vec<_>>>()?;
        let best = best_of(rows.iter().map(|r| (r.subset.as_slice(), r.score)))
            .map(|(s, _)| s.to_vec())
            .expect("the empty subset is always scored");
        Ok((best, rows))
    }
}
