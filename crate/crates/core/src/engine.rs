//! Cache-enabled inference: the backbone runs layer by layer, each enabled
//! cache inspects its tapped activation, confident samples are resolved on
//! the spot and dropped from the live batch.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheModel, Threshold};
use crate::calibration::{AccuracyEffect, HitCategories};
use crate::error::{Error, Result};
use crate::graph::BackboneGraph;
use crate::samples::SampleSet;
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exit {
    Cache(usize),
    Final,
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exit::Cache(n) => write!(f, "cache-{n}"),
            Exit::Final => f.write_str("final"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    pub sample_id: String,
    pub exit: Exit,
    pub class: usize,
    pub confidence: f32,
    /// Backbone FLOPs up to the exit plus every cache evaluated on the way.
    pub path_flops: u64,
    /// Time from the start of the batch to this resolution.
    pub elapsed_ns: u64,
}

#[derive(Debug, Clone)]
pub struct CacheEnabledModel {
    graph: BackboneGraph,
    caches: Vec<CacheModel>,
    tap_nodes: Vec<usize>,
    tolerance: f64,
}

impl CacheEnabledModel {
    /// Caches are ordered by ordinal; each must target a layer of `graph`
    /// with matching shape and fallback cost.
    pub fn new(graph: BackboneGraph, mut caches: Vec<CacheModel>, tolerance: f64) -> Result<Self> {
        caches.sort_by_key(|c| c.ordinal);
        let mut tap_nodes = Vec::with_capacity(caches.len());
        for (i, cache) in caches.iter().enumerate() {
            if i > 0 && caches[i - 1].ordinal == cache.ordinal {
                return Err(Error::InvalidGraph(format!(
                    "two caches share ordinal {}",
                    cache.ordinal
                )));
            }
            let node = graph.node_index(&cache.layer)?;
            if graph.node_shape(node) != cache.tap_shape.as_slice() {
                return Err(Error::shape(
                    &cache.layer,
                    graph.node_shape(node),
                    &cache.tap_shape,
                ));
            }
            let fallback = graph.total_flops() - graph.cumulative_flops(node);
            if fallback != cache.fallback_flops || cache.num_classes != graph.num_classes() {
                return Err(Error::InvalidGraph(format!(
                    "cache for `{}` was built against a different backbone",
                    cache.layer
                )));
            }
            if tap_nodes.last().is_some_and(|&prev| graph_position(&graph, prev) >= graph_position(&graph, node)) {
                return Err(Error::InvalidGraph(
                    "cache ordinals disagree with layer order".into(),
                ));
            }
            tap_nodes.push(node);
        }
        Ok(Self {
            graph,
            caches,
            tap_nodes,
            tolerance,
        })
    }

    pub fn graph(&self) -> &BackboneGraph {
        &self.graph
    }

    pub fn caches(&self) -> &[CacheModel] {
        &self.caches
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    /// Same backbone and caches with every threshold disabled.
    pub fn disabled(&self) -> Self {
        let mut m = self.clone();
        for c in &mut m.caches {
            c.threshold = Threshold::Disabled;
        }
        m
    }

    /// Runs one batch. `resolve` sees each record as soon as its sample
    /// exits; an error from it aborts the batch.
    pub fn infer_batch<F>(&self, ids: &[String], batch: &Tensor, mut resolve: F) -> Result<Vec<ExitRecord>>
    where
        F: FnMut(&ExitRecord) -> std::result::Result<(), String>,
    {
        if ids.len() != batch.batch_size() {
            return Err(Error::InvalidTensor(format!(
                "{} ids for {} samples",
                ids.len(),
                batch.batch_size()
            )));
        }
        let start = Instant::now();
        let mut live: Vec<usize> = (0..ids.len()).collect();
        let mut overhead = 0u64;
        let mut records = Vec::with_capacity(ids.len());
        let mut emit = |rec: ExitRecord, records: &mut Vec<ExitRecord>| -> Result<()> {
            resolve(&rec).map_err(|message| Error::Callback {
                sample_id: rec.sample_id.clone(),
                message,
            })?;
            records.push(rec);
            Ok(())
        };
        let output = self.graph.execute(batch, |node, act| {
            let Some(k) = self.tap_nodes.iter().position(|&t| t == node) else {
                return Ok(None);
            };
            let cache = &self.caches[k];
            let preds = cache.predict(act)?;
            overhead += cache.cache_flops;
            let path = self.graph.cumulative_flops(node) + overhead;
            let mut keep = Vec::with_capacity(preds.len());
            for (row, p) in preds.iter().enumerate() {
                if cache.threshold.admits(p.confidence) {
                    let rec = ExitRecord {
                        sample_id: ids[live[row]].clone(),
                        exit: Exit::Cache(cache.ordinal),
                        class: p.class,
                        confidence: p.confidence,
                        path_flops: path,
                        elapsed_ns: start.elapsed().as_nanos() as u64,
                    };
                    emit(rec, &mut records)?;
                } else {
                    keep.push(row);
                }
            }
            if keep.len() == live.len() {
                return Ok(None);
            }
            live = keep.iter().map(|&r| live[r]).collect();
            Ok(Some(keep))
        })?;
        if let Some(out) = output {
            let probs = self.graph.to_probabilities(out);
            let path = self.graph.total_flops() + overhead;
            for (row, p) in probs.rows().enumerate() {
                let class = argmax(p);
                let rec = ExitRecord {
                    sample_id: ids[live[row]].clone(),
                    exit: Exit::Final,
                    class,
                    confidence: p[class],
                    path_flops: path,
                    elapsed_ns: start.elapsed().as_nanos() as u64,
                };
                emit(rec, &mut records)?;
            }
        }
        Ok(records)
    }

    /// Records for a whole sample set, in chunks of `batch_size`, returned
    /// in input order.
    pub fn infer_all(&self, samples: &SampleSet, batch_size: usize) -> Result<Vec<ExitRecord>> {
        let batch_size = batch_size.max(1);
        let mut out = Vec::with_capacity(samples.len());
        let all: Vec<usize> = (0..samples.len()).collect();
        for chunk in all.chunks(batch_size) {
            let part = samples.select(chunk);
            let mut recs = self.infer_batch(&part.ids, &part.inputs, |_| Ok(()))?;
            let pos: BTreeMap<&str, usize> = part
                .ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.as_str(), i))
                .collect();
            recs.sort_by_key(|r| pos[r.sample_id.as_str()]);
            out.extend(recs);
        }
        Ok(out)
    }
}

fn graph_position(graph: &BackboneGraph, node: usize) -> usize {
    graph
        .topological_order()
        .iter()
        .position(|&n| n == node)
        .expect("node in order")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub samples: usize,
    pub original_total: u64,
    pub cache_enabled_total: u64,
    pub original_mean: f64,
    pub cache_enabled_mean: f64,
    /// `1 - cache_enabled / original`.
    pub reduction: f64,
}

pub fn flops_summary(graph: &BackboneGraph, records: &[ExitRecord]) -> FlopsSummary {
    let n = records.len();
    let original_total = graph.total_flops() * n as u64;
    let cache_enabled_total: u64 = records.iter().map(|r| r.path_flops).sum();
    let mean = |t: u64| if n == 0 { 0.0 } else { t as f64 / n as f64 };
    FlopsSummary {
        samples: n,
        original_total,
        cache_enabled_total,
        original_mean: mean(original_total),
        cache_enabled_mean: mean(cache_enabled_total),
        reduction: if original_total == 0 {
            0.0
        } else {
            1.0 - cache_enabled_total as f64 / original_total as f64
        },
    }
}

pub fn average_flops(model: &CacheEnabledModel, samples: &SampleSet) -> Result<FlopsSummary> {
    let records = model.infer_all(samples, 64)?;
    Ok(flops_summary(model.graph(), &records))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Timed repetitions of one batch per configuration.
    pub repetitions: usize,
    /// Untimed repetitions run first.
    pub warmup: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            repetitions: 100,
            warmup: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitReport {
    pub exit: Exit,
    pub reached: usize,
    pub hits: usize,
    /// Over samples reaching this exit.
    pub hit_rate: f64,
    /// Agreement with the backbone among hits.
    pub cache_accuracy: Option<f64>,
    /// Agreement with ground truth among hits.
    pub gt_accuracy: Option<f64>,
    /// Ground-truth accuracy change over all evaluated samples.
    pub effect: AccuracyEffect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub samples: usize,
    pub tolerance: f64,
    pub exits: Vec<ExitReport>,
    pub base_accuracy: f64,
    pub cache_enabled_accuracy: f64,
    /// Fraction of samples resolved by any cache.
    pub overall_hit_rate: f64,
    pub flops: FlopsSummary,
    pub base_latency_ns: f64,
    pub cache_enabled_latency_ns: f64,
    pub latency_batch_size: usize,
}

impl EvaluationReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "samples {}  tolerance {:.4}\nbase accuracy {:.4}  cache-enabled accuracy {:.4}  overall hit rate {:.4}\n\
             mean FLOPs {:.0} -> {:.0}  reduction {:.2}%\nbatch latency ({} samples) {:.3} ms -> {:.3} ms\n",
            self.samples,
            self.tolerance,
            self.base_accuracy,
            self.cache_enabled_accuracy,
            self.overall_hit_rate,
            self.flops.original_mean,
            self.flops.cache_enabled_mean,
            self.flops.reduction * 100.0,
            self.latency_batch_size,
            self.base_latency_ns / 1e6,
            self.cache_enabled_latency_ns / 1e6,
        );
        s.push_str("exit\treached\thits\thit_rate\tcache_acc\tgt_acc\teffect\n");
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |a| format!("{a:.4}"));
        for e in &self.exits {
            s.push_str(&format!(
                "{}\t{}\t{}\t{:.4}\t{}\t{}\t{:+.4}\n",
                e.exit,
                e.reached,
                e.hits,
                e.hit_rate,
                opt(e.cache_accuracy),
                opt(e.gt_accuracy),
                e.effect.effect
            ));
        }
        s
    }
}

/// Per-exit and overall metrics from records in input order, the plain
/// backbone's classes, and ground truth.
pub fn summarize(
    model: &CacheEnabledModel,
    records: &[ExitRecord],
    backbone: &[usize],
    labels: &[usize],
) -> Result<(Vec<ExitReport>, f64, f64, f64)> {
    let n = records.len();
    if labels.len() != n || backbone.len() != n {
        return Err(Error::LabelMismatch {
            labels: labels.len(),
            samples: n,
        });
    }
    let mut exits: Vec<Exit> = model.caches().iter().map(|c| Exit::Cache(c.ordinal)).collect();
    exits.push(Exit::Final);
    let mut reached = n;
    let mut reports = Vec::with_capacity(exits.len());
    for exit in exits {
        let mut cat = HitCategories::default();
        let (mut hits, mut agree) = (0, 0);
        for ((r, &b), &l) in records.iter().zip(backbone).zip(labels) {
            if r.exit == exit {
                hits += 1;
                agree += (r.class == b) as usize;
                cat.add(r.class, b, l);
            }
        }
        let gt = cat.both_correct + cat.cache_fixed;
        reports.push(ExitReport {
            exit,
            reached,
            hits,
            hit_rate: if reached == 0 { 0.0 } else { hits as f64 / reached as f64 },
            cache_accuracy: (hits > 0).then(|| agree as f64 / hits as f64),
            gt_accuracy: (hits > 0).then(|| gt as f64 / hits as f64),
            effect: AccuracyEffect::from_categories(cat, n),
        });
        reached -= hits;
    }
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let base = frac(backbone.iter().zip(labels).filter(|(b, l)| b == l).count());
    let cached = frac(records.iter().zip(labels).filter(|(r, &l)| r.class == l).count());
    let early = frac(records.iter().filter(|r| r.exit != Exit::Final).count());
    Ok((reports, base, cached, early))
}

fn time_batch(model: &CacheEnabledModel, ids: &[String], batch: &Tensor, opts: EvalOptions) -> Result<f64> {
    for _ in 0..opts.warmup {
        model.infer_batch(ids, batch, |_| Ok(()))?;
    }
    if opts.repetitions == 0 {
        return Ok(0.0);
    }
    let start = Instant::now();
    for _ in 0..opts.repetitions {
        model.infer_batch(ids, batch, |_| Ok(()))?;
    }
    Ok(start.elapsed().as_nanos() as f64 / opts.repetitions as f64)
}

pub fn evaluate(model: &CacheEnabledModel, samples: &SampleSet, opts: EvalOptions) -> Result<EvaluationReport> {
    let labels = samples
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("evaluation needs labeled samples".into()))?;
    if samples.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let records = model.infer_all(samples, opts.batch_size)?;
    let base = model.disabled();
    let backbone: Vec<usize> = base
        .infer_all(samples, opts.batch_size)?
        .iter()
        .map(|r| r.class)
        .collect();
    let (exits, base_accuracy, cache_enabled_accuracy, overall_hit_rate) =
        summarize(model, &records, &backbone, labels)?;
    let take: Vec<usize> = (0..samples.len().min(opts.batch_size.max(1))).collect();
    let timing = samples.select(&take);
    Ok(EvaluationReport {
        samples: samples.len(),
        tolerance: model.tolerance(),
        exits,
        base_accuracy,
        cache_enabled_accuracy,
        overall_hit_rate,
        flops: flops_summary(model.graph(), &records),
        base_latency_ns: time_batch(&base, &timing.ids, &timing.inputs, opts)?,
        cache_enabled_latency_ns: time_batch(model, &timing.ids, &timing.inputs, opts)?,
        latency_batch_size: take.len(),
    })
}
