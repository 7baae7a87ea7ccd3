//! Medial datasets: activations tapped at a candidate layer paired with the
//! backbone's own output distribution for the same sample.
//!
//! Ground-truth labels never enter this module; the teacher signal is the
//! backbone output.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::graph::{BackboneGraph, CandidateLayer};
use crate::loss::validate_distributions;
use crate::tensor::Tensor;
use crate::train::DistillSet;

const MAGIC: &[u8; 8] = b"LCMEDL01";
const COLLECT_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.5,
            val: 0.2,
            test: 0.3,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|&r| r.is_nan() || r <= 0.0) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "split ratios {all:?} must be positive and sum to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedialDataset {
    pub layer: String,
    pub tap_shape: Vec<usize>,
    pub num_classes: usize,
    pub backbone_hash: String,
    pub ids: Vec<String>,
    /// `[records, tap_shape...]`
    pub activations: Tensor,
    /// `[records, num_classes]`
    pub teacher: Tensor,
    pub splits: Option<Vec<Split>>,
}

/// Whether a stored dataset still matches the loaded backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Staleness {
    Fresh,
    Stale {
        dataset_hash: String,
        backbone_hash: String,
    },
}

/// Runs every sample through the backbone once and builds one medial
/// dataset per candidate, all sharing the same sample ids.
pub fn collect(
    graph: &BackboneGraph,
    ids: &[String],
    inputs: &Tensor,
    candidates: &[CandidateLayer],
) -> Result<Vec<MedialDataset>> {
    if ids.len() != inputs.batch_size() {
        return Err(Error::InvalidTensor(format!(
            "{} ids for {} samples",
            ids.len(),
            inputs.batch_size()
        )));
    }
    let taps: Vec<&str> = candidates.iter().map(|c| c.name.as_str()).collect();
    let mut acts: Vec<Vec<f32>> = vec![Vec::new(); candidates.len()];
    let mut teacher = Vec::with_capacity(ids.len() * graph.num_classes());
    let index: Vec<usize> = (0..ids.len()).collect();
    for chunk in index.chunks(COLLECT_BATCH) {
        let batch = inputs.select_rows(chunk);
        let (out, tapped) = graph.forward_with_taps(&batch, &taps)?;
        teacher.extend_from_slice(graph.to_probabilities(out).data());
        for (k, c) in candidates.iter().enumerate() {
            acts[k].extend_from_slice(tapped[&c.name].data());
        }
    }
    let teacher = Tensor::new(vec![ids.len(), graph.num_classes()], teacher)?;
    validate_distributions(&teacher)?;
    candidates
        .iter()
        .zip(acts)
        .map(|(c, a)| {
            let mut shape = vec![ids.len()];
            shape.extend_from_slice(&c.tap_shape);
            Ok(MedialDataset {
                layer: c.name.clone(),
                tap_shape: c.tap_shape.clone(),
                num_classes: graph.num_classes(),
                backbone_hash: graph.content_hash().to_string(),
                ids: ids.to_vec(),
                activations: Tensor::new(shape, a)?,
                teacher: teacher.clone(),
                splits: None,
            })
        })
        .collect()
}

/// Assigns every id to a split.
///
/// Validation and test sizes are `floor(ratio * n)`; train takes the rest.
/// The assignment depends only on the id set and the seed, so the same
/// sample lands in the same split at every layer.
pub fn assign_splits(
    ids: &[String],
    ratios: SplitRatios,
    seed: u64,
) -> Result<HashMap<String, Split>> {
    ratios.validate()?;
    if ids.len() < 3 {
        return Err(Error::TooFewRecords {
            actual: ids.len(),
            required: 3,
        });
    }
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    sorted.dedup();
    let n = sorted.len();
    let n_val = (ratios.val * n as f64).floor() as usize;
    let n_test = (ratios.test * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id.clone(), split)
        })
        .collect())
}

/// Assigns splits to a dataset in place and returns the per-record splits.
pub fn split(md: &mut MedialDataset, ratios: SplitRatios, seed: u64) -> Result<Vec<Split>> {
    let assignment = assign_splits(&md.ids, ratios, seed)?;
    md.apply_splits(&assignment)?;
    Ok(md.splits.clone().unwrap())
}

impl MedialDataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn apply_splits(&mut self, assignment: &HashMap<String, Split>) -> Result<()> {
        let splits = self
            .ids
            .iter()
            .map(|id| {
                assignment
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("no split assigned to sample `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.splits = Some(splits);
        Ok(())
    }

    /// Record indices of a split, in record order.
    pub fn split_indices(&self, which: Split) -> Result<Vec<usize>> {
        let splits = self
            .splits
            .as_ref()
            .ok_or_else(|| Error::Config(format!("dataset `{}` has no splits", self.layer)))?;
        let idx: Vec<usize> = (0..splits.len()).filter(|&i| splits[i] == which).collect();
        if idx.is_empty() {
            return Err(Error::EmptySplit(which.name()));
        }
        Ok(idx)
    }

    pub fn split_ids(&self, which: Split) -> Result<Vec<String>> {
        Ok(self
            .split_indices(which)?
            .into_iter()
            .map(|i| self.ids[i].clone())
            .collect())
    }

    pub fn distill_set(&self, which: Split) -> Result<DistillSet> {
        let idx = self.split_indices(which)?;
        DistillSet::new(
            self.activations.select_rows(&idx),
            self.teacher.select_rows(&idx),
        )
    }

    /// The backbone's predicted class for each record.
    pub fn teacher_classes(&self) -> Vec<usize> {
        self.teacher.argmax_rows()
    }

    pub fn staleness(&self, backbone_hash: &str) -> Staleness {
        if self.backbone_hash == backbone_hash {
            Staleness::Fresh
        } else {
            log::warn!(
                "medial dataset for `{}` was collected from backbone {} but {} is loaded",
                self.layer,
                self.backbone_hash,
                backbone_hash
            );
            Staleness::Stale {
                dataset_hash: self.backbone_hash.clone(),
                backbone_hash: backbone_hash.to_string(),
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            layer: self.layer.clone(),
            tap_shape: self.tap_shape.clone(),
            num_classes: self.num_classes,
            backbone_hash: self.backbone_hash.clone(),
            record_count: self.ids.len(),
            ids: self.ids.clone(),
            splits: self.splits.clone(),
        };
        let mut payload = Vec::with_capacity(self.activations.len() + self.teacher.len());
        for i in 0..self.len() {
            payload.extend_from_slice(self.activations.row(i));
            payload.extend_from_slice(self.teacher.row(i));
        }
        blob::write(path, MAGIC, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, payload): (Header, _) = blob::read(path, MAGIC, |h: &Header| {
            h.record_count * (h.tap_shape.iter().product::<usize>() + h.num_classes)
        })?;
        if h.ids.len() != h.record_count
            || h.splits.as_ref().is_some_and(|s| s.len() != h.record_count)
            || h.record_count == 0
        {
            return Err(Error::parse(
                path.display().to_string(),
                "record table does not match record count",
            ));
        }
        let tap_len: usize = h.tap_shape.iter().product();
        let mut acts = Vec::with_capacity(h.record_count * tap_len);
        let mut teacher = Vec::with_capacity(h.record_count * h.num_classes);
        for rec in payload.chunks_exact(tap_len + h.num_classes) {
            acts.extend_from_slice(&rec[..tap_len]);
            teacher.extend_from_slice(&rec[tap_len..]);
        }
        let mut shape = vec![h.record_count];
        shape.extend_from_slice(&h.tap_shape);
        Ok(MedialDataset {
            layer: h.layer,
            tap_shape: h.tap_shape,
            num_classes: h.num_classes,
            backbone_hash: h.backbone_hash,
            ids: h.ids,
            activations: Tensor::new(shape, acts)?,
            teacher: Tensor::new(vec![h.record_count, h.num_classes], teacher)?,
            splits: h.splits,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    layer: String,
    tap_shape: Vec<usize>,
    num_classes: usize,
    backbone_hash: String,
    record_count: usize,
    ids: Vec<String>,
    splits: Option<Vec<Split>>,
}

/// Checks that datasets collected together share one id sequence.
pub fn check_aligned(datasets: &[MedialDataset]) -> Result<()> {
    if let Some((first, rest)) = datasets.split_first() {
        for md in rest {
            if md.ids != first.ids || md.splits != first.splits {
                return Err(Error::SampleIdMismatch {
                    first: first.layer.clone(),
                    second: md.layer.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Split sizes keyed by split name, for reports.
pub fn split_sizes(md: &MedialDataset) -> BTreeMap<&'static str, usize> {
    let mut sizes = BTreeMap::new();
    for s in md.splits.iter().flatten() {
        *sizes.entry(s.name()).or_insert(0) += 1;
    }
    sizes
}
