//! Cache models: shallow classifiers attached to a candidate layer and
//! distilled from the backbone's output distributions.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::graph::CandidateLayer;
use crate::layers::{softmax_in_place, Layer, LayerSpec};
use crate::medial::{MedialDataset, Split};
use crate::model::Sequential;
use crate::tensor::{argmax, Tensor};
use crate::train::{train, DistillSet, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

/// Up to two convolutions (each followed by ReLU), global average pooling
/// when the tap is spatial, an optional hidden dense layer with ReLU, and a
/// dense output over the backbone's classes followed by log-softmax.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheArchitecture {
    pub convs: Vec<ConvStage>,
    /// Widths of hidden dense layers; the output layer is implicit.
    pub hidden: Vec<usize>,
}

impl CacheArchitecture {
    pub fn layer_specs(&self, tap_shape: &[usize], num_classes: usize) -> Result<Vec<LayerSpec>> {
        let mut specs = Vec::new();
        let mut shape = tap_shape.to_vec();
        let mut push = |spec: LayerSpec, shape: &mut Vec<usize>| -> Result<()> {
            *shape = spec.output_shape(shape)?;
            specs.push(spec);
            Ok(())
        };
        match tap_shape.len() {
            3 => {
                for conv in &self.convs {
                    let spec = LayerSpec::Conv2d {
                        in_channels: shape[0],
                        out_channels: conv.channels,
                        kernel: conv.kernel,
                        stride: conv.stride,
                        padding: conv.kernel / 2,
                    };
                    push(spec, &mut shape)?;
                    push(LayerSpec::Relu, &mut shape)?;
                }
                push(LayerSpec::GlobalAvgPool, &mut shape)?;
            }
            1 if self.convs.is_empty() => {}
            1 => {
                return Err(Error::Config(
                    "convolution stages need a spatial tap".into(),
                ))
            }
            _ => push(LayerSpec::Flatten, &mut shape)?,
        }
        for &width in &self.hidden {
            push(
                LayerSpec::Dense {
                    in_features: shape[0],
                    out_features: width,
                },
                &mut shape,
            )?;
            push(LayerSpec::Relu, &mut shape)?;
        }
        push(
            LayerSpec::Dense {
                in_features: shape[0],
                out_features: num_classes,
            },
            &mut shape,
        )?;
        push(LayerSpec::LogSoftmax, &mut shape)?;
        Ok(specs)
    }

    pub fn build(&self, tap_shape: &[usize], num_classes: usize, seed: u64) -> Result<Sequential> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self
            .layer_specs(tap_shape, num_classes)?
            .into_iter()
            .map(|spec| Layer::init(spec, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Sequential::new(layers))
    }

    /// Per-sample FLOPs (C₁).
    pub fn flops(&self, tap_shape: &[usize], num_classes: usize) -> Result<u64> {
        let mut shape = tap_shape.to_vec();
        let mut total = 0;
        for spec in self.layer_specs(tap_shape, num_classes)? {
            total += spec.flops(&shape);
            shape = spec.output_shape(&shape)?;
        }
        Ok(total)
    }

    /// Short label such as `c3s2x8-gap-d32-out`.
    pub fn describe(&self) -> String {
        let mut parts: Vec<String> = self
            .convs
            .iter()
            .map(|c| format!("c{}s{}x{}", c.kernel, c.stride, c.channels))
            .collect();
        if !self.convs.is_empty() {
            parts.push("gap".into());
        }
        parts.extend(self.hidden.iter().map(|w| format!("d{w}")));
        parts.push("out".into());
        parts.join("-")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchMenus {
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub channels: Vec<usize>,
    pub widths: Vec<usize>,
    pub max_convs: usize,
    pub max_linears: usize,
}

impl Default for SearchMenus {
    fn default() -> Self {
        Self {
            kernels: vec![1, 3],
            strides: vec![2],
            channels: vec![8],
            widths: vec![32],
            max_convs: 2,
            max_linears: 2,
        }
    }
}

impl SearchMenus {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty()
            || self.strides.is_empty()
            || self.channels.is_empty()
            || self.widths.is_empty()
        {
            return Err(Error::Config("search menus must be non-empty".into()));
        }
        if self.max_linears == 0 {
            return Err(Error::Config("at least one linear layer is required".into()));
        }
        Ok(())
    }
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Every architecture in the menus whose FLOPs stay below `fallback_flops`,
/// shallowest and narrowest first.
pub fn enumerate_search_space(
    tap_shape: &[usize],
    num_classes: usize,
    fallback_flops: u64,
    menus: &SearchMenus,
) -> Result<Vec<CacheArchitecture>> {
    menus.validate()?;
    let (kernels, strides, channels, widths) = (
        sorted(&menus.kernels),
        sorted(&menus.strides),
        sorted(&menus.channels),
        sorted(&menus.widths),
    );
    let mut stages = Vec::new();
    for &channels in &channels {
        for &kernel in &kernels {
            for &stride in &strides {
                stages.push(ConvStage {
                    kernel,
                    stride,
                    channels,
                });
            }
        }
    }
    let max_convs = if tap_shape.len() == 3 { menus.max_convs } else { 0 };
    let mut out = Vec::new();
    for n_conv in 0..=max_convs {
        let conv_stacks = product(&stages, n_conv);
        for n_lin in 1..=menus.max_linears {
            let hidden_stacks = product(&widths, n_lin - 1);
            for convs in &conv_stacks {
                for hidden in &hidden_stacks {
                    let arch = CacheArchitecture {
                        convs: convs.clone(),
                        hidden: hidden.clone(),
                    };
                    let Ok(flops) = arch.flops(tap_shape, num_classes) else {
                        continue;
                    };
                    if flops < fallback_flops {
                        out.push(arch);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn product<T: Clone>(items: &[T], depth: usize) -> Vec<Vec<T>> {
    let mut acc = vec![Vec::new()];
    for _ in 0..depth {
        acc = acc
            .into_iter()
            .flat_map(|prefix| {
                items.iter().map(move |it| {
                    let mut p = prefix.clone();
                    p.push(it.clone());
                    p
                })
            })
            .collect();
    }
    acc
}

/// Confidence gate of a cache model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Threshold {
    /// Never hits.
    Disabled,
    At(f32),
}

impl Threshold {
    pub fn admits(self, confidence: f32) -> bool {
        match self {
            Threshold::Disabled => false,
            Threshold::At(theta) => confidence >= theta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub confidence: f32,
}

/// Class and max probability of `softmax(logits / temperature)`.
pub fn scaled_prediction(logits: &[f32], temperature: f32) -> Prediction {
    let mut p: Vec<f32> = logits.iter().map(|v| v / temperature).collect();
    softmax_in_place(&mut p);
    let class = argmax(&p);
    Prediction {
        class,
        confidence: p[class],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheMetrics {
    /// Agreement with the backbone's predicted class on the validation split.
    pub val_accuracy: f64,
    pub val_loss: f32,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheModel {
    pub layer: String,
    pub ordinal: usize,
    pub architecture: CacheArchitecture,
    pub tap_shape: Vec<usize>,
    pub num_classes: usize,
    pub net: Sequential,
    pub temperature: f32,
    pub threshold: Threshold,
    /// Own FLOPs per sample (C₁).
    pub cache_flops: u64,
    /// Backbone FLOPs after the target layer (C₂).
    pub fallback_flops: u64,
    pub metrics: CacheMetrics,
}

impl CacheModel {
    /// Raw logits: every layer except the trailing log-softmax.
    pub fn logits(&self, activations: &Tensor) -> Result<Tensor> {
        self.net
            .forward_range(activations, self.net.layers.len() - 1)
    }

    pub fn predict(&self, activations: &Tensor) -> Result<Vec<Prediction>> {
        let logits = self.logits(activations)?;
        Ok(logits
            .rows()
            .map(|row| scaled_prediction(row, self.temperature))
            .collect())
    }
}

const MAGIC: &[u8; 8] = b"LCCACHE1";

#[derive(Serialize, Deserialize)]
struct Header {
    layer: String,
    ordinal: usize,
    architecture: CacheArchitecture,
    tap_shape: Vec<usize>,
    num_classes: usize,
    temperature: f32,
    threshold: Threshold,
    cache_flops: u64,
    fallback_flops: u64,
    metrics: CacheMetrics,
    backbone_hash: String,
}

impl CacheModel {
    /// Writes the cache with the hash of the backbone it was built for.
    pub fn save(&self, path: &Path, backbone_hash: &str) -> Result<()> {
        let header = Header {
            layer: self.layer.clone(),
            ordinal: self.ordinal,
            architecture: self.architecture.clone(),
            tap_shape: self.tap_shape.clone(),
            num_classes: self.num_classes,
            temperature: self.temperature,
            threshold: self.threshold,
            cache_flops: self.cache_flops,
            fallback_flops: self.fallback_flops,
            metrics: self.metrics.clone(),
            backbone_hash: backbone_hash.to_string(),
        };
        let payload: Vec<f32> = self
            .net
            .layers
            .iter()
            .flat_map(|l| l.params.iter().flatten().copied())
            .collect();
        blob::write(path, MAGIC, &header, &payload)
    }

    /// Returns the cache and the backbone hash it was saved with.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let mut specs = None;
        let (h, payload): (Header, Vec<f32>) = blob::read(path, MAGIC, |h: &Header| {
            match h.architecture.layer_specs(&h.tap_shape, h.num_classes) {
                Ok(s) => {
                    let n = s.iter().map(LayerSpec::param_count).sum();
                    specs = Some(s);
                    n
                }
                Err(_) => 0,
            }
        })?;
        let specs = specs.ok_or_else(|| {
            Error::parse(path.display().to_string(), "architecture does not fit the tap shape")
        })?;
        let mut offset = 0;
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let params = spec
                .param_shapes()
                .iter()
                .map(|shape| {
                    let n: usize = shape.iter().product();
                    let p = payload[offset..offset + n].to_vec();
                    offset += n;
                    p
                })
                .collect();
            layers.push(Layer::new(spec, params)?);
        }
        let cache = CacheModel {
            layer: h.layer,
            ordinal: h.ordinal,
            architecture: h.architecture,
            tap_shape: h.tap_shape,
            num_classes: h.num_classes,
            net: Sequential::new(layers),
            temperature: h.temperature,
            threshold: h.threshold,
            cache_flops: h.cache_flops,
            fallback_flops: h.fallback_flops,
            metrics: h.metrics,
        };
        Ok((cache, h.backbone_hash))
    }
}

/// Fraction of rows where the model's argmax equals the teacher's argmax.
pub fn agreement(net: &Sequential, set: &DistillSet) -> Result<f64> {
    let out = net.forward(&set.inputs)?;
    let hits = out
        .argmax_rows()
        .iter()
        .zip(set.targets.argmax_rows())
        .filter(|(a, b)| **a == *b)
        .count();
    Ok(hits as f64 / set.len() as f64)
}

/// Distills the backbone into `arch` on the train split, early-stopped on
/// the validation split.
pub fn train_cache(
    arch: &CacheArchitecture,
    md: &MedialDataset,
    candidate: &CandidateLayer,
    cfg: &TrainConfig,
) -> Result<CacheModel> {
    let init = arch.build(&md.tap_shape, md.num_classes, cfg.seed)?;
    fit(arch.clone(), init, md, candidate, cfg)
}

/// Retrains an existing cache starting from its current weights.
pub fn retrain_cache(
    cache: &CacheModel,
    md: &MedialDataset,
    candidate: &CandidateLayer,
    cfg: &TrainConfig,
) -> Result<CacheModel> {
    fit(cache.architecture.clone(), cache.net.clone(), md, candidate, cfg)
}

fn fit(
    architecture: CacheArchitecture,
    init: Sequential,
    md: &MedialDataset,
    candidate: &CandidateLayer,
    cfg: &TrainConfig,
) -> Result<CacheModel> {
    if md.layer != candidate.name || md.tap_shape != candidate.tap_shape {
        return Err(Error::Config(format!(
            "medial dataset `{}` does not belong to candidate `{}`",
            md.layer, candidate.name
        )));
    }
    let train_set = md.distill_set(Split::Train)?;
    let val_set = md.distill_set(Split::Val)?;
    md.split_indices(Split::Test)?;
    let outcome = train(&init, &train_set, Some(&val_set), cfg)?;
    let val_accuracy = agreement(&outcome.model, &val_set)?;
    let val_loss = crate::train::evaluate_loss(&outcome.model, &val_set)?;
    let cache_flops = architecture.flops(&md.tap_shape, md.num_classes)?;
    Ok(CacheModel {
        layer: candidate.name.clone(),
        ordinal: candidate.ordinal,
        tap_shape: md.tap_shape.clone(),
        num_classes: md.num_classes,
        architecture,
        net: outcome.model,
        temperature: 1.0,
        threshold: Threshold::Disabled,
        cache_flops,
        fallback_flops: candidate.fallback_flops,
        metrics: CacheMetrics {
            val_accuracy,
            val_loss,
            epochs_run: outcome.history.len(),
            best_epoch: outcome.best_epoch,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionRule {
    /// Required cache accuracy above chance (1 / classes).
    pub convergence_margin: f64,
    /// Architectures within this much of the best accuracy compete on FLOPs.
    pub accuracy_slack: f64,
}

impl Default for SelectionRule {
    fn default() -> Self {
        Self {
            convergence_margin: 0.05,
            accuracy_slack: 0.01,
        }
    }
}

pub fn is_converged(val_accuracy: f64, num_classes: usize, margin: f64) -> bool {
    val_accuracy > 1.0 / num_classes as f64 + margin
}

/// Index of the selected `(accuracy, flops)` entry, or `None` when nothing
/// converged. Ties on FLOPs go to the earlier entry.
pub fn select_architecture(
    scored: &[(f64, u64)],
    num_classes: usize,
    rule: SelectionRule,
) -> Option<usize> {
    let converged: Vec<usize> = (0..scored.len())
        .filter(|&i| is_converged(scored[i].0, num_classes, rule.convergence_margin))
        .collect();
    let best = converged
        .iter()
        .map(|&i| scored[i].0)
        .fold(f64::NEG_INFINITY, f64::max);
    converged
        .into_iter()
        .filter(|&i| scored[i].0 >= best - rule.accuracy_slack)
        .min_by_key(|&i| (scored[i].1, i))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub layer: String,
    pub index: usize,
    pub architecture: String,
    pub cache_flops: u64,
    pub val_accuracy: f64,
    pub converged: bool,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// `None` when the layer is discarded.
    pub selected: Option<CacheModel>,
    pub rows: Vec<SearchRow>,
}

/// Seed for job `index` derived from a base seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains every architecture in the search space (in parallel, each job
/// seeded independently) and picks the cheapest near-best converged one.
pub fn search(
    candidate: &CandidateLayer,
    md: &MedialDataset,
    menus: &SearchMenus,
    cfg: &TrainConfig,
    rule: SelectionRule,
) -> Result<SearchOutcome> {
    let space = enumerate_search_space(
        &md.tap_shape,
        md.num_classes,
        candidate.fallback_flops,
        menus,
    )?;
    let trained = space
        .par_iter()
        .enumerate()
        .map(|(i, arch)| {
            let job = TrainConfig {
                seed: derive_seed(cfg.seed, i as u64),
                ..cfg.clone()
            };
            train_cache(arch, md, candidate, &job)
        })
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<(f64, u64)> = trained
        .iter()
        .map(|c| (c.metrics.val_accuracy, c.cache_flops))
        .collect();
    let chosen = select_architecture(&scored, md.num_classes, rule);
    let rows = trained
        .iter()
        .enumerate()
        .map(|(i, c)| SearchRow {
            layer: candidate.name.clone(),
            index: i,
            architecture: c.architecture.describe(),
            cache_flops: c.cache_flops,
            val_accuracy: c.metrics.val_accuracy,
            converged: is_converged(
                c.metrics.val_accuracy,
                md.num_classes,
                rule.convergence_margin,
            ),
            selected: chosen == Some(i),
        })
        .collect();
    Ok(SearchOutcome {
        selected: chosen.map(|i| trained[i].clone()),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_taps_only_enumerate_linear_stacks() {
        let menus = SearchMenus {
            widths: vec![16, 32],
            ..SearchMenus::default()
        };
        let space = enumerate_search_space(&[20], 4, u64::MAX, &menus).unwrap();
        assert_eq!(space.len(), 3);
        assert!(space.iter().all(|a| a.convs.is_empty()));
        assert_eq!(space[0].hidden, Vec::<usize>::new());
    }

    #[test]
    fn spatial_count_matches_closed_form() {
        let menus = SearchMenus {
            kernels: vec![1, 3, 5],
            strides: vec![1, 2],
            channels: vec![8],
            widths: vec![32],
            max_convs: 2,
            max_linears: 2,
        };
        // stage choices s = 3 kernels x 2 strides x 1 channel = 6
        // conv stacks 1 + s + s^2 = 43, linear stacks 1 + 1 = 2
        let space = enumerate_search_space(&[3, 8, 8], 10, u64::MAX, &menus).unwrap();
        assert_eq!(space.len(), 86);
        assert!(space.windows(2).all(|w| w[0].convs.len() <= w[1].convs.len()));
    }

    #[test]
    fn tiny_fallback_empties_the_space() {
        let space = enumerate_search_space(&[3, 8, 8], 10, 10, &SearchMenus::default()).unwrap();
        assert!(space.is_empty());
    }

    #[test]
    fn flops_of_gap_linear_cache() {
        let arch = CacheArchitecture {
            convs: vec![],
            hidden: vec![],
        };
        // gap 3*8*8 + dense 2*3*10 + log-softmax 5*10
        assert_eq!(arch.flops(&[3, 8, 8], 10).unwrap(), 192 + 60 + 50);
    }

    #[test]
    fn convergence_rule() {
        assert!(is_converged(0.9, 10, 0.05));
        assert!(!is_converged(0.11, 10, 0.05));
        assert!(!is_converged(0.5, 2, 0.0));
    }

    #[test]
    fn selection_prefers_cheaper_within_slack() {
        let rule = SelectionRule::default();
        assert_eq!(
            select_architecture(&[(0.93, 5000), (0.925, 2000)], 10, rule),
            Some(1)
        );
        assert_eq!(
            select_architecture(&[(0.93, 5000), (0.80, 2000)], 10, rule),
            Some(0)
        );
        assert_eq!(select_architecture(&[(0.10, 10), (0.12, 5)], 10, rule), None);
        assert_eq!(select_architecture(&[(0.5, 999_999)], 10, rule), Some(0));
    }

    #[test]
    fn thresholds_gate_confidence() {
        assert!(Threshold::At(0.8).admits(0.8));
        assert!(!Threshold::At(0.8).admits(0.79));
        assert!(!Threshold::Disabled.admits(1.0));
    }
}
