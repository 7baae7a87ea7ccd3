//! Small synthetic datasets and backbones for demos and tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BackboneGraph, GraphBuilder, NodeOp};
use crate::layers::{Layer, LayerSpec};
use crate::model::Sequential;
use crate::samples::SampleSet;
use crate::tensor::Tensor;
use crate::train::{train, DistillSet, TrainConfig};

/// Class-conditional images: every class owns a sign vector of channel
/// means and a zero-mean spatial pattern. Easy samples carry the full mean
/// offset, hard ones a faint one, so shallow pooled features resolve only
/// part of the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageMixture {
    pub classes: usize,
    pub channels: usize,
    pub side: usize,
    pub easy_fraction: f32,
    pub easy_mean: f32,
    pub hard_mean: f32,
    pub pattern: f32,
    pub noise: f32,
    /// Seed of the class prototypes; sample draws use their own seed.
    pub prototype_seed: u64,
}

impl Default for ImageMixture {
    fn default() -> Self {
        Self {
            classes: 10,
            channels: 4,
            side: 8,
            easy_fraction: 0.6,
            easy_mean: 1.0,
            hard_mean: 0.15,
            pattern: 0.5,
            noise: 1.0,
            prototype_seed: 7,
        }
    }
}

/// Per-class channel means and spatial patterns.
type Prototypes = (Vec<Vec<f32>>, Vec<Vec<f32>>);

impl ImageMixture {
    pub fn sample_shape(&self) -> Vec<usize> {
        vec![self.channels, self.side, self.side]
    }

    fn prototypes(&self) -> Result<Prototypes> {
        if self.channels >= 16 || 1usize << self.channels < self.classes {
            return Err(Error::Config(format!(
                "{} channels cannot give {} classes distinct sign vectors",
                self.channels, self.classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.prototype_seed);
        let mut codes: Vec<usize> = (0..1usize << self.channels).collect();
        codes.shuffle(&mut rng);
        let means = codes[..self.classes]
            .iter()
            .map(|code| {
                (0..self.channels)
                    .map(|c| if code >> c & 1 == 1 { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();
        let area = self.side * self.side;
        let patterns = (0..self.classes)
            .map(|_| {
                let mut p: Vec<f32> = (0..self.channels * area)
                    .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                    .collect();
                for ch in p.chunks_mut(area) {
                    let m = ch.iter().sum::<f32>() / area as f32;
                    ch.iter_mut().for_each(|v| *v -= m);
                }
                p
            })
            .collect();
        Ok((means, patterns))
    }

    /// `n` labeled samples with balanced classes in shuffled order.
    pub fn generate(&self, n: usize, seed: u64) -> Result<SampleSet> {
        let (means, patterns) = self.prototypes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        labels.shuffle(&mut rng);
        let area = self.side * self.side;
        let mut data = Vec::with_capacity(n * self.channels * area);
        for &label in &labels {
            let scale = if rng.gen::<f32>() < self.easy_fraction {
                self.easy_mean
            } else {
                self.hard_mean
            };
            for c in 0..self.channels {
                for j in 0..area {
                    let noise: f32 = rng.sample(StandardNormal);
                    data.push(
                        scale * means[label][c]
                            + self.pattern * patterns[label][c * area + j]
                            + self.noise * noise,
                    );
                }
            }
        }
        let mut shape = vec![n];
        shape.extend(self.sample_shape());
        SampleSet::new(
            SampleSet::sequential_ids(n),
            Tensor::new(shape, data)?,
            Some(labels),
        )
    }
}

/// Four conv blocks with a pooling step before the last, global average
/// pooling and a dense head.
pub fn toy_conv_backbone(channels: usize, classes: usize, seed: u64) -> Result<BackboneGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = |spec| Layer::init(spec, &mut rng);
    let conv = |i, o| LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    GraphBuilder::new()
        .input("image", vec![channels, 8, 8])
        .then("conv1", init(conv(channels, 8))?, false)
        .then("block1", Layer::op(LayerSpec::Relu), true)
        .then("conv2", init(conv(8, 16))?, false)
        .then("block2", Layer::op(LayerSpec::Relu), true)
        .then("conv3", init(conv(16, 16))?, false)
        .then("block3", Layer::op(LayerSpec::Relu), true)
        .then("pool", Layer::op(LayerSpec::MaxPool2d { kernel: 2, stride: 2 }), false)
        .then("conv4", init(conv(16, 32))?, false)
        .then("block4", Layer::op(LayerSpec::Relu), true)
        .then("gap", Layer::op(LayerSpec::GlobalAvgPool), false)
        .then("fc", init(LayerSpec::Dense { in_features: 32, out_features: classes })?, false)
        .then("probs", Layer::op(LayerSpec::LogSoftmax), false)
        .build("probs", classes)
}

/// `blocks` dense+ReLU blocks of equal width followed by a dense head.
pub fn mlp_chain(input: usize, width: usize, blocks: usize, classes: usize, seed: u64) -> Result<BackboneGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new().input("x", vec![input]);
    let mut features = input;
    for i in 1..=blocks {
        let dense = Layer::init(
            LayerSpec::Dense {
                in_features: features,
                out_features: width,
            },
            &mut rng,
        )?;
        b = b
            .then(&format!("fc{i}"), dense, false)
            .then(&format!("act{i}"), Layer::op(LayerSpec::Relu), true);
        features = width;
    }
    let head = Layer::init(
        LayerSpec::Dense {
            in_features: features,
            out_features: classes,
        },
        &mut rng,
    )?;
    b.then("head", head, false)
        .then("probs", Layer::op(LayerSpec::LogSoftmax), false)
        .build("probs", classes)
}

/// Standard-normal unlabeled vectors.
pub fn gaussian_vectors(n: usize, dim: usize, seed: u64) -> Result<SampleSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
    SampleSet::new(SampleSet::sequential_ids(n), Tensor::new(vec![n, dim], data)?, None)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::InvalidTensor(format!("label {l} out of range")));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Supervised training of a chain-shaped backbone on labeled samples;
/// names and block flags are kept.
pub fn pretrain_backbone(
    graph: &BackboneGraph,
    train_set: &SampleSet,
    val_set: Option<&SampleSet>,
    cfg: &TrainConfig,
) -> Result<BackboneGraph> {
    let order = graph.topological_order();
    let mut layers = Vec::new();
    for (pos, &i) in order.iter().enumerate().skip(1) {
        let node = &graph.nodes()[i];
        if node.inputs != [order[pos - 1]] {
            return Err(Error::InvalidGraph(format!(
                "`{}` breaks the chain; only sequential backbones can be pretrained here",
                node.name
            )));
        }
        layers.push(node.layer().expect("non-input node").clone());
    }
    let to_set = |s: &SampleSet| -> Result<DistillSet> {
        let labels = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config("pretraining needs labels".into()))?;
        DistillSet::new(s.inputs.clone(), one_hot(labels, graph.num_classes())?)
    };
    let data = to_set(train_set)?;
    let val = val_set.map(to_set).transpose()?;
    let trained: Sequential = train(&Sequential::new(layers), &data, val.as_ref(), cfg)?.model;
    let mut b = GraphBuilder::new();
    let mut trained_layers = trained.layers.into_iter();
    for &i in order {
        let node = &graph.nodes()[i];
        b = match &node.op {
            NodeOp::Input { shape } => b.input(&node.name, shape.clone()),
            NodeOp::Layer(_) => b.then(&node.name, trained_layers.next().unwrap(), node.block_output),
        };
    }
    b.build(&graph.nodes()[graph.output_node()].name, graph.num_classes())
}

/// Fraction of samples whose backbone argmax equals the label.
pub fn accuracy(graph: &BackboneGraph, samples: &SampleSet) -> Result<f64> {
    let labels = samples
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("accuracy needs labels".into()))?;
    let mut correct = 0;
    let all: Vec<usize> = (0..samples.len()).collect();
    for chunk in all.chunks(256) {
        let out = graph.forward(&samples.inputs.select_rows(chunk))?;
        correct += out
            .argmax_rows()
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == labels[i])
            .count();
    }
    Ok(correct as f64 / samples.len() as f64)
}
