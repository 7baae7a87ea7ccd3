//! Mini-batch distillation training with early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::loss::{kl_div_loss, validate_distributions};
use crate::model::Sequential;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 64,
            max_epochs: 30,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Inputs paired with teacher distributions.
#[derive(Debug, Clone)]
pub struct DistillSet {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl DistillSet {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.batch_size() != targets.batch_size() || targets.shape().len() != 2 {
            return Err(Error::shape(
                "distill-set",
                &[inputs.batch_size(), 0],
                targets.shape(),
            ));
        }
        validate_distributions(&targets)?;
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.batch_size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: Option<f32>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights with the lowest monitored loss.
    pub model: Sequential,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the returned weights; 0 when no epoch ran.
    pub best_epoch: usize,
}

/// Trains the dense and convolution parameters of `model`, which must end
/// in log-softmax, to match the teacher distributions under KL divergence.
///
/// Early stopping monitors the validation loss when `val` is given and the
/// epoch's mean training loss otherwise.
pub fn train(
    model: &Sequential,
    data: &DistillSet,
    val: Option<&DistillSet>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if model.layers.last().map(|l| &l.spec) != Some(&LayerSpec::LogSoftmax) {
        return Err(Error::Config(
            "trained models must end with log-softmax".into(),
        ));
    }

    let mut current = model.clone();
    let mut best = model.clone();
    let mut best_loss = f32::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut history = Vec::new();
    let mut optimizer = Optimizer::new(cfg, &current);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.inputs.select_rows(chunk);
            let t = data.targets.select_rows(chunk);
            let trace = current.forward_trace(&x)?;
            let out = trace.last().unwrap();
            if !out.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    learning_rate: cfg.learning_rate,
                });
            }
            let loss = kl_div_loss(out, &t)?;
            if !loss.value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    learning_rate: cfg.learning_rate,
                });
            }
            loss_sum += loss.value as f64 * chunk.len() as f64;
            let grads = current.backward(&trace, loss.grad_log_pd)?;
            optimizer.step(&mut current, &grads);
        }
        let train_loss = (loss_sum / data.len() as f64) as f32;
        let val_loss = match val {
            Some(v) if !v.is_empty() => Some(evaluate_loss(&current, v)?),
            _ => None,
        };
        let monitored = val_loss.unwrap_or(train_loss);
        if !monitored.is_finite() {
            return Err(Error::Divergence {
                epoch,
                learning_rate: cfg.learning_rate,
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if monitored < best_loss {
            best_loss = monitored;
            best = current.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
    })
}

/// Mean KL loss of `model` over a whole set.
pub fn evaluate_loss(model: &Sequential, set: &DistillSet) -> Result<f32> {
    let mut total = 0.0f64;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(256) {
        let out = model.forward(&set.inputs.select_rows(chunk))?;
        let loss = kl_div_loss(&out, &set.targets.select_rows(chunk))?;
        total += loss.value as f64 * chunk.len() as f64;
    }
    Ok((total / set.len() as f64) as f32)
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    step: i32,
    first: Vec<Vec<Vec<f32>>>,
    second: Vec<Vec<Vec<f32>>>,
}

const MOMENTUM: f32 = 0.9;
const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const EPS: f32 = 1e-8;

impl Optimizer {
    fn new(cfg: &TrainConfig, model: &Sequential) -> Self {
        let zeros: Vec<Vec<Vec<f32>>> = model
            .layers
            .iter()
            .map(|l| l.params.iter().map(|p| vec![0.0; p.len()]).collect())
            .collect();
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            step: 0,
            second: zeros.clone(),
            first: zeros,
        }
    }

    fn step(&mut self, model: &mut Sequential, grads: &[Vec<Vec<f32>>]) {
        self.step += 1;
        let (bc1, bc2) = (
            1.0 - BETA1.powi(self.step),
            1.0 - BETA2.powi(self.step),
        );
        for (li, layer) in model.layers.iter_mut().enumerate() {
            if !layer.spec.trainable() {
                continue;
            }
            for (pi, param) in layer.params.iter_mut().enumerate() {
                let g = &grads[li][pi];
                let m = &mut self.first[li][pi];
                match self.kind {
                    OptimizerKind::SgdMomentum => {
                        for ((p, &gv), mv) in param.iter_mut().zip(g).zip(m.iter_mut()) {
                            *mv = MOMENTUM * *mv + gv;
                            *p -= self.lr * *mv;
                        }
                    }
                    OptimizerKind::Adam => {
                        let v = &mut self.second[li][pi];
                        for (((p, &gv), mv), vv) in
                            param.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                        {
                            *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                            *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                            let mhat = *mv / bc1;
                            let vhat = *vv / bc2;
                            *p -= self.lr * mhat / (vhat.sqrt() + EPS);
                        }
                    }
                }
            }
        }
    }
}
