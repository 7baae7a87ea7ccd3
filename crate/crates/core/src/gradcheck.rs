//! Central finite-difference checks of analytic gradients.
//!
//! A layer is reduced to the scalar `sum(w * forward(x))` for a fixed random
//! `w`; every input and parameter coordinate is perturbed by `±h`. Errors are
//! reported norm-wise: `|analytic - numeric| / max(|analytic|, |numeric|)`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::layers::{log_softmax_in_place, Layer, LayerSpec};
use crate::loss::kl_div_loss;
use crate::tensor::Tensor;

pub const STEP: f32 = 1e-3;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-9 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Distinct values away from zero, so ReLU kinks and pooling ties sit far
/// from any perturbation.
pub fn spread_values(n: usize, rng: &mut impl Rng) -> Vec<f32> {
    let step = 2.0 / n.max(1) as f32;
    let mut v: Vec<f32> = (0..n).map(|i| -1.0 + (i as f32 + 0.25) * step).collect();
    v.shuffle(rng);
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub spec: LayerSpec,
    pub input_shape: Vec<usize>,
    pub input_error: f64,
    /// One entry per parameter tensor.
    pub param_errors: Vec<f64>,
}

impl LayerCheck {
    pub fn max_error(&self) -> f64 {
        self.param_errors.iter().copied().fold(self.input_error, f64::max)
    }
}

fn projected(layer: &Layer, x: &Tensor, w: &[f32]) -> Result<f64> {
    let out = layer.forward(x)?;
    Ok(out.data().iter().zip(w).map(|(&o, &w)| o as f64 * w as f64).sum())
}

/// Checks input and parameter gradients of one layer on a random batch.
pub fn check_layer(spec: LayerSpec, input_shape: &[usize], rng: &mut impl Rng) -> Result<LayerCheck> {
    let mut layer = Layer::init(spec.clone(), rng)?;
    if let LayerSpec::BatchNormFrozen { .. } = spec {
        for v in layer.params.iter_mut().flatten() {
            *v = rng.gen_range(0.5..1.5);
        }
    }
    let x = Tensor::new(
        input_shape.to_vec(),
        spread_values(input_shape.iter().product(), rng),
    )?;
    let out = layer.forward(&x)?;
    let w: Vec<f32> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (grad_in, grad_params) = layer.backward(&x, &out, &Tensor::new(out.shape().to_vec(), w.clone())?)?;

    let mut numeric = Vec::with_capacity(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + STEP;
        let up = projected(&layer, &xp, &w)?;
        xp.data_mut()[i] = orig - STEP;
        let down = projected(&layer, &xp, &w)?;
        xp.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * STEP as f64));
    }
    let analytic: Vec<f64> = grad_in.data().iter().map(|&v| v as f64).collect();
    let input_error = relative_error(&analytic, &numeric);

    let mut param_errors = Vec::new();
    for (p, grads) in grad_params.iter().enumerate() {
        let mut numeric = Vec::with_capacity(layer.params[p].len());
        for i in 0..layer.params[p].len() {
            let orig = layer.params[p][i];
            layer.params[p][i] = orig + STEP;
            let up = projected(&layer, &x, &w)?;
            layer.params[p][i] = orig - STEP;
            let down = projected(&layer, &x, &w)?;
            layer.params[p][i] = orig;
            numeric.push((up - down) / (2.0 * STEP as f64));
        }
        let analytic: Vec<f64> = grads.iter().map(|&v| v as f64).collect();
        param_errors.push(relative_error(&analytic, &numeric));
    }
    Ok(LayerCheck {
        spec,
        input_shape: input_shape.to_vec(),
        input_error,
        param_errors,
    })
}

/// Errors of the loss gradients with respect to the student logits and to
/// the student log-probabilities.
pub fn check_kl(batch: usize, classes: usize, rng: &mut impl Rng) -> Result<(f64, f64)> {
    let logits: Vec<f32> = (0..batch * classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut teacher: Vec<f32> = (0..batch * classes).map(|_| rng.gen_range(0.05..1.0)).collect();
    for row in teacher.chunks_mut(classes) {
        let s: f32 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let teacher = Tensor::new(vec![batch, classes], teacher)?;
    let log_pd = |z: &[f32]| -> Result<Tensor> {
        let mut d = z.to_vec();
        d.chunks_mut(classes).for_each(log_softmax_in_place);
        Tensor::new(vec![batch, classes], d)
    };
    let base = kl_div_loss(&log_pd(&logits)?, &teacher)?;

    let mut z = logits.clone();
    let mut numeric_logits = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let orig = z[i];
        z[i] = orig + STEP;
        let up = kl_div_loss(&log_pd(&z)?, &teacher)?.value as f64;
        z[i] = orig - STEP;
        let down = kl_div_loss(&log_pd(&z)?, &teacher)?.value as f64;
        z[i] = orig;
        numeric_logits.push((up - down) / (2.0 * STEP as f64));
    }
    let analytic: Vec<f64> = base.grad_logits.data().iter().map(|&v| v as f64).collect();
    let logits_error = relative_error(&analytic, &numeric_logits);

    let mut s = log_pd(&logits)?;
    let mut numeric_log = Vec::with_capacity(s.len());
    for i in 0..s.len() {
        let orig = s.data()[i];
        s.data_mut()[i] = orig + STEP;
        let up = kl_div_loss(&s, &teacher)?.value as f64;
        s.data_mut()[i] = orig - STEP;
        let down = kl_div_loss(&s, &teacher)?.value as f64;
        s.data_mut()[i] = orig;
        numeric_log.push((up - down) / (2.0 * STEP as f64));
    }
    let analytic: Vec<f64> = base.grad_log_pd.data().iter().map(|&v| v as f64).collect();
    Ok((logits_error, relative_error(&analytic, &numeric_log)))
}

/// A random layer with every dimension at most 64, and a batched input
/// shape for it. Cycles through the differentiable kinds by `index`.
pub fn random_case(index: usize, rng: &mut impl Rng) -> (LayerSpec, Vec<usize>) {
    let batch = rng.gen_range(1..=3);
    let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(3..=6), rng.gen_range(3..=6));
    let spatial = vec![batch, c, h, w];
    match index % 9 {
        0 => {
            let (i, o) = (rng.gen_range(1..=64), rng.gen_range(1..=16));
            (LayerSpec::Dense { in_features: i, out_features: o }, vec![batch, i])
        }
        1 => {
            let kernel = *[1, 3].choose(rng).unwrap();
            (
                LayerSpec::Conv2d {
                    in_channels: c,
                    out_channels: rng.gen_range(1..=4),
                    kernel,
                    stride: rng.gen_range(1..=2),
                    padding: rng.gen_range(0..=kernel / 2),
                },
                spatial,
            )
        }
        2 => (LayerSpec::Relu, vec![batch, rng.gen_range(1..=64)]),
        3 => (LayerSpec::MaxPool2d { kernel: 2, stride: rng.gen_range(1..=2) }, spatial),
        4 => (LayerSpec::GlobalAvgPool, spatial),
        5 => (LayerSpec::Softmax, vec![batch, rng.gen_range(2..=16)]),
        6 => (LayerSpec::LogSoftmax, vec![batch, rng.gen_range(2..=16)]),
        7 => (LayerSpec::BatchNormFrozen { channels: c }, spatial),
        _ => (LayerSpec::Flatten, spatial),
    }
}
