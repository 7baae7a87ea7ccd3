//! Layer kinds, their forward and backward passes, and FLOPs accounting.
//!
//! All shapes handled here are per-sample shapes unless a `Tensor` is
//! involved, in which case dimension 0 is the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    #[serde(rename = "dense")]
    Dense {
        in_features: usize,
        out_features: usize,
    },
    #[serde(rename = "conv2d")]
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d { kernel: usize, stride: usize },
    #[serde(rename = "flatten")]
    Flatten,
    #[serde(rename = "global-average-pool")]
    GlobalAvgPool,
    #[serde(rename = "softmax")]
    Softmax,
    #[serde(rename = "log-softmax")]
    LogSoftmax,
    /// Batch normalization folded into a per-channel affine map.
    #[serde(rename = "batchnorm-frozen")]
    BatchNormFrozen { channels: usize },
    /// Identity at inference time.
    #[serde(rename = "dropout")]
    Dropout { rate: f32 },
    /// Element-wise sum of two or more inputs of equal shape.
    #[serde(rename = "add")]
    Add,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::GlobalAvgPool => "global-average-pool",
            LayerSpec::Softmax => "softmax",
            LayerSpec::LogSoftmax => "log-softmax",
            LayerSpec::BatchNormFrozen { .. } => "batchnorm-frozen",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Add => "add",
        }
    }

    /// False for layers that do not transform values at inference time.
    pub fn inference_active(&self) -> bool {
        !matches!(
            self,
            LayerSpec::Dropout { .. } | LayerSpec::BatchNormFrozen { .. }
        )
    }

    /// Only dense and convolution parameters are updated by training.
    pub fn trainable(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            LayerSpec::BatchNormFrozen { channels } => vec![vec![channels], vec![channels]],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{}: {what}", self.kind_name())));
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } if in_features == 0 || out_features == 0 => bad("features must be positive"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 => {
                bad("channels, kernel and stride must be positive")
            }
            LayerSpec::MaxPool2d { kernel, stride } if kernel == 0 || stride == 0 => {
                bad("kernel and stride must be positive")
            }
            LayerSpec::BatchNormFrozen { channels: 0 } => {
                bad("channels must be positive")
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                bad("rate must lie in [0, 1)")
            }
            _ => Ok(()),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let name = self.kind_name();
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if input != [in_features] {
                    return Err(Error::shape(name, &[in_features], input));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (c, h, w) = chw(name, input)?;
                if c != in_channels || h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(Error::shape(name, &[in_channels, kernel, kernel], input));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                let (c, h, w) = chw(name, input)?;
                if h < kernel || w < kernel {
                    return Err(Error::shape(name, &[c, kernel, kernel], input));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::GlobalAvgPool => {
                let (c, _, _) = chw(name, input)?;
                Ok(vec![c])
            }
            LayerSpec::Softmax | LayerSpec::LogSoftmax => {
                if input.len() != 1 {
                    return Err(Error::shape(name, &[0], input));
                }
                Ok(input.to_vec())
            }
            LayerSpec::BatchNormFrozen { channels } => {
                if input.first() != Some(&channels) || !(input.len() == 1 || input.len() == 3) {
                    return Err(Error::shape(name, &[channels], input));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::Add => Ok(input.to_vec()),
        }
    }

    /// FLOPs for one sample; one multiply-accumulate counts as two.
    ///
    /// `Add` is counted as a single binary sum; callers with more operands
    /// scale it by `operands - 1`.
    pub fn flops(&self, input: &[usize]) -> u64 {
        let elems = input.iter().product::<usize>() as u64;
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => 2 * (in_features * out_features) as u64,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let out = self.output_shape(input).unwrap_or_default();
                let spatial: usize = out.iter().skip(1).product();
                2 * (kernel * kernel * in_channels * out_channels * spatial) as u64
            }
            LayerSpec::MaxPool2d { kernel, .. } => {
                let out = self.output_shape(input).unwrap_or_default();
                out.iter().product::<usize>() as u64 * (kernel * kernel) as u64
            }
            LayerSpec::Softmax | LayerSpec::LogSoftmax => 5 * elems,
            LayerSpec::Relu
            | LayerSpec::GlobalAvgPool
            | LayerSpec::BatchNormFrozen { .. }
            | LayerSpec::Add => elems,
            LayerSpec::Flatten | LayerSpec::Dropout { .. } => 0,
        }
    }
}

fn chw(name: &str, input: &[usize]) -> Result<(usize, usize, usize)> {
    match *input {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(name, &[0, 0, 0], input)),
    }
}

/// A layer specification together with its parameters.
///
/// Parameters follow [`LayerSpec::param_shapes`]: weight then bias for dense
/// and convolution layers, scale then shift for frozen batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Vec<f32>>,
}

impl Layer {
    pub fn new(spec: LayerSpec, params: Vec<Vec<f32>>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Config(format!(
                "{} expects {} parameter tensors, got {}",
                spec.kind_name(),
                shapes.len(),
                params.len()
            )));
        }
        for (shape, p) in shapes.iter().zip(&params) {
            let n: usize = shape.iter().product();
            if n != p.len() {
                return Err(Error::shape(spec.kind_name(), shape, &[p.len()]));
            }
        }
        Ok(Self { spec, params })
    }

    /// Parameter-free layer.
    pub fn op(spec: LayerSpec) -> Self {
        debug_assert!(spec.param_shapes().is_empty());
        Self {
            spec,
            params: Vec::new(),
        }
    }

    /// Kaiming-uniform weights, small uniform bias, identity batch norm.
    pub fn init(spec: LayerSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let params = match spec {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => kaiming(rng, in_features, out_features * in_features, out_features),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                kaiming(rng, fan_in, out_channels * fan_in, out_channels)
            }
            LayerSpec::BatchNormFrozen { channels } => {
                vec![vec![1.0; channels], vec![0.0; channels]]
            }
            _ => Vec::new(),
        };
        Ok(Self { spec, params })
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_inputs(&[input])
    }

    pub fn forward_inputs(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let name = self.spec.kind_name();
        let input = match (&self.spec, inputs) {
            (LayerSpec::Add, [first, rest @ ..]) if !rest.is_empty() => {
                let mut out = (*first).clone();
                for t in rest {
                    if t.shape() != first.shape() {
                        return Err(Error::shape(name, first.shape(), t.shape()));
                    }
                    for (o, v) in out.data_mut().iter_mut().zip(t.data()) {
                        *o += v;
                    }
                }
                return Ok(out);
            }
            (LayerSpec::Add, _) => {
                return Err(Error::InvalidGraph("add needs at least two inputs".into()))
            }
            (_, [single]) => *single,
            _ => {
                return Err(Error::InvalidGraph(format!(
                    "{name} takes exactly one input, got {}",
                    inputs.len()
                )))
            }
        };
        let out_sample = self.spec.output_shape(input.sample_shape())?;
        let batch = input.batch_size();
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(&out_sample);
        let x = input.data();
        let data = match self.spec {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let (w, b) = (&self.params[0], &self.params[1]);
                let mut out = vec![0.0f32; batch * out_features];
                for (xr, yr) in x
                    .chunks_exact(in_features)
                    .zip(out.chunks_exact_mut(out_features))
                {
                    for (o, y) in yr.iter_mut().enumerate() {
                        let wr = &w[o * in_features..(o + 1) * in_features];
                        *y = b[o] + dot(wr, xr);
                    }
                }
                out
            }
            LayerSpec::Conv2d { .. } => self.conv_forward(input, &out_sample),
            LayerSpec::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            LayerSpec::MaxPool2d { kernel, stride } => {
                let (c, h, w) = chw(name, input.sample_shape())?;
                let (oh, ow) = (out_sample[1], out_sample[2]);
                let mut out = Vec::with_capacity(batch * c * oh * ow);
                for plane in x.chunks_exact(h * w) {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let (_, v) = window_max(plane, w, oy * stride, ox * stride, kernel);
                            out.push(v);
                        }
                    }
                }
                out
            }
            LayerSpec::Flatten | LayerSpec::Dropout { .. } => x.to_vec(),
            LayerSpec::GlobalAvgPool => {
                let (_, h, w) = chw(name, input.sample_shape())?;
                let area = (h * w) as f32;
                x.chunks_exact(h * w)
                    .map(|plane| plane.iter().sum::<f32>() / area)
                    .collect()
            }
            LayerSpec::Softmax => {
                let n = out_sample[0];
                let mut out = x.to_vec();
                out.chunks_exact_mut(n).for_each(softmax_in_place);
                out
            }
            LayerSpec::LogSoftmax => {
                let n = out_sample[0];
                let mut out = x.to_vec();
                out.chunks_exact_mut(n).for_each(log_softmax_in_place);
                out
            }
            LayerSpec::BatchNormFrozen { channels } => {
                let (scale, shift) = (&self.params[0], &self.params[1]);
                let per_channel = input.row_len() / channels;
                x.chunks_exact(per_channel)
                    .enumerate()
                    .flat_map(|(i, chunk)| {
                        let c = i % channels;
                        chunk.iter().map(move |&v| v * scale[c] + shift[c])
                    })
                    .collect()
            }
            LayerSpec::Add => unreachable!(),
        };
        Tensor::new(out_shape, data)
    }

    fn conv_forward(&self, input: &Tensor, out_sample: &[usize]) -> Vec<f32> {
        let LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } = self.spec
        else {
            unreachable!()
        };
        let (h, w) = (input.sample_shape()[1], input.sample_shape()[2]);
        let (oh, ow) = (out_sample[1], out_sample[2]);
        let (weights, bias) = (&self.params[0], &self.params[1]);
        let batch = input.batch_size();
        let mut out = vec![0.0f32; batch * out_channels * oh * ow];
        let geo = ConvGeometry {
            h,
            w,
            oh,
            ow,
            kernel,
            stride,
            padding,
        };
        for (xs, ys) in input
            .data()
            .chunks_exact(in_channels * h * w)
            .zip(out.chunks_exact_mut(out_channels * oh * ow))
        {
            for (oc, yplane) in ys.chunks_exact_mut(oh * ow).enumerate() {
                yplane.fill(bias[oc]);
                for (ic, xplane) in xs.chunks_exact(h * w).enumerate() {
                    let wk = &weights[(oc * in_channels + ic) * kernel * kernel..][..kernel * kernel];
                    geo.for_each_tap(|ky, kx, oy, ox_range, ix0| {
                        let wv = wk[ky * kernel + kx];
                        let iy = oy * stride + ky - padding;
                        let xrow = &xplane[iy * w..(iy + 1) * w];
                        let yrow = &mut yplane[oy * ow..(oy + 1) * ow];
                        for (j, ox) in ox_range.enumerate() {
                            yrow[ox] += wv * xrow[ix0 + j * stride];
                        }
                    });
                }
            }
        }
        out
    }

    /// Backward pass given the forward input, forward output and the loss
    /// gradient with respect to the output.
    ///
    /// Returns the gradient with respect to the input and one gradient per
    /// parameter tensor. Not defined for `Add`.
    pub fn backward(
        &self,
        input: &Tensor,
        output: &Tensor,
        grad_out: &Tensor,
    ) -> Result<(Tensor, Vec<Vec<f32>>)> {
        if grad_out.shape() != output.shape() {
            return Err(Error::shape(
                self.spec.kind_name(),
                output.shape(),
                grad_out.shape(),
            ));
        }
        let x = input.data();
        let g = grad_out.data();
        let batch = input.batch_size();
        let mut grad_in = vec![0.0f32; x.len()];
        let mut grad_params: Vec<Vec<f32>> =
            self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        match self.spec {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let w = &self.params[0];
                let (gw, gb) = split_two(&mut grad_params);
                for b in 0..batch {
                    let xr = &x[b * in_features..(b + 1) * in_features];
                    let gr = &g[b * out_features..(b + 1) * out_features];
                    let gi = &mut grad_in[b * in_features..(b + 1) * in_features];
                    for (o, &go) in gr.iter().enumerate() {
                        gb[o] += go;
                        let wr = &w[o * in_features..(o + 1) * in_features];
                        let gwr = &mut gw[o * in_features..(o + 1) * in_features];
                        for i in 0..in_features {
                            gi[i] += go * wr[i];
                            gwr[i] += go * xr[i];
                        }
                    }
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (h, w) = (input.sample_shape()[1], input.sample_shape()[2]);
                let (oh, ow) = (output.sample_shape()[1], output.sample_shape()[2]);
                let weights = &self.params[0];
                let (gw, gb) = split_two(&mut grad_params);
                let geo = ConvGeometry {
                    h,
                    w,
                    oh,
                    ow,
                    kernel,
                    stride,
                    padding,
                };
                for b in 0..batch {
                    let xs = &x[b * in_channels * h * w..][..in_channels * h * w];
                    let gs = &g[b * out_channels * oh * ow..][..out_channels * oh * ow];
                    let gis = &mut grad_in[b * in_channels * h * w..][..in_channels * h * w];
                    for oc in 0..out_channels {
                        let gplane = &gs[oc * oh * ow..(oc + 1) * oh * ow];
                        gb[oc] += gplane.iter().sum::<f32>();
                        for ic in 0..in_channels {
                            let base = (oc * in_channels + ic) * kernel * kernel;
                            let xplane = &xs[ic * h * w..(ic + 1) * h * w];
                            let giplane = &mut gis[ic * h * w..(ic + 1) * h * w];
                            geo.for_each_tap(|ky, kx, oy, ox_range, ix0| {
                                let k = base + ky * kernel + kx;
                                let wv = weights[k];
                                let iy = oy * stride + ky - padding;
                                let mut acc = 0.0f32;
                                for (j, ox) in ox_range.enumerate() {
                                    let ix = iy * w + ix0 + j * stride;
                                    let go = gplane[oy * ow + ox];
                                    acc += go * xplane[ix];
                                    giplane[ix] += go * wv;
                                }
                                gw[k] += acc;
                            });
                        }
                    }
                }
            }
            LayerSpec::Relu => {
                for ((gi, &xv), &gv) in grad_in.iter_mut().zip(x).zip(g) {
                    *gi = if xv > 0.0 { gv } else { 0.0 };
                }
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                let (_, h, w) = chw("maxpool2d", input.sample_shape())?;
                let (oh, ow) = (output.sample_shape()[1], output.sample_shape()[2]);
                for (p, (plane, gplane)) in x
                    .chunks_exact(h * w)
                    .zip(g.chunks_exact(oh * ow))
                    .enumerate()
                {
                    let gi = &mut grad_in[p * h * w..(p + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let (idx, _) = window_max(plane, w, oy * stride, ox * stride, kernel);
                            gi[idx] += gplane[oy * ow + ox];
                        }
                    }
                }
            }
            LayerSpec::Flatten | LayerSpec::Dropout { .. } => grad_in.copy_from_slice(g),
            LayerSpec::GlobalAvgPool => {
                let (_, h, w) = chw("global-average-pool", input.sample_shape())?;
                let area = (h * w) as f32;
                for (gi, &gv) in grad_in.chunks_exact_mut(h * w).zip(g) {
                    gi.fill(gv / area);
                }
            }
            LayerSpec::Softmax => {
                let n = output.row_len();
                for ((gi, y), gr) in grad_in
                    .chunks_exact_mut(n)
                    .zip(output.data().chunks_exact(n))
                    .zip(g.chunks_exact(n))
                {
                    let s: f32 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        gi[i] = y[i] * (gr[i] - s);
                    }
                }
            }
            LayerSpec::LogSoftmax => {
                let n = output.row_len();
                for ((gi, y), gr) in grad_in
                    .chunks_exact_mut(n)
                    .zip(output.data().chunks_exact(n))
                    .zip(g.chunks_exact(n))
                {
                    let s: f32 = gr.iter().sum();
                    for i in 0..n {
                        gi[i] = gr[i] - y[i].exp() * s;
                    }
                }
            }
            LayerSpec::BatchNormFrozen { channels } => {
                let scale = &self.params[0];
                let per_channel = input.row_len() / channels;
                let (gs, gsh) = split_two(&mut grad_params);
                for (i, ((gi, gr), xr)) in grad_in
                    .chunks_exact_mut(per_channel)
                    .zip(g.chunks_exact(per_channel))
                    .zip(x.chunks_exact(per_channel))
                    .enumerate()
                {
                    let c = i % channels;
                    for j in 0..per_channel {
                        gi[j] = gr[j] * scale[c];
                        gs[c] += gr[j] * xr[j];
                        gsh[c] += gr[j];
                    }
                }
            }
            LayerSpec::Add => {
                return Err(Error::InvalidGraph(
                    "add has no single-input backward".into(),
                ))
            }
        }
        Ok((Tensor::new(input.shape().to_vec(), grad_in)?, grad_params))
    }
}

fn kaiming(rng: &mut impl Rng, fan_in: usize, weights: usize, biases: usize) -> Vec<Vec<f32>> {
    let bound = (6.0 / fan_in as f32).sqrt();
    let bias_bound = 1.0 / (fan_in as f32).sqrt();
    let w = (0..weights).map(|_| rng.gen_range(-bound..bound)).collect();
    let b = (0..biases)
        .map(|_| rng.gen_range(-bias_bound..bias_bound))
        .collect();
    vec![w, b]
}

fn split_two(params: &mut [Vec<f32>]) -> (&mut [f32], &mut [f32]) {
    let (a, b) = params.split_at_mut(1);
    (&mut a[0], &mut b[0])
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Position and value of the first maximum in a `kernel`×`kernel` window.
fn window_max(plane: &[f32], w: usize, y0: usize, x0: usize, kernel: usize) -> (usize, f32) {
    let mut best = (y0 * w + x0, plane[y0 * w + x0]);
    for y in y0..y0 + kernel {
        for x in x0..x0 + kernel {
            let v = plane[y * w + x];
            if v > best.1 {
                best = (y * w + x, v);
            }
        }
    }
    best
}

struct ConvGeometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    /// Visits every kernel tap and output row that reads inside the input,
    /// passing the range of valid output columns and the first input column.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, std::ops::Range<usize>, usize)) {
        let (s, p) = (self.stride, self.padding);
        for ky in 0..self.kernel {
            for kx in 0..self.kernel {
                // ix = ox*s + kx - p must lie in [0, w)
                let ox_lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
                let ox_hi = if self.w + p > kx {
                    ((self.w + p - kx - 1) / s + 1).min(self.ow)
                } else {
                    0
                };
                if ox_lo >= ox_hi {
                    continue;
                }
                let ix0 = ox_lo * s + kx - p;
                for oy in 0..self.oh {
                    let iy = oy * s + ky;
                    if iy < p || iy - p >= self.h {
                        continue;
                    }
                    f(ky, kx, oy, ox_lo..ox_hi, ix0);
                }
            }
        }
    }
}

pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f32>().ln() + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Free-function form of [`LayerSpec::flops`].
pub fn layer_flops(spec: &LayerSpec, input_shape: &[usize]) -> u64 {
    spec.flops(input_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = Layer::op(LayerSpec::Relu)
            .forward(&t(&[1, 3], &[-1.0, 0.0, 2.0]))
            .unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let y = Layer::op(LayerSpec::Softmax)
            .forward(&t(&[1, 2], &[0.0, 0.0]))
            .unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let y = Layer::op(LayerSpec::Softmax)
            .forward(&t(&[1, 3], &[1000.0, 999.0, -1000.0]))
            .unwrap();
        assert!(y.is_finite());
        assert!((y.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identity_dense_is_identity() {
        let spec = LayerSpec::Dense {
            in_features: 3,
            out_features: 3,
        };
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let layer = Layer::new(spec, vec![w, vec![0.0; 3]]).unwrap();
        let x = t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 0.0, -7.0]);
        assert_eq!(layer.forward(&x).unwrap(), x);
    }

    #[test]
    fn shape_mismatch_names_layer_and_shapes() {
        let layer = Layer::init(
            LayerSpec::Dense {
                in_features: 4,
                out_features: 2,
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let err = layer.forward(&t(&[1, 3], &[0.0; 3])).unwrap_err();
        match err {
            Error::ShapeMismatch {
                layer,
                expected,
                actual,
            } => {
                assert_eq!(layer, "dense");
                assert_eq!(expected, vec![4]);
                assert_eq!(actual, vec![3]);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let spec = LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let layer = Layer::init(spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f32> = (0..2 * 2 * 5 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = t(&[2, 2, 5, 6], &x);
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
        let (wt, bias) = (&layer.params[0], &layer.params[1]);
        for b in 0..2 {
            for oc in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = bias[oc] as f64;
                        for ic in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((b * 2 + ic) * 5 + iy as usize) * 6 + ix as usize];
                                    acc += (wt[((oc * 2 + ic) * 3 + ky) * 3 + kx] * xv) as f64;
                                }
                            }
                        }
                        let got = y.data()[((b * 3 + oc) * 3 + oy) * 3 + ox];
                        assert!((got as f64 - acc).abs() < 1e-5, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_and_gap() {
        let x = t(&[1, 1, 2, 4], &[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0]);
        let y = Layer::op(LayerSpec::MaxPool2d {
            kernel: 2,
            stride: 2,
        })
        .forward(&x)
        .unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
        let g = Layer::op(LayerSpec::GlobalAvgPool).forward(&x).unwrap();
        assert_eq!(g.shape(), &[1, 1]);
        assert_eq!(g.data(), &[3.5]);
    }

    #[test]
    fn flops_rules() {
        let dense = LayerSpec::Dense {
            in_features: 128,
            out_features: 10,
        };
        assert_eq!(layer_flops(&dense, &[128]), 2560);
        assert_eq!(layer_flops(&LayerSpec::Relu, &[1000]), 1000);
        let conv = LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 16,
            kernel: 3,
            stride: 1,
            padding: 0,
        };
        assert_eq!(layer_flops(&conv, &[3, 32, 32]), 777_600);
        assert_eq!(layer_flops(&LayerSpec::Softmax, &[10]), 50);
        assert_eq!(layer_flops(&LayerSpec::Flatten, &[4, 4]), 0);
    }

    #[test]
    fn batchnorm_is_affine_per_channel() {
        let layer = Layer::new(
            LayerSpec::BatchNormFrozen { channels: 2 },
            vec![vec![2.0, -1.0], vec![0.5, 1.0]],
        )
        .unwrap();
        let y = layer
            .forward(&t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, -2.0, -3.0]);
        assert!(!layer.spec.inference_active());
    }

    #[test]
    fn add_sums_inputs() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[1, 2], &[10.0, 20.0]);
        let y = Layer::op(LayerSpec::Add).forward_inputs(&[&a, &b]).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0]);
        assert!(Layer::op(LayerSpec::Add).forward(&a).is_err());
    }
}
