use crate::error::{Error, Result};
use crate::layers::{Layer, LayerSpec};
use crate::tensor::Tensor;

/// A chain of layers evaluated in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().map(|l| &l.spec)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_range(input, self.layers.len())
    }

    /// Runs the first `count` layers only.
    pub fn forward_range(&self, input: &Tensor, count: usize) -> Result<Tensor> {
        let mut x = input.clone();
        for (i, layer) in self.layers[..count].iter().enumerate() {
            x = layer.forward(&x).map_err(|e| rename_layer(e, i, layer))?;
        }
        Ok(x)
    }

    /// Forward pass keeping every intermediate activation; element 0 is the input.
    pub fn forward_trace(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .forward(acts.last().unwrap())
                .map_err(|e| rename_layer(e, i, layer))?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// Backpropagates `grad_out` through the trace produced by
    /// [`Sequential::forward_trace`], returning per-layer parameter gradients.
    pub fn backward(&self, trace: &[Tensor], grad_out: Tensor) -> Result<Vec<Vec<Vec<f32>>>> {
        let mut grads = vec![Vec::new(); self.layers.len()];
        let mut g = grad_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (gi, gp) = layer.backward(&trace[i], &trace[i + 1], &g)?;
            grads[i] = gp;
            g = gi;
        }
        Ok(grads)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for layer in &self.layers {
            shape = layer.spec.output_shape(&shape)?;
        }
        Ok(shape)
    }

    /// Per-sample FLOPs of the whole chain.
    pub fn flops(&self, input: &[usize]) -> Result<u64> {
        let mut shape = input.to_vec();
        let mut total = 0;
        for layer in &self.layers {
            total += layer.spec.flops(&shape);
            shape = layer.spec.output_shape(&shape)?;
        }
        Ok(total)
    }

    /// Little-endian bytes of every parameter, in layer order.
    pub fn weight_bytes(&self) -> Vec<u8> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().flatten())
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }
}

fn rename_layer(err: Error, index: usize, layer: &Layer) -> Error {
    match err {
        Error::ShapeMismatch {
            expected, actual, ..
        } => Error::ShapeMismatch {
            layer: format!("{}#{index}", layer.spec.kind_name()),
            expected,
            actual,
        },
        other => other,
    }
}
