//! Input sample sets, optionally labeled.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LCSMPL01";

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub ids: Vec<String>,
    pub inputs: Tensor,
    /// Ground-truth classes; only evaluation reads these.
    pub labels: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    ids: Vec<String>,
    labels: Option<Vec<usize>>,
}

impl SampleSet {
    pub fn new(ids: Vec<String>, inputs: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        if ids.len() != inputs.batch_size() {
            return Err(Error::InvalidTensor(format!(
                "{} ids for {} samples",
                ids.len(),
                inputs.batch_size()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != ids.len() {
                return Err(Error::LabelMismatch {
                    labels: l.len(),
                    samples: ids.len(),
                });
            }
        }
        Ok(Self { ids, inputs, labels })
    }

    /// Ids `s000000`, `s000001`, ... for callers without their own.
    pub fn sequential_ids(count: usize) -> Vec<String> {
        (0..count).map(|i| format!("s{i:06}")).collect()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The samples at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> SampleSet {
        SampleSet {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            inputs: self.inputs.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            input_shape: self.inputs.sample_shape().to_vec(),
            ids: self.ids.clone(),
            labels: self.labels.clone(),
        };
        blob::write(path, MAGIC, &header, self.inputs.data())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, data): (Header, _) = blob::read(path, MAGIC, |h: &Header| {
            h.ids.len() * h.input_shape.iter().product::<usize>()
        })?;
        let mut shape = vec![header.ids.len()];
        shape.extend_from_slice(&header.input_shape);
        SampleSet::new(header.ids, Tensor::new(shape, data)?, header.labels)
    }
}
