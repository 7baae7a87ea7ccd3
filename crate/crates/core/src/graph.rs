//! The pre-trained backbone as a DAG of layers.
//!
//! A backbone is stored as a TOML manifest describing nodes and edges, plus
//! one raw little-endian `f32` blob per parameterized node (`<name>.bin`,
//! parameters concatenated in [`LayerSpec::param_shapes`] order, row-major).
//! The content hash is SHA-256 over all blobs concatenated in topological
//! order.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerSpec};
use crate::tensor::Tensor;

pub const MANIFEST_FORMAT: &str = "layercache-backbone/1";

#[derive(Debug, Clone, PartialEq)]
pub enum NodeOp {
    Input { shape: Vec<usize> },
    Layer(Layer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: NodeOp,
    /// Marks the output of a first-level component (a block boundary).
    pub block_output: bool,
    pub inputs: Vec<usize>,
}

impl Node {
    pub fn layer(&self) -> Option<&Layer> {
        match &self.op {
            NodeOp::Layer(l) => Some(l),
            NodeOp::Input { .. } => None,
        }
    }
}

/// Immutable, validated backbone.
#[derive(Debug, Clone)]
pub struct BackboneGraph {
    nodes: Vec<Node>,
    consumers: Vec<Vec<usize>>,
    order: Vec<usize>,
    input: usize,
    output: usize,
    num_classes: usize,
    shapes: Vec<Vec<usize>>,
    flops: Vec<u64>,
    hash: String,
}

/// A layer whose activations can feed a cache model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateLayer {
    pub name: String,
    pub tap_shape: Vec<usize>,
    /// FLOPs of every node needed to produce this layer, itself included.
    pub cumulative_flops: u64,
    /// FLOPs of the backbone after this layer (C₂).
    pub fallback_flops: u64,
    /// 1-based position among the candidates, by topological order.
    pub ordinal: usize,
}

impl BackboneGraph {
    pub fn new(
        nodes: Vec<Node>,
        output: &str,
        num_classes: usize,
    ) -> Result<Self> {
        let n = nodes.len();
        let mut seen = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if node.name.is_empty()
                || !node
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c))
            {
                return Err(Error::InvalidGraph(format!(
                    "node name `{}` must be non-empty and use [A-Za-z0-9_.-]",
                    node.name
                )));
            }
            if seen.insert(node.name.clone(), i).is_some() {
                return Err(Error::InvalidGraph(format!(
                    "duplicate node `{}`",
                    node.name
                )));
            }
            if node.inputs.iter().any(|&j| j >= n) {
                return Err(Error::InvalidGraph(format!(
                    "node `{}` has a dangling input",
                    node.name
                )));
            }
        }
        let output = *seen
            .get(output)
            .ok_or_else(|| Error::UnknownNode(output.to_string()))?;

        let mut consumers = vec![Vec::new(); n];
        for (i, node) in nodes.iter().enumerate() {
            for &j in &node.inputs {
                consumers[j].push(i);
            }
        }
        let order = topological_order(&nodes, &consumers)?;

        let inputs: Vec<usize> = (0..n)
            .filter(|&i| matches!(nodes[i].op, NodeOp::Input { .. }))
            .collect();
        let input = match inputs[..] {
            [i] => i,
            _ => {
                return Err(Error::InvalidGraph(format!(
                    "expected exactly one input node, found {}",
                    inputs.len()
                )))
            }
        };
        for (i, node) in nodes.iter().enumerate() {
            let arity_ok = match &node.op {
                NodeOp::Input { .. } => node.inputs.is_empty(),
                NodeOp::Layer(l) if l.spec == LayerSpec::Add => node.inputs.len() >= 2,
                NodeOp::Layer(_) => node.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::InvalidGraph(format!(
                    "node `{}` has {} inputs",
                    node.name,
                    nodes[i].inputs.len()
                )));
            }
        }
        match nodes[output].layer().map(|l| &l.spec) {
            Some(LayerSpec::Softmax | LayerSpec::LogSoftmax) => {}
            _ => {
                return Err(Error::InvalidGraph(format!(
                    "output node `{}` must be softmax or log-softmax",
                    nodes[output].name
                )))
            }
        }
        if !consumers[output].is_empty() {
            return Err(Error::InvalidGraph("output node has consumers".into()));
        }
        let from_input = reachable(input, &consumers, None);
        let predecessors: Vec<Vec<usize>> = nodes.iter().map(|n| n.inputs.clone()).collect();
        let to_output = reachable(output, &predecessors, None);
        if let Some(i) = (0..n).find(|&i| !from_input[i] || !to_output[i]) {
            return Err(Error::InvalidGraph(format!(
                "node `{}` is not on an input-to-output path",
                nodes[i].name
            )));
        }

        let mut shapes = vec![Vec::new(); n];
        let mut flops = vec![0u64; n];
        for &i in &order {
            let node = &nodes[i];
            match &node.op {
                NodeOp::Input { shape } => {
                    if shape.is_empty() || shape.contains(&0) {
                        return Err(Error::InvalidGraph("input shape must be positive".into()));
                    }
                    shapes[i] = shape.clone();
                }
                NodeOp::Layer(layer) => {
                    let first = shapes[node.inputs[0]].clone();
                    for &j in &node.inputs[1..] {
                        if shapes[j] != first {
                            return Err(Error::shape(&node.name, &first, &shapes[j]));
                        }
                    }
                    shapes[i] = layer
                        .spec
                        .output_shape(&first)
                        .map_err(|e| with_node(e, &node.name))?;
                    flops[i] = layer.spec.flops(&first) * (node.inputs.len().max(2) as u64 - 1);
                }
            }
        }
        if shapes[output] != [num_classes] {
            return Err(Error::shape(
                &nodes[output].name,
                &[num_classes],
                &shapes[output],
            ));
        }

        let mut hasher = Sha256::new();
        for &i in &order {
            if let Some(layer) = nodes[i].layer() {
                for v in layer.params.iter().flatten() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        let hash = hex::encode(hasher.finalize());

        Ok(Self {
            nodes,
            consumers,
            order,
            input,
            output,
            num_classes,
            shapes,
            flops,
            hash,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_index(&self, name: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn input_node(&self) -> usize {
        self.input
    }

    pub fn output_node(&self) -> usize {
        self.output
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[self.input]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-sample output shape of a node.
    pub fn node_shape(&self, node: usize) -> &[usize] {
        &self.shapes[node]
    }

    pub fn node_flops(&self, node: usize) -> u64 {
        self.flops[node]
    }

    pub fn total_flops(&self) -> u64 {
        self.flops.iter().sum()
    }

    /// Hex SHA-256 of all weights in topological order.
    pub fn content_hash(&self) -> &str {
        &self.hash
    }

    /// True when the output node emits log-probabilities.
    pub fn emits_log_probabilities(&self) -> bool {
        matches!(
            self.nodes[self.output].layer().map(|l| &l.spec),
            Some(LayerSpec::LogSoftmax)
        )
    }

    /// Converts an output-node tensor into probabilities.
    pub fn to_probabilities(&self, output: Tensor) -> Tensor {
        if self.emits_log_probabilities() {
            let mut out = output;
            out.data_mut().iter_mut().for_each(|v| *v = v.exp());
            out
        } else {
            output
        }
    }

    /// FLOPs of `node` and all of its ancestors.
    pub fn cumulative_flops(&self, node: usize) -> u64 {
        let preds: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.inputs.clone()).collect();
        reachable(node, &preds, None)
            .iter()
            .enumerate()
            .filter(|(_, &r)| r)
            .map(|(i, _)| self.flops[i])
            .sum()
    }

    /// True when every input-to-output path passes through `node`.
    pub fn dominates_output(&self, node: usize) -> bool {
        if node == self.input || node == self.output {
            return true;
        }
        !reachable(self.input, &self.consumers, Some(node))[self.output]
    }

    /// Runs the batch through the graph in topological order.
    ///
    /// After each node, `visit` sees the node's activation for the live
    /// batch. Returning `Some(rows)` keeps only those rows (by position in
    /// the live batch) in every live activation; returning an empty list
    /// ends execution early with `Ok(None)`.
    pub fn execute(
        &self,
        batch: &Tensor,
        mut visit: impl FnMut(usize, &Tensor) -> Result<Option<Vec<usize>>>,
    ) -> Result<Option<Tensor>> {
        if batch.sample_shape() != self.input_shape() {
            return Err(Error::shape(
                &self.nodes[self.input].name,
                self.input_shape(),
                batch.sample_shape(),
            ));
        }
        let mut acts: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut uses: Vec<usize> = self.consumers.iter().map(Vec::len).collect();
        for &i in &self.order {
            let node = &self.nodes[i];
            let act = match &node.op {
                NodeOp::Input { .. } => batch.clone(),
                NodeOp::Layer(layer) => {
                    let inputs: Vec<&Tensor> = node
                        .inputs
                        .iter()
                        .map(|&j| acts[j].as_ref().expect("input computed"))
                        .collect();
                    layer
                        .forward_inputs(&inputs)
                        .map_err(|e| with_node(e, &node.name))?
                }
            };
            for &j in &node.inputs {
                uses[j] -= 1;
                if uses[j] == 0 {
                    acts[j] = None;
                }
            }
            acts[i] = Some(act);
            if let Some(keep) = visit(i, acts[i].as_ref().unwrap())? {
                if keep.is_empty() {
                    return Ok(None);
                }
                for a in acts.iter_mut().flatten() {
                    *a = a.select_rows(&keep);
                }
            }
            if uses[i] == 0 && i != self.output {
                acts[i] = None;
            }
        }
        Ok(acts[self.output].take())
    }

    /// Plain forward pass; returns the output node's tensor.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self
            .execute(batch, |_, _| Ok(None))?
            .expect("no rows dropped"))
    }

    /// Forward pass that also returns copies of the named activations.
    pub fn forward_with_taps(
        &self,
        batch: &Tensor,
        taps: &[&str],
    ) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        let mut wanted = vec![false; self.nodes.len()];
        for name in taps {
            wanted[self.node_index(name)?] = true;
        }
        let mut tapped = BTreeMap::new();
        let out = self
            .execute(batch, |i, act| {
                if wanted[i] {
                    tapped.insert(self.nodes[i].name.clone(), act.clone());
                }
                Ok(None)
            })?
            .expect("no rows dropped");
        Ok((out, tapped))
    }

    /// Candidate layers for caching, in topological order.
    ///
    /// A node qualifies when it is active at inference time, is marked as a
    /// block output, and dominates the output node. The last `skip_last_k`
    /// qualifying nodes are then dropped, as are nodes with no compute left
    /// after them.
    pub fn identify_candidates(&self, skip_last_k: usize) -> Vec<CandidateLayer> {
        let total = self.total_flops();
        let mut eligible: Vec<usize> = self
            .order
            .iter()
            .copied()
            .filter(|&i| i != self.input && i != self.output)
            .filter(|&i| {
                let node = &self.nodes[i];
                node.block_output
                    && node.layer().is_some_and(|l| l.spec.inference_active())
                    && self.dominates_output(i)
            })
            .collect();
        eligible.truncate(eligible.len().saturating_sub(skip_last_k));
        eligible
            .into_iter()
            .filter_map(|i| {
                let cumulative = self.cumulative_flops(i);
                (cumulative < total).then_some((i, cumulative))
            })
            .enumerate()
            .map(|(k, (i, cumulative))| CandidateLayer {
                name: self.nodes[i].name.clone(),
                tap_shape: self.shapes[i].clone(),
                cumulative_flops: cumulative,
                fallback_flops: total - cumulative,
                ordinal: k + 1,
            })
            .collect()
    }

    pub fn to_manifest(&self) -> String {
        let manifest = Manifest {
            format: MANIFEST_FORMAT.to_string(),
            num_classes: self.num_classes,
            output: self.nodes[self.output].name.clone(),
            edges: self
                .nodes
                .iter()
                .flat_map(|n| {
                    n.inputs
                        .iter()
                        .map(|&j| [self.nodes[j].name.clone(), n.name.clone()])
                })
                .collect(),
            input: InputEntry {
                name: self.nodes[self.input].name.clone(),
                shape: self.input_shape().to_vec(),
            },
            nodes: self
                .nodes
                .iter()
                .filter_map(|n| {
                    let layer = n.layer()?;
                    Some(NodeEntry {
                        name: n.name.clone(),
                        block_output: n.block_output,
                        weights: (!layer.params.is_empty()).then(|| blob_name(&n.name)),
                        layer: layer.spec.clone(),
                    })
                })
                .collect(),
        };
        toml::to_string(&manifest).expect("manifest serializes")
    }
}

fn blob_name(node: &str) -> String {
    format!("{node}.bin")
}

fn with_node(err: Error, node: &str) -> Error {
    match err {
        Error::ShapeMismatch {
            expected, actual, ..
        } => Error::ShapeMismatch {
            layer: node.to_string(),
            expected,
            actual,
        },
        other => other,
    }
}

/// Kahn's algorithm; ties resolve by node index so the order is stable.
fn topological_order(nodes: &[Node], consumers: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = nodes.len();
    let mut indegree: Vec<usize> = nodes.iter().map(|n| n.inputs.len()).collect();
    let mut ready: std::collections::BTreeSet<usize> =
        (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // Every leftover node has a leftover predecessor; walking predecessors
    // must revisit a node, and that node lies on a cycle.
    let mut visited = vec![false; n];
    let mut cur = (0..n).find(|&i| indegree[i] > 0).unwrap();
    while !visited[cur] {
        visited[cur] = true;
        cur = *nodes[cur]
            .inputs
            .iter()
            .find(|&&j| indegree[j] > 0)
            .expect("leftover node has a leftover predecessor");
    }
    Err(Error::Cycle {
        node: nodes[cur].name.clone(),
    })
}

fn reachable(start: usize, adjacency: &[Vec<usize>], blocked: Option<usize>) -> Vec<bool> {
    let mut seen = vec![false; adjacency.len()];
    if Some(start) == blocked {
        return seen;
    }
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(i) = queue.pop_front() {
        for &j in &adjacency[i] {
            if !seen[j] && Some(j) != blocked {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen
}

/// Incremental construction of a [`BackboneGraph`].
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    names: BTreeMap<String, usize>,
    error: Option<Error>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(self, name: &str, shape: Vec<usize>) -> Self {
        self.push(name, NodeOp::Input { shape }, &[], false)
    }

    pub fn layer(self, name: &str, layer: Layer, inputs: &[&str], block_output: bool) -> Self {
        self.push(name, NodeOp::Layer(layer), inputs, block_output)
    }

    /// Appends a layer fed by the most recently added node.
    pub fn then(self, name: &str, layer: Layer, block_output: bool) -> Self {
        let prev = self.nodes.last().map(|n| n.name.clone()).unwrap_or_default();
        self.layer(name, layer, &[&prev], block_output)
    }

    fn push(mut self, name: &str, op: NodeOp, inputs: &[&str], block_output: bool) -> Self {
        let mut idx = Vec::with_capacity(inputs.len());
        for input in inputs {
            match self.names.get(*input) {
                Some(&i) => idx.push(i),
                None => {
                    self.error.get_or_insert(Error::UnknownNode(input.to_string()));
                }
            }
        }
        self.names.insert(name.to_string(), self.nodes.len());
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            block_output,
            inputs: idx,
        });
        self
    }

    pub fn build(self, output: &str, num_classes: usize) -> Result<BackboneGraph> {
        if let Some(e) = self.error {
            return Err(e);
        }
        BackboneGraph::new(self.nodes, output, num_classes)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    num_classes: usize,
    output: String,
    edges: Vec<[String; 2]>,
    input: InputEntry,
    nodes: Vec<NodeEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct InputEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeEntry {
    name: String,
    #[serde(default)]
    block_output: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<String>,
    #[serde(flatten)]
    layer: LayerSpec,
}

/// Writes the manifest and one blob per parameterized node next to it.
pub fn save_model(graph: &BackboneGraph, manifest_path: &Path) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    for node in graph.nodes() {
        if let Some(layer) = node.layer() {
            if layer.params.is_empty() {
                continue;
            }
            let bytes: Vec<u8> = layer
                .params
                .iter()
                .flatten()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            fs::write(dir.join(blob_name(&node.name)), bytes)?;
        }
    }
    fs::write(manifest_path, graph.to_manifest())?;
    Ok(())
}

pub fn load_model(manifest_path: &Path) -> Result<BackboneGraph> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::parse("backbone manifest", e))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::parse(
            "backbone manifest",
            format!("unsupported format `{}`", manifest.format),
        ));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));

    let mut nodes = vec![Node {
        name: manifest.input.name.clone(),
        op: NodeOp::Input {
            shape: manifest.input.shape.clone(),
        },
        block_output: false,
        inputs: Vec::new(),
    }];
    for entry in manifest.nodes {
        entry.layer.validate()?;
        let expected = entry.layer.param_count();
        let params = if expected == 0 {
            Vec::new()
        } else {
            let file = entry.weights.clone().unwrap_or_else(|| blob_name(&entry.name));
            let path = dir.join(&file);
            let bytes = fs::read(&path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingBlob {
                    node: entry.name.clone(),
                    path: path.clone(),
                },
                _ => Error::Io(e),
            })?;
            if bytes.len() != expected * 4 {
                return Err(Error::BlobSize {
                    node: entry.name.clone(),
                    expected,
                    actual: bytes.len() / 4,
                });
            }
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let mut rest = &values[..];
            entry
                .layer
                .param_shapes()
                .iter()
                .map(|s| {
                    let (head, tail) = rest.split_at(s.iter().product());
                    rest = tail;
                    head.to_vec()
                })
                .collect()
        };
        nodes.push(Node {
            name: entry.name,
            op: NodeOp::Layer(Layer::new(entry.layer, params)?),
            block_output: entry.block_output,
            inputs: Vec::new(),
        });
    }
    let index: BTreeMap<String, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.name.clone(), i))
        .collect();
    for [from, to] in &manifest.edges {
        let f = *index.get(from).ok_or_else(|| Error::UnknownNode(from.clone()))?;
        let t = *index.get(to).ok_or_else(|| Error::UnknownNode(to.clone()))?;
        nodes[t].inputs.push(f);
    }
    BackboneGraph::new(nodes, &manifest.output, manifest.num_classes)
}
