//! Static model graphs: specification, validation, shape inference,
//! parameter storage, and the batched forward/backward executor.
//!
//! Graphs are DAGs with one reserved source (`INPUT_ID`) and exactly one
//! `SoftmaxOutput` sink. Nodes must be declared after every node they read
//! from, so insertion order is already a topological order; a cycle cannot
//! be expressed. Fan-out is unrestricted and gradients from multiple
//! consumers accumulate by summation. Only `Concat` may have fan-in > 1.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::act::{activate, activate_grad, softmax_rows};
use crate::nn::conv::{conv2d_batch_cached, conv2d_batch_grad};
use crate::nn::dense::{dense_batch, dense_batch_grad};
use crate::nn::init::glorot_uniform;
use crate::nn::norm::{
    batch_norm_grad, batch_norm_infer, batch_norm_train, dropout, dropout_grad,
    update_running_stat, BnCache,
};
use crate::nn::pool::{
    global_avg_pool_batch, global_avg_pool_batch_grad, global_max_pool_batch, max_pool2d_batch,
    max_pool2d_batch_grad,
};
use crate::nn::{same_out, valid_out, LayerSpec, Padding, Shape};
use crate::tensor::{concat_channels, split_channels, Tensor};

/// Reserved id of the graph input.
pub const INPUT_ID: &str = "input";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Reference to a producer of an activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRef {
    Input,
    Node(usize),
}

/// Graph under construction. `add` appends a node reading from the named
/// producers; producers must already exist.
#[derive(Clone, Debug)]
pub struct GraphSpec {
    input: (usize, usize, usize),
    nodes: Vec<(String, LayerSpec)>,
    edges: Vec<(String, String)>,
}

impl GraphSpec {
    /// Starts a graph whose input images are `[h, w, c]`.
    pub fn new(input: (usize, usize, usize)) -> Self {
        GraphSpec {
            input,
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    /// Appends node `id` computing `layer` over the listed inputs (use
    /// `INPUT_ID` to read the graph input). Input order is preserved and is
    /// the concatenation order for `Concat`.
    pub fn add(&mut self, id: &str, layer: LayerSpec, inputs: &[&str]) -> &mut Self {
        for from in inputs {
            self.edges.push((from.to_string(), id.to_string()));
        }
        self.nodes.push((id.to_string(), layer));
        self
    }

    /// Returns a copy with every dropout node's rate replaced. Used to run
    /// gradient checks on architectures that normally train with dropout.
    pub fn with_dropout_rate(&self, rate: f64) -> GraphSpec {
        let mut out = self.clone();
        for (_, layer) in &mut out.nodes {
            if let LayerSpec::Dropout { rate: r } = layer {
                *r = rate;
            }
        }
        out
    }

    /// Validates the graph and freezes shapes and execution order.
    pub fn compile(&self) -> Result<CompiledGraph> {
        let (h, w, c) = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::invalid(
                "graph",
                format!("input dimensions must be positive, got {:?}", self.input),
            ));
        }
        let mut id_to_idx: BTreeMap<String, usize> = BTreeMap::new();
        for (idx, (id, layer)) in self.nodes.iter().enumerate() {
            if id.is_empty() {
                return Err(Error::graph(id.clone(), "node id must be nonempty"));
            }
            if id == INPUT_ID {
                return Err(Error::graph(id.clone(), "node id `input` is reserved"));
            }
            if id_to_idx.insert(id.clone(), idx).is_some() {
                return Err(Error::graph(id.clone(), "duplicate node id"));
            }
            layer.validate().map_err(|e| Error::graph(id.clone(), e.to_string()))?;
        }

        let n = self.nodes.len();
        let mut preds: Vec<Vec<NodeRef>> = vec![Vec::new(); n];
        let mut out_degree = vec![0usize; n];
        for (from, to) in &self.edges {
            let to_idx = *id_to_idx
                .get(to)
                .ok_or_else(|| Error::graph(to.clone(), "edge to unknown node"))?;
            let from_ref = if from == INPUT_ID {
                NodeRef::Input
            } else {
                let from_idx = *id_to_idx
                    .get(from)
                    .ok_or_else(|| Error::graph(to.clone(), format!("unknown input `{from}`")))?;
                if from_idx >= to_idx {
                    return Err(Error::graph(
                        to.clone(),
                        format!("input `{from}` must be declared before its consumer"),
                    ));
                }
                out_degree[from_idx] += 1;
                NodeRef::Node(from_idx)
            };
            preds[to_idx].push(from_ref);
        }

        let mut sink = None;
        for (idx, (id, layer)) in self.nodes.iter().enumerate() {
            if preds[idx].is_empty() {
                return Err(Error::graph(id.clone(), "node has no inputs"));
            }
            if preds[idx].len() > 1 && !matches!(layer, LayerSpec::Concat) {
                return Err(Error::graph(
                    id.clone(),
                    format!("only concat may have multiple inputs, got {}", preds[idx].len()),
                ));
            }
            match layer {
                LayerSpec::SoftmaxOutput => {
                    if sink.replace(idx).is_some() {
                        return Err(Error::graph(id.clone(), "multiple softmax outputs"));
                    }
                    if out_degree[idx] != 0 {
                        return Err(Error::graph(id.clone(), "softmax output must be the sink"));
                    }
                }
                _ => {
                    if out_degree[idx] == 0 {
                        return Err(Error::graph(id.clone(), "dangling node feeds nothing"));
                    }
                }
            }
        }
        let sink = sink.ok_or_else(|| Error::invalid("graph", "no softmax output node"))?;

        // Shape inference in execution order.
        let input_shape = Shape::Spatial { h, w, c };
        let mut shapes: Vec<Shape> = Vec::with_capacity(n);
        for (idx, (id, layer)) in self.nodes.iter().enumerate() {
            let in_shapes: Vec<Shape> = preds[idx]
                .iter()
                .map(|r| match r {
                    NodeRef::Input => input_shape,
                    NodeRef::Node(j) => shapes[*j],
                })
                .collect();
            let shape = infer_shape(id, layer, &in_shapes)?;
            shapes.push(shape);
        }
        if shapes[sink] != (Shape::Flat { len: 2 }) {
            return Err(Error::graph(
                self.nodes[sink].0.clone(),
                format!("softmax output must see 2 logits, got {:?}", shapes[sink]),
            ));
        }

        Ok(CompiledGraph {
            input_shape: self.input,
            nodes: self.nodes.clone(),
            id_to_idx,
            preds,
            shapes,
            sink,
        })
    }
}

fn infer_shape(id: &str, layer: &LayerSpec, inputs: &[Shape]) -> Result<Shape> {
    let graph_err = |details: String| Error::graph(id, details);
    let single = || -> Result<Shape> {
        debug_assert_eq!(inputs.len(), 1);
        Ok(inputs[0])
    };
    match *layer {
        LayerSpec::Conv2d {
            filters,
            kernel,
            padding,
            stride,
        } => match single()? {
            Shape::Spatial { h, w, .. } => {
                let (oh, ow) = match padding {
                    Padding::Valid => {
                        if h < kernel || w < kernel {
                            return Err(graph_err(format!(
                                "kernel {kernel} larger than input extent {h}x{w}"
                            )));
                        }
                        (valid_out(h, kernel, stride), valid_out(w, kernel, stride))
                    }
                    Padding::Same => (same_out(h, stride), same_out(w, stride)),
                };
                Ok(Shape::Spatial {
                    h: oh,
                    w: ow,
                    c: filters,
                })
            }
            s => Err(graph_err(format!("conv2d needs a spatial input, got {s:?}"))),
        },
        LayerSpec::MaxPool2d { window, stride } => match single()? {
            Shape::Spatial { h, w, c } => {
                if window > h || window > w {
                    return Err(graph_err(format!(
                        "window {window} larger than input extent {h}x{w}"
                    )));
                }
                Ok(Shape::Spatial {
                    h: valid_out(h, window, stride),
                    w: valid_out(w, window, stride),
                    c,
                })
            }
            s => Err(graph_err(format!("max_pool2d needs a spatial input, got {s:?}"))),
        },
        LayerSpec::GlobalMaxPool | LayerSpec::GlobalAvgPool => match single()? {
            Shape::Spatial { c, .. } => Ok(Shape::Flat { len: c }),
            s => Err(graph_err(format!("global pool needs a spatial input, got {s:?}"))),
        },
        LayerSpec::Dense { units } => match single()? {
            Shape::Flat { .. } => Ok(Shape::Flat { len: units }),
            s => Err(graph_err(format!(
                "dense needs a flat input (flatten first), got {s:?}"
            ))),
        },
        LayerSpec::Flatten => match single()? {
            Shape::Spatial { h, w, c } => Ok(Shape::Flat { len: h * w * c }),
            s => Err(graph_err(format!("flatten needs a spatial input, got {s:?}"))),
        },
        LayerSpec::Dropout { .. }
        | LayerSpec::BatchNorm { .. }
        | LayerSpec::Activation { .. } => single(),
        LayerSpec::Concat => {
            let mut iter = inputs.iter();
            let first = iter.next().ok_or_else(|| graph_err("concat has no inputs".into()))?;
            match *first {
                Shape::Spatial { h, w, c } => {
                    let mut total = c;
                    for s in iter {
                        match *s {
                            Shape::Spatial { h: h2, w: w2, c: c2 } if h2 == h && w2 == w => {
                                total += c2;
                            }
                            other => {
                                return Err(graph_err(format!(
                                    "concat inputs must share spatial extent: {h}x{w} vs {other:?}"
                                )))
                            }
                        }
                    }
                    Ok(Shape::Spatial { h, w, c: total })
                }
                s => Err(graph_err(format!("concat needs spatial inputs, got {s:?}"))),
            }
        }
        LayerSpec::SoftmaxOutput => match single()? {
            Shape::Flat { len } => Ok(Shape::Flat { len }),
            s => Err(graph_err(format!("softmax needs flat logits, got {s:?}"))),
        },
    }
}

/// Validated graph with frozen shapes and execution order.
#[derive(Clone, Debug)]
pub struct CompiledGraph {
    input_shape: (usize, usize, usize),
    nodes: Vec<(String, LayerSpec)>,
    id_to_idx: BTreeMap<String, usize>,
    preds: Vec<Vec<NodeRef>>,
    shapes: Vec<Shape>,
    sink: usize,
}

impl CompiledGraph {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_id(&self, idx: usize) -> &str {
        &self.nodes[idx].0
    }

    pub fn layer(&self, idx: usize) -> &LayerSpec {
        &self.nodes[idx].1
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.id_to_idx.get(id).copied()
    }

    /// Inferred per-image output shape of a node.
    pub fn shape_of(&self, id: &str) -> Option<Shape> {
        self.index_of(id).map(|i| self.shapes[i])
    }

    fn shape_at(&self, r: NodeRef) -> Shape {
        match r {
            NodeRef::Input => {
                let (h, w, c) = self.input_shape;
                Shape::Spatial { h, w, c }
            }
            NodeRef::Node(i) => self.shapes[i],
        }
    }

    /// The node feeding the softmax sink (the logits producer).
    fn logits_node(&self) -> usize {
        match self.preds[self.sink][0] {
            NodeRef::Node(i) => i,
            NodeRef::Input => unreachable!("softmax cannot read the raw input: shape rules"),
        }
    }

    /// Every parameter tensor the graph requires, in execution order with a
    /// fixed per-layer order. This is the single source of truth for
    /// parameter layout: initialization, optimizers, counting, and the model
    /// file all follow it.
    pub fn parameter_shapes(&self) -> Vec<(String, ParamRole, Vec<usize>)> {
        let mut out = Vec::new();
        for (idx, (id, layer)) in self.nodes.iter().enumerate() {
            match *layer {
                LayerSpec::Conv2d { filters, kernel, .. } => {
                    let c_in = match self.shape_at(self.preds[idx][0]) {
                        Shape::Spatial { c, .. } => c,
                        Shape::Flat { .. } => unreachable!("validated spatial"),
                    };
                    out.push((
                        format!("{id}.kernel"),
                        ParamRole::ConvKernel,
                        vec![kernel, kernel, c_in, filters],
                    ));
                    out.push((format!("{id}.bias"), ParamRole::ConvBias, vec![filters]));
                }
                LayerSpec::Dense { units } => {
                    let n_in = match self.shape_at(self.preds[idx][0]) {
                        Shape::Flat { len } => len,
                        Shape::Spatial { .. } => unreachable!("validated flat"),
                    };
                    out.push((
                        format!("{id}.kernel"),
                        ParamRole::DenseKernel,
                        vec![n_in, units],
                    ));
                    out.push((format!("{id}.bias"), ParamRole::DenseBias, vec![units]));
                }
                LayerSpec::BatchNorm { .. } => {
                    let c = self.shapes[idx].channels();
                    out.push((format!("{id}.gamma"), ParamRole::BnGamma, vec![c]));
                    out.push((format!("{id}.beta"), ParamRole::BnBeta, vec![c]));
                    out.push((
                        format!("{id}.running_mean"),
                        ParamRole::BnRunningMean,
                        vec![c],
                    ));
                    out.push((
                        format!("{id}.running_var"),
                        ParamRole::BnRunningVar,
                        vec![c],
                    ));
                }
                _ => {}
            }
        }
        out
    }
}

/// What a parameter tensor is, which decides initialization, trainability,
/// and regularization (kernels only).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    ConvKernel,
    ConvBias,
    DenseKernel,
    DenseBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamRole {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamRole::BnRunningMean | ParamRole::BnRunningVar)
    }

    pub fn is_kernel(self) -> bool {
        matches!(self, ParamRole::ConvKernel | ParamRole::DenseKernel)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
}

/// All parameters of a model, flat and named, in the graph's canonical
/// order. Node lookup happens through contiguous ranges, so entry order must
/// never be permuted.
#[derive(Clone, Debug)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    node_ranges: Vec<(usize, usize)>,
}

impl ParamSet {
    /// Fresh parameters: Glorot uniform kernels (convolution fans include
    /// the spatial extent: fan_in = k*k*c_in, fan_out = k*k*f), zero biases,
    /// gamma 1, beta 0, running mean 0, running variance 1.
    pub fn init(graph: &CompiledGraph, rng: &mut ChaCha8Rng) -> Self {
        let mut entries = Vec::new();
        let mut node_ranges = Vec::with_capacity(graph.nodes.len());
        for (idx, (_, layer)) in graph.nodes.iter().enumerate() {
            let start = entries.len();
            for (name, role, shape) in node_parameter_shapes(graph, idx, layer) {
                let len: usize = shape.iter().product();
                let value = match role {
                    ParamRole::ConvKernel => {
                        let (k, c_in, f) = (shape[0], shape[2], shape[3]);
                        let data = glorot_uniform(k * k * c_in, k * k * f, len, rng);
                        Tensor::new(shape, data).expect("shape/data consistent")
                    }
                    ParamRole::DenseKernel => {
                        let data = glorot_uniform(shape[0], shape[1], len, rng);
                        Tensor::new(shape, data).expect("shape/data consistent")
                    }
                    ParamRole::BnGamma | ParamRole::BnRunningVar => Tensor::filled(shape, 1.0),
                    _ => Tensor::zeros(shape),
                };
                entries.push(ParamEntry { name, role, value });
            }
            node_ranges.push((start, entries.len()));
        }
        ParamSet {
            entries,
            node_ranges,
        }
    }

    /// Rebuilds a ParamSet from named tensors (model loading). The tensors
    /// must match the graph's canonical names, order, and shapes exactly.
    pub fn from_entries(graph: &CompiledGraph, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = graph.parameter_shapes();
        if tensors.len() != expected.len() {
            return Err(Error::invalid(
                "param_set",
                format!(
                    "expected {} parameter tensors, got {}",
                    expected.len(),
                    tensors.len()
                ),
            ));
        }
        let mut provided = tensors.into_iter();
        let mut entries = Vec::with_capacity(expected.len());
        for (name, role, shape) in expected {
            let (got_name, value) = provided.next().expect("length checked");
            if got_name != name {
                return Err(Error::invalid(
                    "param_set",
                    format!("expected tensor `{name}`, got `{got_name}`"),
                ));
            }
            if value.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "param_set",
                    format!("tensor `{name}`: expected {shape:?}, got {:?}", value.shape()),
                ));
            }
            entries.push(ParamEntry { name, role, value });
        }
        // Rebuild node ranges by walking the graph again.
        let mut node_ranges = Vec::with_capacity(graph.nodes.len());
        let mut cursor = 0;
        for (idx, (_, layer)) in graph.nodes.iter().enumerate() {
            let start = cursor;
            cursor += node_parameter_shapes(graph, idx, layer).len();
            node_ranges.push((start, cursor));
        }
        Ok(ParamSet {
            entries,
            node_ranges,
        })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    fn node(&self, idx: usize) -> &[ParamEntry] {
        let (a, b) = self.node_ranges[idx];
        &self.entries[a..b]
    }

    fn node_mut(&mut self, idx: usize) -> &mut [ParamEntry] {
        let (a, b) = self.node_ranges[idx];
        &mut self.entries[a..b]
    }

    /// (trainable, non-trainable) parameter counts.
    pub fn counts(&self) -> (usize, usize) {
        let mut trainable = 0;
        let mut frozen = 0;
        for e in &self.entries {
            if e.role.is_trainable() {
                trainable += e.value.len();
            } else {
                frozen += e.value.len();
            }
        }
        (trainable, frozen)
    }
}

fn node_parameter_shapes(
    graph: &CompiledGraph,
    idx: usize,
    layer: &LayerSpec,
) -> Vec<(String, ParamRole, Vec<usize>)> {
    let id = &graph.nodes[idx].0;
    match *layer {
        LayerSpec::Conv2d { filters, kernel, .. } => {
            let c_in = match graph.shape_at(graph.preds[idx][0]) {
                Shape::Spatial { c, .. } => c,
                Shape::Flat { .. } => unreachable!("validated spatial"),
            };
            vec![
                (
                    format!("{id}.kernel"),
                    ParamRole::ConvKernel,
                    vec![kernel, kernel, c_in, filters],
                ),
                (format!("{id}.bias"), ParamRole::ConvBias, vec![filters]),
            ]
        }
        LayerSpec::Dense { units } => {
            let n_in = match graph.shape_at(graph.preds[idx][0]) {
                Shape::Flat { len } => len,
                Shape::Spatial { .. } => unreachable!("validated flat"),
            };
            vec![
                (
                    format!("{id}.kernel"),
                    ParamRole::DenseKernel,
                    vec![n_in, units],
                ),
                (format!("{id}.bias"), ParamRole::DenseBias, vec![units]),
            ]
        }
        LayerSpec::BatchNorm { .. } => {
            let c = graph.shapes[idx].channels();
            vec![
                (format!("{id}.gamma"), ParamRole::BnGamma, vec![c]),
                (format!("{id}.beta"), ParamRole::BnBeta, vec![c]),
                (
                    format!("{id}.running_mean"),
                    ParamRole::BnRunningMean,
                    vec![c],
                ),
                (format!("{id}.running_var"), ParamRole::BnRunningVar, vec![c]),
            ]
        }
        _ => Vec::new(),
    }
}

/// Per-node state captured by the forward pass for exact backward reuse.
enum NodeAux {
    None,
    Conv { cols: Tensor },
    MaxPool { argmax: Vec<usize> },
    GlobalMaxPool { argmax: Vec<usize> },
    Dropout { mask: Vec<f64> },
    BatchNorm { cache: BnCache },
}

/// Activations and auxiliary state from one forward pass over a batch.
pub struct ForwardTrace {
    mode: Mode,
    acts: Vec<Tensor>,
    aux: Vec<NodeAux>,
    sink: usize,
    logits_node: usize,
}

impl ForwardTrace {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Class probabilities `[n, 2]`.
    pub fn probabilities(&self) -> &Tensor {
        &self.acts[self.sink]
    }

    /// Pre-softmax logits `[n, 2]`.
    pub fn logits(&self) -> &Tensor {
        &self.acts[self.logits_node]
    }

    /// Batched activation of a node by id.
    pub fn activation<'a>(&'a self, graph: &CompiledGraph, id: &str) -> Option<&'a Tensor> {
        graph.index_of(id).map(|i| &self.acts[i])
    }
}

/// Gradients aligned 1:1 with `ParamSet::entries` (zero tensors for
/// non-trainable entries).
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        ParamGrads {
            grads: params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape().to_vec()))
                .collect(),
        }
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }
}

fn batch_of(x: &Tensor, shape: Shape, op: &'static str) -> Result<usize> {
    let s = x.shape();
    let ok = match shape {
        Shape::Spatial { h, w, c } => {
            s.len() == 4 && s[1] == h && s[2] == w && s[3] == c
        }
        Shape::Flat { len } => s.len() == 2 && s[1] == len,
    };
    if !ok {
        return Err(Error::shape(
            op,
            format!("batch {s:?} does not match per-image shape {shape:?}"),
        ));
    }
    Ok(s[0])
}

/// Runs the graph over a batch `[n, h, w, c]`. Training mode applies
/// dropout (drawing from `rng` in execution order) and batch statistics for
/// batch norm; inference mode is deterministic and uses running statistics.
/// Batch-norm running stats are NOT updated here; call
/// `commit_batch_stats` with the returned trace to fold them in.
pub fn forward(
    graph: &CompiledGraph,
    params: &ParamSet,
    batch: &Tensor,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardTrace> {
    let (h, w, c) = graph.input_shape;
    let n = batch_of(batch, Shape::Spatial { h, w, c }, "graph_forward")?;
    let mut acts: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    let mut aux: Vec<NodeAux> = Vec::with_capacity(graph.nodes.len());

    for (idx, (id, layer)) in graph.nodes.iter().enumerate() {
        let input_act = |r: &NodeRef| -> &Tensor {
            match r {
                NodeRef::Input => batch,
                NodeRef::Node(j) => &acts[*j],
            }
        };
        let x = input_act(&graph.preds[idx][0]);
        let node_err = |e: Error| Error::graph(id.clone(), e.to_string());
        let (out, a) = match layer {
            LayerSpec::Conv2d {
                padding, stride, ..
            } => {
                let p = params.node(idx);
                let (out, cols) =
                    conv2d_batch_cached(x, &p[0].value, &p[1].value, *padding, *stride)
                        .map_err(node_err)?;
                (out, NodeAux::Conv { cols })
            }
            LayerSpec::MaxPool2d { window, stride } => {
                let (out, argmax) = max_pool2d_batch(x, *window, *stride).map_err(node_err)?;
                (out, NodeAux::MaxPool { argmax })
            }
            LayerSpec::GlobalMaxPool => {
                let (out, argmax) = global_max_pool_batch(x).map_err(node_err)?;
                (out, NodeAux::GlobalMaxPool { argmax })
            }
            LayerSpec::GlobalAvgPool => {
                let out = global_avg_pool_batch(x).map_err(node_err)?;
                (out, NodeAux::None)
            }
            LayerSpec::Dense { .. } => {
                let p = params.node(idx);
                let out = dense_batch(x, &p[0].value, &p[1].value).map_err(node_err)?;
                (out, NodeAux::None)
            }
            LayerSpec::Flatten => {
                let flat = graph.shapes[idx].element_count();
                let out = x.clone().reshape(vec![n, flat]).map_err(node_err)?;
                (out, NodeAux::None)
            }
            LayerSpec::Dropout { rate } => match mode {
                Mode::Train => {
                    let (out, mask) = dropout(x, *rate, mode, rng).map_err(node_err)?;
                    (out, NodeAux::Dropout { mask })
                }
                Mode::Infer => (x.clone(), NodeAux::None),
            },
            LayerSpec::BatchNorm { epsilon, .. } => {
                let p = params.node(idx);
                match mode {
                    Mode::Train => {
                        let (out, cache) =
                            batch_norm_train(x, &p[0].value, &p[1].value, *epsilon)
                                .map_err(node_err)?;
                        (out, NodeAux::BatchNorm { cache })
                    }
                    Mode::Infer => {
                        let out = batch_norm_infer(
                            x, &p[0].value, &p[1].value, &p[2].value, &p[3].value, *epsilon,
                        )
                        .map_err(node_err)?;
                        (out, NodeAux::None)
                    }
                }
            }
            LayerSpec::Activation { kind } => (activate(*kind, x), NodeAux::None),
            LayerSpec::Concat => {
                let inputs: Vec<&Tensor> =
                    graph.preds[idx].iter().map(input_act).collect();
                let out = concat_channels(&inputs).map_err(node_err)?;
                (out, NodeAux::None)
            }
            LayerSpec::SoftmaxOutput => {
                let out = softmax_rows(x).map_err(node_err)?;
                (out, NodeAux::None)
            }
        };
        acts.push(out);
        aux.push(a);
    }

    Ok(ForwardTrace {
        mode,
        acts,
        aux,
        sink: graph.sink,
        logits_node: graph.logits_node(),
    })
}

/// Reverse-mode gradients for all parameters given the loss gradient at the
/// logits (the softmax sink itself is fused into the loss). `batch` must be
/// the tensor the trace was produced from.
pub fn backward(
    graph: &CompiledGraph,
    params: &ParamSet,
    trace: &ForwardTrace,
    batch: &Tensor,
    d_logits: &Tensor,
) -> Result<ParamGrads> {
    let logits_shape = trace.logits().shape();
    if d_logits.shape() != logits_shape {
        return Err(Error::shape(
            "graph_backward",
            format!(
                "logit gradient {:?}, expected {logits_shape:?}",
                d_logits.shape()
            ),
        ));
    }
    let mut out = ParamGrads::zeros_like(params);
    let mut node_grads: Vec<Option<Tensor>> = vec![None; graph.nodes.len()];
    node_grads[trace.logits_node] = Some(d_logits.clone());

    let accumulate = |slot: &mut Option<Tensor>, piece: Tensor| {
        match slot {
            Some(acc) => {
                for (a, p) in acc.data_mut().iter_mut().zip(piece.data()) {
                    *a += p;
                }
            }
            None => *slot = Some(piece),
        }
    };

    for idx in (0..graph.nodes.len()).rev() {
        if idx == graph.sink {
            continue;
        }
        let g = match node_grads[idx].take() {
            Some(g) => g,
            // Nodes past the logits producer on unrelated branches cannot
            // exist (single sink, no dangling nodes), so a missing gradient
            // only happens for the logits node itself, already seeded.
            None => continue,
        };
        let (id, layer) = &graph.nodes[idx];
        let input_act = |r: &NodeRef| -> &Tensor {
            match r {
                NodeRef::Input => batch,
                NodeRef::Node(j) => &trace.acts[*j],
            }
        };
        let x = input_act(&graph.preds[idx][0]);
        let node_err = |e: Error| Error::graph(id.clone(), e.to_string());

        // Each arm computes the input gradient(s) and writes parameter
        // gradients straight into `out`.
        let mut input_grads: Vec<Tensor> = Vec::with_capacity(graph.preds[idx].len());
        match layer {
            LayerSpec::Conv2d { padding, stride, .. } => {
                let (a, _) = params.node_ranges[idx];
                let kernel = &params.entries[a].value;
                let cols = match &trace.aux[idx] {
                    NodeAux::Conv { cols } => cols,
                    _ => unreachable!("conv aux cached at forward"),
                };
                let (dx, dk, db) =
                    conv2d_batch_grad(x, kernel, cols, *padding, *stride, &g).map_err(node_err)?;
                // Each node is visited once, so parameter slots are plain
                // assignments; only activation gradients fan in.
                out.grads[a] = dk;
                out.grads[a + 1] = db;
                input_grads.push(dx);
            }
            LayerSpec::MaxPool2d { .. } => {
                let argmax = match &trace.aux[idx] {
                    NodeAux::MaxPool { argmax } => argmax,
                    _ => unreachable!("pool aux cached at forward"),
                };
                input_grads.push(max_pool2d_batch_grad(x.shape(), argmax, &g));
            }
            LayerSpec::GlobalMaxPool => {
                let argmax = match &trace.aux[idx] {
                    NodeAux::GlobalMaxPool { argmax } => argmax,
                    _ => unreachable!("pool aux cached at forward"),
                };
                input_grads.push(max_pool2d_batch_grad(x.shape(), argmax, &g));
            }
            LayerSpec::GlobalAvgPool => {
                input_grads.push(global_avg_pool_batch_grad(x.shape(), &g));
            }
            LayerSpec::Dense { .. } => {
                let (a, _) = params.node_ranges[idx];
                let weights = &params.entries[a].value;
                let (dx, dw, db) = dense_batch_grad(x, weights, &g).map_err(node_err)?;
                out.grads[a] = dw;
                out.grads[a + 1] = db;
                input_grads.push(dx);
            }
            LayerSpec::Flatten => {
                input_grads.push(g.clone().reshape(x.shape().to_vec()).map_err(node_err)?);
            }
            LayerSpec::Dropout { .. } => match &trace.aux[idx] {
                NodeAux::Dropout { mask } => input_grads.push(dropout_grad(mask, &g)),
                _ => input_grads.push(g.clone()),
            },
            LayerSpec::BatchNorm { epsilon, .. } => {
                let (a, _) = params.node_ranges[idx];
                match &trace.aux[idx] {
                    NodeAux::BatchNorm { cache } => {
                        let gamma = &params.entries[a].value;
                        let (dx, dg, db) =
                            batch_norm_grad(gamma, cache, &g).map_err(node_err)?;
                        out.grads[a] = dg;
                        out.grads[a + 1] = db;
                        input_grads.push(dx);
                    }
                    _ => {
                        // Inference-mode backward: running stats are
                        // constants, so the map is affine per channel.
                        let gamma = &params.entries[a].value;
                        let rm = &params.entries[a + 2].value;
                        let rv = &params.entries[a + 3].value;
                        let c = gamma.len();
                        let inv: Vec<f64> = rv
                            .data()
                            .iter()
                            .map(|&v| 1.0 / (v + epsilon).sqrt())
                            .collect();
                        let mut dx = g.clone();
                        let mut dg = vec![0.0; c];
                        let mut db = vec![0.0; c];
                        for (grow, xrow) in dx
                            .data_mut()
                            .chunks_exact_mut(c)
                            .zip(x.data().chunks_exact(c))
                        {
                            for j in 0..c {
                                let xhat = (xrow[j] - rm.data()[j]) * inv[j];
                                dg[j] += grow[j] * xhat;
                                db[j] += grow[j];
                                grow[j] *= gamma.data()[j] * inv[j];
                            }
                        }
                        out.grads[a] = Tensor::new(vec![c], dg).expect("sized");
                        out.grads[a + 1] = Tensor::new(vec![c], db).expect("sized");
                        input_grads.push(dx);
                    }
                }
            }
            LayerSpec::Activation { kind } => {
                input_grads.push(activate_grad(*kind, x, &g).map_err(node_err)?);
            }
            LayerSpec::Concat => {
                let widths: Vec<usize> = graph.preds[idx]
                    .iter()
                    .map(|r| match graph.shape_at(*r) {
                        Shape::Spatial { c, .. } => c,
                        Shape::Flat { len } => len,
                    })
                    .collect();
                input_grads.extend(split_channels(&g, &widths));
            }
            LayerSpec::SoftmaxOutput => unreachable!("sink skipped"),
        }

        for (r, piece) in graph.preds[idx].iter().zip(input_grads) {
            match r {
                NodeRef::Input => {} // input gradients are not consumed
                NodeRef::Node(j) => accumulate(&mut node_grads[*j], piece),
            }
        }
    }
    Ok(out)
}

/// Folds the batch statistics captured in a training-mode trace into the
/// running statistics: running <- m*running + (1-m)*batch.
pub fn commit_batch_stats(
    graph: &CompiledGraph,
    params: &mut ParamSet,
    trace: &ForwardTrace,
) {
    for idx in 0..graph.nodes.len() {
        if let LayerSpec::BatchNorm { momentum, .. } = graph.nodes[idx].1 {
            if let NodeAux::BatchNorm { cache } = &trace.aux[idx] {
                let node = params.node_mut(idx);
                // Layout per BN node: gamma, beta, running_mean, running_var.
                update_running_stat(node[2].value.data_mut(), &cache.stats.mean, momentum);
                update_running_stat(node[3].value.data_mut(), &cache.stats.var, momentum);
            }
        }
    }
}
