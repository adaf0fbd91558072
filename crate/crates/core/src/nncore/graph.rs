//! Layer DAG, forward evaluation and exact backpropagation.
//!
//! Nodes are stored in topological order (an edge may only point at a
//! lower id), parameters live beside the graph, and activations live in a
//! caller-owned [`Workspace`] so a shared graph can serve concurrent
//! inference workers.

use std::collections::HashMap;

use super::{NnError, RegConfig, RegNorm, Scalar, Tensor2};
use crate::rng::{derive, fnv1a, SplitMix64};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerKind {
    Input,
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Relu,
    Sigmoid,
    /// Softmax over each consecutive group of `group` columns.
    Softmax {
        group: usize,
    },
    Dropout {
        keep_prob: f64,
    },
    Add,
    Concat,
    /// Kernel-size-1 convolution over a position-major `(positions ×
    /// in_channels)` column layout.
    Conv1x1 {
        in_channels: usize,
        out_channels: usize,
    },
    /// Max-pool with kernel 1 and stride 1: an identity, kept as a real
    /// node so graphs can mirror architecture descriptions exactly.
    MaxPool1,
    Flatten,
    /// Dense map without bias. `noisy` selects the N(0, 0.01²)
    /// initialization instead of Glorot.
    Projection {
        in_dim: usize,
        out_dim: usize,
        noisy: bool,
    },
    /// Mixture-of-experts combination: inputs are gate probabilities
    /// `(batch, C·(M+1))` and expert sigmoids `(batch, C·M)`; output
    /// `(batch, C)` with the (M+1)-th gate routing to an implicit zero
    /// expert.
    MoeCombine {
        mixtures: usize,
    },
}

impl LayerKind {
    fn label(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Softmax { .. } => "softmax",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
            LayerKind::Conv1x1 { .. } => "conv1x1",
            LayerKind::MaxPool1 => "maxpool1",
            LayerKind::Flatten => "flatten",
            LayerKind::Projection { .. } => "proj",
            LayerKind::MoeCombine { .. } => "moe",
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNode {
    pub id: usize,
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
}

/// Trainable parameters of one node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeParams<E> {
    pub weight: Tensor2<E>,
    pub bias: Option<Vec<E>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub struct GraphBuilder<E> {
    nodes: Vec<LayerNode>,
    params: Vec<Option<NodeParams<E>>>,
    out_dims: Vec<usize>,
    input_dim: usize,
    counters: HashMap<&'static str, usize>,
    name_prefix: String,
}

impl<E: Scalar> GraphBuilder<E> {
    pub fn new(input_dim: usize) -> Self {
        assert!(input_dim > 0, "input_dim must be positive");
        let mut b = GraphBuilder {
            nodes: Vec::new(),
            params: Vec::new(),
            out_dims: Vec::new(),
            input_dim,
            counters: HashMap::new(),
            name_prefix: String::new(),
        };
        b.push_node(LayerKind::Input, vec![], None)
            .expect("input node construction cannot fail");
        b
    }

    /// Prefix applied to every auto-generated and explicit name from now
    /// on; used to keep node names unique when graphs are spliced together.
    pub fn set_name_prefix(&mut self, prefix: &str) {
        self.name_prefix = prefix.to_string();
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn out_dim_of(&self, id: usize) -> usize {
        self.out_dims[id]
    }

    fn auto_name(&mut self, kind: &LayerKind) -> String {
        let label = kind.label();
        let n = self.counters.entry(label).or_insert(0);
        let name = format!("{}{label}{n}", self.name_prefix);
        *n += 1;
        name
    }

    fn infer_out_dim(&self, kind: &LayerKind, inputs: &[usize]) -> Result<usize, NnError> {
        infer_shape(&self.out_dims, self.input_dim, kind, inputs)
    }
}

/// Shape inference for one node given the widths of the nodes before it.
/// Doubles as structural validation for both the builder and checkpoint
/// loading.
fn infer_shape(
    out_dims: &[usize],
    input_dim: usize,
    kind: &LayerKind,
    inputs: &[usize],
) -> Result<usize, NnError> {
    let bad = |msg: String| Err(NnError::BadGraph(msg));
    let arity = |want: usize| -> Result<(), NnError> {
        if inputs.len() != want {
            return Err(NnError::BadGraph(format!(
                "{} expects {want} input(s), got {}",
                kind.label(),
                inputs.len()
            )));
        }
        Ok(())
    };
    for &src in inputs {
        if src >= out_dims.len() {
            return bad(format!("input node {src} does not exist"));
        }
    }
    let dim = |src: usize| out_dims[src];
    match *kind {
        LayerKind::Input => {
            arity(0)?;
            Ok(input_dim)
        }
        LayerKind::Dense { in_dim, out_dim } => {
            arity(1)?;
            if dim(inputs[0]) != in_dim {
                return bad(format!(
                    "dense expects input width {in_dim}, got {}",
                    dim(inputs[0])
                ));
            }
            if out_dim == 0 {
                return bad("dense output width must be positive".into());
            }
            Ok(out_dim)
        }
        LayerKind::Relu | LayerKind::Sigmoid | LayerKind::MaxPool1 | LayerKind::Flatten => {
            arity(1)?;
            Ok(dim(inputs[0]))
        }
        LayerKind::Softmax { group } => {
            arity(1)?;
            let d = dim(inputs[0]);
            if group == 0 || d % group != 0 {
                return bad(format!("softmax group {group} does not divide width {d}"));
            }
            Ok(d)
        }
        LayerKind::Dropout { keep_prob } => {
            arity(1)?;
            if !(keep_prob > 0.0 && keep_prob <= 1.0) {
                return bad(format!("dropout keep_prob {keep_prob} outside (0, 1]"));
            }
            Ok(dim(inputs[0]))
        }
        LayerKind::Add => {
            if inputs.len() < 2 {
                return bad("add expects at least two inputs".into());
            }
            let d = dim(inputs[0]);
            if inputs.iter().any(|&s| dim(s) != d) {
                return bad("add operands must share shape".into());
            }
            Ok(d)
        }
        LayerKind::Concat => {
            if inputs.len() < 2 {
                return bad("concat expects at least two inputs".into());
            }
            Ok(inputs.iter().map(|&s| dim(s)).sum())
        }
        LayerKind::Conv1x1 {
            in_channels,
            out_channels,
        } => {
            arity(1)?;
            let d = dim(inputs[0]);
            if in_channels == 0 || out_channels == 0 {
                return bad("conv1x1 channel counts must be positive".into());
            }
            if d % in_channels != 0 {
                return bad(format!(
                    "conv1x1 input width {d} is not a multiple of {in_channels} channels"
                ));
            }
            Ok(d / in_channels * out_channels)
        }
        LayerKind::Projection {
            in_dim, out_dim, ..
        } => {
            arity(1)?;
            if dim(inputs[0]) != in_dim {
                return bad(format!(
                    "projection expects input width {in_dim}, got {}",
                    dim(inputs[0])
                ));
            }
            if out_dim == 0 {
                return bad("projection output width must be positive".into());
            }
            Ok(out_dim)
        }
        LayerKind::MoeCombine { mixtures } => {
            arity(2)?;
            if mixtures == 0 {
                return bad("moe requires at least one mixture".into());
            }
            let gates = dim(inputs[0]);
            let experts = dim(inputs[1]);
            if experts % mixtures != 0 || gates % (mixtures + 1) != 0 {
                return bad(format!(
                    "moe widths (gates {gates}, experts {experts}) do not factor into \
                         {mixtures} mixtures"
                ));
            }
            let classes = experts / mixtures;
            if gates / (mixtures + 1) != classes {
                return bad(format!(
                    "moe gate width {gates} disagrees with expert width {experts}"
                ));
            }
            Ok(classes)
        }
    }
}

impl<E: Scalar> GraphBuilder<E> {
    fn push_node(
        &mut self,
        kind: LayerKind,
        inputs: Vec<usize>,
        name: Option<&str>,
    ) -> Result<usize, NnError> {
        let out_dim = self.infer_out_dim(&kind, &inputs)?;
        let name = match name {
            Some(n) => format!("{}{n}", self.name_prefix),
            None => self.auto_name(&kind),
        };
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(NnError::BadGraph(format!("duplicate node name {name:?}")));
        }
        let id = self.nodes.len();
        let params = match kind {
            LayerKind::Dense { in_dim, out_dim } => Some(NodeParams {
                weight: Tensor2::zeros(in_dim, out_dim),
                bias: Some(vec![E::zero(); out_dim]),
            }),
            LayerKind::Conv1x1 {
                in_channels,
                out_channels,
            } => Some(NodeParams {
                weight: Tensor2::zeros(in_channels, out_channels),
                bias: Some(vec![E::zero(); out_channels]),
            }),
            LayerKind::Projection {
                in_dim, out_dim, ..
            } => Some(NodeParams {
                weight: Tensor2::zeros(in_dim, out_dim),
                bias: None,
            }),
            _ => None,
        };
        self.nodes.push(LayerNode {
            id,
            name,
            kind,
            inputs,
        });
        self.params.push(params);
        self.out_dims.push(out_dim);
        Ok(id)
    }

    pub fn dense(&mut self, src: usize, out_dim: usize) -> Result<usize, NnError> {
        let in_dim = self.out_dims.get(src).copied().unwrap_or(0);
        self.push_node(LayerKind::Dense { in_dim, out_dim }, vec![src], None)
    }

    pub fn dense_named(
        &mut self,
        src: usize,
        out_dim: usize,
        name: &str,
    ) -> Result<usize, NnError> {
        let in_dim = self.out_dims.get(src).copied().unwrap_or(0);
        self.push_node(LayerKind::Dense { in_dim, out_dim }, vec![src], Some(name))
    }

    pub fn relu(&mut self, src: usize) -> Result<usize, NnError> {
        self.push_node(LayerKind::Relu, vec![src], None)
    }

    pub fn sigmoid(&mut self, src: usize) -> Result<usize, NnError> {
        self.push_node(LayerKind::Sigmoid, vec![src], None)
    }

    pub fn softmax(&mut self, src: usize, group: usize) -> Result<usize, NnError> {
        self.push_node(LayerKind::Softmax { group }, vec![src], None)
    }

    pub fn dropout(&mut self, src: usize, keep_prob: f64) -> Result<usize, NnError> {
        self.push_node(LayerKind::Dropout { keep_prob }, vec![src], None)
    }

    pub fn add(&mut self, srcs: &[usize]) -> Result<usize, NnError> {
        self.push_node(LayerKind::Add, srcs.to_vec(), None)
    }

    pub fn concat(&mut self, srcs: &[usize]) -> Result<usize, NnError> {
        self.push_node(LayerKind::Concat, srcs.to_vec(), None)
    }

    pub fn conv1x1(
        &mut self,
        src: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<usize, NnError> {
        self.push_node(
            LayerKind::Conv1x1 {
                in_channels,
                out_channels,
            },
            vec![src],
            None,
        )
    }

    pub fn maxpool1(&mut self, src: usize) -> Result<usize, NnError> {
        self.push_node(LayerKind::MaxPool1, vec![src], None)
    }

    pub fn flatten(&mut self, src: usize) -> Result<usize, NnError> {
        self.push_node(LayerKind::Flatten, vec![src], None)
    }

    pub fn projection(
        &mut self,
        src: usize,
        out_dim: usize,
        noisy: bool,
    ) -> Result<usize, NnError> {
        let in_dim = self.out_dims.get(src).copied().unwrap_or(0);
        self.push_node(
            LayerKind::Projection {
                in_dim,
                out_dim,
                noisy,
            },
            vec![src],
            None,
        )
    }

    pub fn moe_combine(
        &mut self,
        gates: usize,
        experts: usize,
        mixtures: usize,
    ) -> Result<usize, NnError> {
        self.push_node(
            LayerKind::MoeCombine { mixtures },
            vec![gates, experts],
            None,
        )
    }

    /// Append a copy of `other` with its input node remapped to
    /// `input_src`, every node name prefixed by `prefix`, and parameters
    /// cloned. Returns the id `other`'s output node got here. Frozen
    /// flags do not carry over.
    pub fn splice(
        &mut self,
        other: &ModelGraph<E>,
        input_src: usize,
        prefix: &str,
    ) -> Result<usize, NnError> {
        let got = self.out_dims.get(input_src).copied();
        if got != Some(other.input_dim) {
            return Err(NnError::BadGraph(format!(
                "splice source width {got:?} does not match spliced graph's input width {}",
                other.input_dim
            )));
        }
        let mut map = vec![0usize; other.nodes.len()];
        for node in &other.nodes {
            if matches!(node.kind, LayerKind::Input) {
                map[node.id] = input_src;
                continue;
            }
            let inputs: Vec<usize> = node.inputs.iter().map(|&i| map[i]).collect();
            let name = format!("{prefix}{}", node.name);
            let id = self.push_node(node.kind, inputs, Some(&name))?;
            if let Some(p) = &other.params[node.id] {
                self.params[id] = Some(p.clone());
            }
            map[node.id] = id;
        }
        Ok(map[other.output_id])
    }

    /// Seal the graph with `output` as its single output node.
    pub fn finish(self, output: usize) -> Result<ModelGraph<E>, NnError> {
        if output >= self.nodes.len() {
            return Err(NnError::BadGraph(format!(
                "output node {output} does not exist"
            )));
        }
        // Reverse reachability: every node must contribute to the output.
        let mut live = vec![false; self.nodes.len()];
        let mut stack = vec![output];
        while let Some(id) = stack.pop() {
            if live[id] {
                continue;
            }
            live[id] = true;
            stack.extend(self.nodes[id].inputs.iter().copied());
        }
        if let Some(dead) = live.iter().position(|&l| !l) {
            return Err(NnError::BadGraph(format!(
                "node {dead} ({}) does not reach the output",
                self.nodes[dead].name
            )));
        }
        let output_dim = self.out_dims[output];
        let frozen = vec![false; self.nodes.len()];
        Ok(ModelGraph {
            nodes: self.nodes,
            params: self.params,
            out_dims: self.out_dims,
            frozen,
            input_dim: self.input_dim,
            output_dim,
            output_id: output,
            rng_seed: 0,
            reg: RegConfig::none(),
        })
    }
}

/// Per-node parameter gradients, aligned with the graph's node ids.
#[derive(Clone, Debug)]
pub struct Gradients<E> {
    pub per_node: Vec<Option<NodeParams<E>>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn get(&self, id: usize) -> Option<&NodeParams<E>> {
        self.per_node.get(id).and_then(|p| p.as_ref())
    }
}

/// Activation cache for one forward pass. Owned by the caller so that a
/// shared `&ModelGraph` can run on many workspaces concurrently.
pub struct Workspace<E> {
    acts: Vec<Tensor2<E>>,
    masks: Vec<Option<Vec<u8>>>,
    mode: Mode,
    mask_salt: u64,
    valid: bool,
}

impl<E: Scalar> Workspace<E> {
    pub fn new() -> Self {
        Workspace {
            acts: Vec::new(),
            masks: Vec::new(),
            mode: Mode::Infer,
            mask_salt: 0,
            valid: false,
        }
    }

    /// Distinguishes dropout masks between training steps; set to the step
    /// index by the training loop.
    pub fn set_mask_salt(&mut self, salt: u64) {
        self.mask_salt = salt;
    }

    pub fn output<'a>(&'a self, graph: &ModelGraph<E>) -> Option<&'a Tensor2<E>> {
        if self.valid {
            self.acts.get(graph.output_id)
        } else {
            None
        }
    }

    pub fn activation(&self, id: usize) -> Option<&Tensor2<E>> {
        if self.valid {
            self.acts.get(id)
        } else {
            None
        }
    }
}

impl<E: Scalar> Default for Workspace<E> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug)]
pub struct ModelGraph<E> {
    nodes: Vec<LayerNode>,
    params: Vec<Option<NodeParams<E>>>,
    out_dims: Vec<usize>,
    frozen: Vec<bool>,
    input_dim: usize,
    output_dim: usize,
    output_id: usize,
    rng_seed: u64,
    reg: RegConfig,
}

impl<E: Scalar> ModelGraph<E> {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn output_id(&self) -> usize {
        self.output_id
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn set_rng_seed(&mut self, seed: u64) {
        self.rng_seed = seed;
    }

    pub fn reg(&self) -> RegConfig {
        self.reg
    }

    pub fn set_reg(&mut self, reg: RegConfig) {
        self.reg = reg;
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &LayerNode {
        &self.nodes[id]
    }

    pub fn out_dim_of(&self, id: usize) -> usize {
        self.out_dims[id]
    }

    pub fn node_params(&self, id: usize) -> Option<&NodeParams<E>> {
        self.params[id].as_ref()
    }

    pub fn node_params_mut(&mut self, id: usize) -> Option<&mut NodeParams<E>> {
        self.params[id].as_mut()
    }

    /// Iterate `(node_id, params)` over parameterized nodes.
    pub fn params(&self) -> impl Iterator<Item = (usize, &NodeParams<E>)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(id, p)| p.as_ref().map(|p| (id, p)))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (usize, &mut NodeParams<E>)> {
        self.params
            .iter_mut()
            .enumerate()
            .filter_map(|(id, p)| p.as_mut().map(|p| (id, p)))
    }

    pub fn param_count(&self) -> usize {
        self.params()
            .map(|(_, p)| p.weight.rows() * p.weight.cols() + p.bias.as_ref().map_or(0, Vec::len))
            .sum()
    }

    pub fn set_frozen(&mut self, id: usize, frozen: bool) {
        self.frozen[id] = frozen;
    }

    pub fn is_frozen(&self, id: usize) -> bool {
        self.frozen[id]
    }

    /// Freeze every parameterized node whose name starts with `prefix`.
    pub fn freeze_by_prefix(&mut self, prefix: &str) {
        for id in 0..self.nodes.len() {
            if self.params[id].is_some() && self.nodes[id].name.starts_with(prefix) {
                self.frozen[id] = true;
            }
        }
    }

    /// Regularization penalty of the current weights (biases excluded).
    pub fn reg_penalty(&self) -> f64 {
        if self.reg.penalty == 0.0 {
            return 0.0;
        }
        let sum: f64 = self
            .params()
            .map(|(_, p)| {
                p.weight
                    .iter()
                    .map(|w| {
                        let w = w.to_f64();
                        match self.reg.norm {
                            RegNorm::None => 0.0,
                            RegNorm::L1 => w.abs(),
                            RegNorm::L2 => w * w,
                        }
                    })
                    .sum::<f64>()
            })
            .sum();
        self.reg.penalty * sum
    }

    pub fn forward<'w>(
        &self,
        batch: &Tensor2<E>,
        mode: Mode,
        ws: &'w mut Workspace<E>,
    ) -> Result<&'w Tensor2<E>, NnError> {
        if batch.cols() != self.input_dim {
            return Err(NnError::ShapeMismatch(format!(
                "batch has {} feature columns, graph expects {}",
                batch.cols(),
                self.input_dim
            )));
        }
        ws.acts.clear();
        ws.masks.clear();
        ws.masks.resize(self.nodes.len(), None);
        ws.mode = mode;
        ws.valid = false;
        let rows = batch.rows();

        for node in &self.nodes {
            let act = match node.kind {
                LayerKind::Input => batch.clone(),
                LayerKind::Dense { .. } => {
                    let p = self.params[node.id].as_ref().expect("dense has params");
                    let mut y = ws.acts[node.inputs[0]].mul_nn(&p.weight);
                    add_bias(&mut y, p.bias.as_deref().expect("dense has bias"));
                    y
                }
                LayerKind::Relu => apply_unary(&ws.acts[node.inputs[0]], |v| {
                    if v > E::zero() {
                        v
                    } else {
                        E::zero()
                    }
                }),
                LayerKind::Sigmoid => apply_unary(&ws.acts[node.inputs[0]], |v| {
                    E::one() / (E::one() + (-v).exp())
                }),
                LayerKind::Softmax { group } => softmax_groups(&ws.acts[node.inputs[0]], group),
                LayerKind::Dropout { keep_prob } => {
                    let x = &ws.acts[node.inputs[0]];
                    match mode {
                        Mode::Infer => x.clone(),
                        Mode::Train => {
                            let (y, mask) =
                                self.dropout_train(x, keep_prob, &node.name, ws.mask_salt);
                            ws.masks[node.id] = Some(mask);
                            y
                        }
                    }
                }
                LayerKind::Add => {
                    let mut y = ws.acts[node.inputs[0]].clone();
                    for &src in &node.inputs[1..] {
                        let rhs = &ws.acts[src];
                        for (a, b) in y.data_mut().iter_mut().zip(rhs.data()) {
                            *a += *b;
                        }
                    }
                    y
                }
                LayerKind::Concat => {
                    let parts: Vec<&Tensor2<E>> =
                        node.inputs.iter().map(|&s| &ws.acts[s]).collect();
                    concat_cols(rows, &parts)
                }
                LayerKind::Conv1x1 {
                    in_channels,
                    out_channels,
                } => {
                    let x = &ws.acts[node.inputs[0]];
                    let positions = x.cols() / in_channels;
                    let p = self.params[node.id].as_ref().expect("conv has params");
                    let xv = x.clone().reshaped(rows * positions, in_channels);
                    let mut y = xv.mul_nn(&p.weight);
                    add_bias(&mut y, p.bias.as_deref().expect("conv has bias"));
                    y.reshaped(rows, positions * out_channels)
                }
                LayerKind::MaxPool1 | LayerKind::Flatten => ws.acts[node.inputs[0]].clone(),
                LayerKind::Projection { .. } => {
                    let p = self.params[node.id]
                        .as_ref()
                        .expect("projection has params");
                    ws.acts[node.inputs[0]].mul_nn(&p.weight)
                }
                LayerKind::MoeCombine { mixtures } => {
                    moe_combine(&ws.acts[node.inputs[0]], &ws.acts[node.inputs[1]], mixtures)
                }
            };
            if !act.all_finite() {
                return Err(NnError::NonFiniteValue {
                    node: node.id,
                    name: node.name.clone(),
                });
            }
            ws.acts.push(act);
        }
        ws.valid = true;
        Ok(&ws.acts[self.output_id])
    }

    /// One-shot inference with a private workspace.
    pub fn infer(&self, batch: &Tensor2<E>) -> Result<Tensor2<E>, NnError> {
        let mut ws = Workspace::new();
        self.forward(batch, Mode::Infer, &mut ws)?;
        Ok(ws.acts.swap_remove(self.output_id))
    }

    fn dropout_train(
        &self,
        x: &Tensor2<E>,
        keep_prob: f64,
        name: &str,
        salt: u64,
    ) -> (Tensor2<E>, Vec<u8>) {
        let node_stream = derive(self.rng_seed, fnv1a(name.as_bytes()));
        let mut rng = SplitMix64::new(derive(node_stream, salt));
        let scale = E::from_f64(1.0 / keep_prob);
        let mut mask = vec![0u8; x.data().len()];
        let mut y = x.clone();
        for (v, m) in y.data_mut().iter_mut().zip(mask.iter_mut()) {
            if rng.next_f64() < keep_prob {
                *m = 1;
                *v = *v * scale;
            } else {
                *v = E::zero();
            }
        }
        (y, mask)
    }

    pub fn backward(
        &self,
        ws: &Workspace<E>,
        grad_out: &Tensor2<E>,
    ) -> Result<Gradients<E>, NnError> {
        Ok(self.backward_with_input_grad(ws, grad_out)?.0)
    }

    /// Like [`backward`](Self::backward) but also returns dLoss/dInput,
    /// so graphs can be chained (the stacking ensemble feeds member
    /// outputs into a meta network and needs the gradient back out).
    pub fn backward_with_input_grad(
        &self,
        ws: &Workspace<E>,
        grad_out: &Tensor2<E>,
    ) -> Result<(Gradients<E>, Tensor2<E>), NnError> {
        if !ws.valid || ws.acts.len() != self.nodes.len() {
            return Err(NnError::NoCachedForward);
        }
        let out_shape = ws.acts[self.output_id].shape();
        if grad_out.shape() != out_shape {
            return Err(NnError::ShapeMismatch(format!(
                "grad_out shape {:?} does not match output shape {:?}",
                grad_out.shape(),
                out_shape
            )));
        }

        let rows = grad_out.rows();
        let mut d_acts: Vec<Option<Tensor2<E>>> = vec![None; self.nodes.len()];
        d_acts[self.output_id] = Some(grad_out.clone());
        let mut grads = Gradients {
            per_node: vec![None; self.nodes.len()],
        };

        let mut d_input: Option<Tensor2<E>> = None;
        for node in self.nodes.iter().rev() {
            let Some(dy) = d_acts[node.id].take() else {
                continue;
            };
            match node.kind {
                LayerKind::Input => d_input = Some(dy),
                LayerKind::Dense { .. } => {
                    let p = self.params[node.id].as_ref().expect("dense has params");
                    let x = &ws.acts[node.inputs[0]];
                    let d_w = x.mul_tn(&dy);
                    let d_b = column_sums(&dy);
                    grads.per_node[node.id] = Some(NodeParams {
                        weight: d_w,
                        bias: Some(d_b),
                    });
                    accumulate(&mut d_acts[node.inputs[0]], dy.mul_nt(&p.weight));
                }
                LayerKind::Relu => {
                    let y = &ws.acts[node.id];
                    let dx = binary_map(&dy, y, |g, o| if o > E::zero() { g } else { E::zero() });
                    accumulate(&mut d_acts[node.inputs[0]], dx);
                }
                LayerKind::Sigmoid => {
                    let y = &ws.acts[node.id];
                    let dx = binary_map(&dy, y, |g, o| g * o * (E::one() - o));
                    accumulate(&mut d_acts[node.inputs[0]], dx);
                }
                LayerKind::Softmax { group } => {
                    let y = &ws.acts[node.id];
                    let dx = softmax_backward(&dy, y, group);
                    accumulate(&mut d_acts[node.inputs[0]], dx);
                }
                LayerKind::Dropout { keep_prob } => {
                    let dx = match ws.mode {
                        Mode::Infer => dy,
                        Mode::Train => {
                            let mask = ws.masks[node.id]
                                .as_ref()
                                .expect("train-mode forward cached a dropout mask");
                            let scale = E::from_f64(1.0 / keep_prob);
                            let mut dx = dy;
                            for (g, &m) in dx.data_mut().iter_mut().zip(mask.iter()) {
                                *g = if m == 1 { *g * scale } else { E::zero() };
                            }
                            dx
                        }
                    };
                    accumulate(&mut d_acts[node.inputs[0]], dx);
                }
                LayerKind::Add => {
                    for &src in &node.inputs {
                        accumulate(&mut d_acts[src], dy.clone());
                    }
                }
                LayerKind::Concat => {
                    let mut col = 0;
                    for &src in &node.inputs {
                        let width = self.out_dims[src];
                        let mut part = Tensor2::zeros(rows, width);
                        for r in 0..rows {
                            part.row_mut(r)
                                .copy_from_slice(&dy.row(r)[col..col + width]);
                        }
                        col += width;
                        accumulate(&mut d_acts[src], part);
                    }
                }
                LayerKind::Conv1x1 {
                    in_channels,
                    out_channels,
                } => {
                    let p = self.params[node.id].as_ref().expect("conv has params");
                    let x = &ws.acts[node.inputs[0]];
                    let positions = x.cols() / in_channels;
                    let xv = x.clone().reshaped(rows * positions, in_channels);
                    let dyv = dy.reshaped(rows * positions, out_channels);
                    let d_w = xv.mul_tn(&dyv);
                    let d_b = column_sums(&dyv);
                    grads.per_node[node.id] = Some(NodeParams {
                        weight: d_w,
                        bias: Some(d_b),
                    });
                    let dx = dyv
                        .mul_nt(&p.weight)
                        .reshaped(rows, positions * in_channels);
                    accumulate(&mut d_acts[node.inputs[0]], dx);
                }
                LayerKind::MaxPool1 | LayerKind::Flatten => {
                    accumulate(&mut d_acts[node.inputs[0]], dy);
                }
                LayerKind::Projection { .. } => {
                    let p = self.params[node.id]
                        .as_ref()
                        .expect("projection has params");
                    let x = &ws.acts[node.inputs[0]];
                    let d_w = x.mul_tn(&dy);
                    grads.per_node[node.id] = Some(NodeParams {
                        weight: d_w,
                        bias: None,
                    });
                    accumulate(&mut d_acts[node.inputs[0]], dy.mul_nt(&p.weight));
                }
                LayerKind::MoeCombine { mixtures } => {
                    let gates = &ws.acts[node.inputs[0]];
                    let experts = &ws.acts[node.inputs[1]];
                    let (d_gates, d_experts) = moe_combine_backward(&dy, gates, experts, mixtures);
                    accumulate(&mut d_acts[node.inputs[0]], d_gates);
                    accumulate(&mut d_acts[node.inputs[1]], d_experts);
                }
            }
        }

        self.add_reg_gradients(&mut grads);
        let d_input = d_input.unwrap_or_else(|| Tensor2::zeros(rows, self.input_dim));
        Ok((grads, d_input))
    }

    /// Add the regularization term to every weight-matrix gradient
    /// (l2: 2·penalty·w, l1: penalty·sign(w), sign(0) = 0). Biases are
    /// never regularized.
    fn add_reg_gradients(&self, grads: &mut Gradients<E>) {
        if self.reg.penalty == 0.0 || self.reg.norm == RegNorm::None {
            return;
        }
        let penalty = self.reg.penalty;
        for (id, p) in self.params() {
            let entry = grads.per_node[id].get_or_insert_with(|| NodeParams {
                weight: Tensor2::zeros(p.weight.rows(), p.weight.cols()),
                bias: p.bias.as_ref().map(|b| vec![E::zero(); b.len()]),
            });
            for (g, &w) in entry.weight.data_mut().iter_mut().zip(p.weight.data()) {
                let w = w.to_f64();
                let r = match self.reg.norm {
                    RegNorm::None => 0.0,
                    RegNorm::L2 => 2.0 * penalty * w,
                    RegNorm::L1 => {
                        if w > 0.0 {
                            penalty
                        } else if w < 0.0 {
                            -penalty
                        } else {
                            0.0
                        }
                    }
                };
                *g += E::from_f64(r);
            }
        }
    }
}

impl<E: Scalar> ModelGraph<E> {
    /// Reassemble a graph from stored parts (checkpoint loading), running
    /// the same structural validation the builder applies incrementally.
    pub(super) fn from_parts(
        nodes: Vec<LayerNode>,
        params: Vec<Option<NodeParams<E>>>,
        input_dim: usize,
        output_id: usize,
        rng_seed: u64,
        reg: RegConfig,
    ) -> Result<Self, NnError> {
        let bad = |msg: String| Err(NnError::BadGraph(msg));
        if nodes.is_empty() || params.len() != nodes.len() {
            return bad("node and parameter lists must be nonempty and aligned".into());
        }
        if input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        let mut out_dims: Vec<usize> = Vec::with_capacity(nodes.len());
        let mut seen_names = std::collections::HashSet::new();
        for (id, node) in nodes.iter().enumerate() {
            if node.id != id {
                return bad(format!("node {id} carries id {}", node.id));
            }
            if !seen_names.insert(node.name.clone()) {
                return bad(format!("duplicate node name {:?}", node.name));
            }
            if node.inputs.iter().any(|&src| src >= id) {
                return bad(format!("node {id} is not in topological order"));
            }
            if id == 0 && node.kind != LayerKind::Input {
                return bad("first node must be the input".into());
            }
            if id > 0 && node.kind == LayerKind::Input {
                return bad("only node 0 may be an input".into());
            }
            out_dims.push(infer_shape(&out_dims, input_dim, &node.kind, &node.inputs)?);

            let expected = match node.kind {
                LayerKind::Dense { in_dim, out_dim } => Some((in_dim, out_dim, true)),
                LayerKind::Conv1x1 {
                    in_channels,
                    out_channels,
                } => Some((in_channels, out_channels, true)),
                LayerKind::Projection {
                    in_dim, out_dim, ..
                } => Some((in_dim, out_dim, false)),
                _ => None,
            };
            match (expected, &params[id]) {
                (None, None) => {}
                (Some((rows, cols, wants_bias)), Some(p)) => {
                    if p.weight.shape() != (rows, cols) {
                        return bad(format!(
                            "node {id} weight shape {:?}, expected ({rows}, {cols})",
                            p.weight.shape()
                        ));
                    }
                    match (&p.bias, wants_bias) {
                        (Some(b), true) if b.len() == cols => {}
                        (None, false) => {}
                        _ => return bad(format!("node {id} bias does not match its kind")),
                    }
                }
                _ => return bad(format!("node {id} parameter presence does not match kind")),
            }
        }
        if output_id >= nodes.len() {
            return bad(format!("output node {output_id} does not exist"));
        }
        let mut live = vec![false; nodes.len()];
        let mut stack = vec![output_id];
        while let Some(id) = stack.pop() {
            if !std::mem::replace(&mut live[id], true) {
                stack.extend(nodes[id].inputs.iter().copied());
            }
        }
        if let Some(dead) = live.iter().position(|&l| !l) {
            return bad(format!("node {dead} does not reach the output"));
        }
        let output_dim = out_dims[output_id];
        let frozen = vec![false; nodes.len()];
        Ok(ModelGraph {
            nodes,
            params,
            out_dims,
            frozen,
            input_dim,
            output_dim,
            output_id,
            rng_seed,
            reg,
        })
    }
}

fn add_bias<E: Scalar>(y: &mut Tensor2<E>, bias: &[E]) {
    for r in 0..y.rows() {
        for (v, b) in y.row_mut(r).iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

fn apply_unary<E: Scalar>(x: &Tensor2<E>, f: impl Fn(E) -> E) -> Tensor2<E> {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = f(*v);
    }
    y
}

fn binary_map<E: Scalar>(a: &Tensor2<E>, b: &Tensor2<E>, f: impl Fn(E, E) -> E) -> Tensor2<E> {
    let mut out = a.clone();
    for (v, w) in out.data_mut().iter_mut().zip(b.data()) {
        *v = f(*v, *w);
    }
    out
}

fn column_sums<E: Scalar>(t: &Tensor2<E>) -> Vec<E> {
    let mut sums = vec![E::zero(); t.cols()];
    for r in 0..t.rows() {
        for (s, v) in sums.iter_mut().zip(t.row(r)) {
            *s += *v;
        }
    }
    sums
}

fn concat_cols<E: Scalar>(rows: usize, parts: &[&Tensor2<E>]) -> Tensor2<E> {
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Tensor2::zeros(rows, total);
    for r in 0..rows {
        let row = out.row_mut(r);
        let mut col = 0;
        for p in parts {
            row[col..col + p.cols()].copy_from_slice(p.row(r));
            col += p.cols();
        }
    }
    out
}

fn softmax_groups<E: Scalar>(x: &Tensor2<E>, group: usize) -> Tensor2<E> {
    let mut y = x.clone();
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        for chunk in row.chunks_mut(group) {
            let max = chunk.iter().copied().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for v in chunk.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in chunk.iter_mut() {
                *v = *v / sum;
            }
        }
    }
    y
}

fn softmax_backward<E: Scalar>(dy: &Tensor2<E>, y: &Tensor2<E>, group: usize) -> Tensor2<E> {
    let mut dx = dy.clone();
    for r in 0..dx.rows() {
        let y_row = y.row(r);
        let dx_row = dx.row_mut(r);
        for start in (0..y_row.len()).step_by(group) {
            let ys = &y_row[start..start + group];
            let gs = &mut dx_row[start..start + group];
            let mut dot = E::zero();
            for (g, o) in gs.iter().zip(ys) {
                dot += *g * *o;
            }
            for (g, o) in gs.iter_mut().zip(ys) {
                *g = *o * (*g - dot);
            }
        }
    }
    dx
}

fn moe_combine<E: Scalar>(gates: &Tensor2<E>, experts: &Tensor2<E>, mixtures: usize) -> Tensor2<E> {
    let classes = experts.cols() / mixtures;
    let mut out = Tensor2::zeros(gates.rows(), classes);
    for r in 0..gates.rows() {
        let g_row = gates.row(r);
        let e_row = experts.row(r);
        let o_row = out.row_mut(r);
        for c in 0..classes {
            let mut score = E::zero();
            for m in 0..mixtures {
                score += g_row[c * (mixtures + 1) + m] * e_row[c * mixtures + m];
            }
            // The (M+1)-th gate routes to the implicit zero expert and
            // contributes nothing.
            o_row[c] = score;
        }
    }
    out
}

fn moe_combine_backward<E: Scalar>(
    dy: &Tensor2<E>,
    gates: &Tensor2<E>,
    experts: &Tensor2<E>,
    mixtures: usize,
) -> (Tensor2<E>, Tensor2<E>) {
    let classes = dy.cols();
    let mut d_gates = Tensor2::zeros(gates.rows(), gates.cols());
    let mut d_experts = Tensor2::zeros(experts.rows(), experts.cols());
    for r in 0..dy.rows() {
        let dy_row = dy.row(r);
        let g_row = gates.row(r);
        let e_row = experts.row(r);
        let dg_row = d_gates.row_mut(r);
        for c in 0..classes {
            let d = dy_row[c];
            for m in 0..mixtures {
                dg_row[c * (mixtures + 1) + m] = d * e_row[c * mixtures + m];
            }
        }
        let de_row = d_experts.row_mut(r);
        for c in 0..classes {
            let d = dy_row[c];
            for m in 0..mixtures {
                de_row[c * mixtures + m] = d * g_row[c * (mixtures + 1) + m];
            }
        }
    }
    (d_gates, d_experts)
}

fn accumulate<E: Scalar>(slot: &mut Option<Tensor2<E>>, grad: Tensor2<E>) {
    match slot {
        None => *slot = Some(grad),
        Some(acc) => {
            for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                *a += *g;
            }
        }
    }
}
