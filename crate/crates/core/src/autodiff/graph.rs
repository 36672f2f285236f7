use rand::{Rng, RngCore};

use super::kernels::{self, ConvGeom};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;
pub type ParamId = usize;

/// Dropout configuration. `rate` is the drop probability; survivors are
/// scaled by `1 / (1 - rate)` so deterministic evaluation needs no rescale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
    /// Drop whole feature maps instead of single activations.
    pub spatial: bool,
}

impl DropoutSpec {
    pub fn new(rate: f64, spatial: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidParameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate, spatial })
    }
}

/// How dropout behaves during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Fresh masks; intermediates recorded for a later backward pass.
    Train,
    /// Fresh masks, used for Monte Carlo posterior sampling.
    McSample,
    /// Identity masks.
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Dense,
    Conv2d,
    MaxPool2x2,
    Relu,
    Sigmoid,
    Softplus,
    Dropout,
    SpatialDropout,
    Concat,
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Input,
    Dense {
        input: NodeId,
        weight: ParamId,
        bias: ParamId,
    },
    Conv2d {
        input: NodeId,
        weight: ParamId,
        bias: ParamId,
        kernel: usize,
    },
    MaxPool2x2 {
        input: NodeId,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Softplus {
        input: NodeId,
    },
    Dropout {
        input: NodeId,
        spec: DropoutSpec,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    Flatten {
        input: NodeId,
    },
}

/// One vertex of the computation DAG. Parents always precede children, so
/// the node list is a topological order.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    name: String,
    op: Op,
    /// Per-sample output shape (batch dimension excluded).
    shape: Vec<usize>,
}

impl Node {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn kind(&self) -> OpKind {
        match &self.op {
            Op::Input => OpKind::Input,
            Op::Dense { .. } => OpKind::Dense,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2x2 { .. } => OpKind::MaxPool2x2,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Softplus { .. } => OpKind::Softplus,
            Op::Dropout { spec, .. } if spec.spatial => OpKind::SpatialDropout,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Concat { .. } => OpKind::Concat,
            Op::Flatten { .. } => OpKind::Flatten,
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match &self.op {
            Op::Input => vec![],
            Op::Dense { input, .. }
            | Op::Conv2d { input, .. }
            | Op::MaxPool2x2 { input }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Softplus { input }
            | Op::Dropout { input, .. }
            | Op::Flatten { input } => vec![*input],
            Op::Concat { inputs } => inputs.clone(),
        }
    }

    pub fn dropout(&self) -> Option<DropoutSpec> {
        match &self.op {
            Op::Dropout { spec, .. } => Some(*spec),
            _ => None,
        }
    }

    fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Dropout masks indexed by node. Each mask has a leading dimension equal to
/// the batch size, or 1 to broadcast the same mask over every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks<T> {
    per_node: Vec<Option<Tensor<T>>>,
}

impl<T: Real> DropoutMasks<T> {
    /// No masks: every dropout node acts as the identity.
    pub fn identity() -> Self {
        Self { per_node: Vec::new() }
    }

    fn get(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.per_node.get(node).and_then(|m| m.as_ref())
    }

    pub fn cast<U: Real>(&self) -> DropoutMasks<U> {
        DropoutMasks {
            per_node: self.per_node.iter().map(|m| m.as_ref().map(|t| t.cast())).collect(),
        }
    }
}

/// Values computed by a forward pass.
#[derive(Debug, Clone)]
pub struct Record<T> {
    batch: usize,
    values: Vec<Option<Tensor<T>>>,
    masks: Vec<Option<Tensor<T>>>,
    pool_index: Vec<Option<Vec<u32>>>,
    /// False when intermediates were discarded (`predict`).
    complete: bool,
    outputs: Vec<(String, NodeId)>,
}

impl<T: Real> Record<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self, name: &str) -> Option<&Tensor<T>> {
        let id = self.outputs.iter().find(|(n, _)| n == name)?.1;
        self.values.get(id)?.as_ref()
    }

    pub fn value(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.values.get(node)?.as_ref()
    }

    /// Masks used by this pass, for replaying it exactly.
    pub fn masks(&self) -> DropoutMasks<T> {
        DropoutMasks {
            per_node: self.masks.clone(),
        }
    }

    /// Fingerprint of every non-differentiable branch taken: relu signs and
    /// pooling winners. Finite differences are only valid between passes with
    /// equal fingerprints.
    pub fn kink_signature(&self, graph: &Graph<T>) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (id, node) in graph.nodes.iter().enumerate() {
            match node.op {
                Op::Relu { .. } => {
                    if let Some(v) = self.value(id) {
                        for (i, x) in v.data().iter().enumerate() {
                            mix((i as u64) << 1 | (*x > T::zero()) as u64);
                        }
                    }
                }
                Op::MaxPool2x2 { .. } => {
                    if let Some(idx) = &self.pool_index[id] {
                        idx.iter().for_each(|&i| mix(i as u64));
                    }
                }
                _ => {}
            }
        }
        h
    }
}

/// Gradients of a scalar loss with respect to every parameter, in parameter
/// order.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Vec<Tensor<T>>,
}

enum MaskPlan<'a, T> {
    Fresh { rng: &'a mut dyn RngCore, shared: bool },
    Given(&'a DropoutMasks<T>),
}

/// Computation graph with its trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph<T = f32> {
    nodes: Vec<Node>,
    params: Vec<Param<T>>,
    outputs: Vec<(String, NodeId)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn cast<U: Real>(&self) -> Graph<U> {
        Graph {
            nodes: self.nodes.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            outputs: self.outputs.clone(),
        }
    }

    // ---- construction -------------------------------------------------

    fn push(&mut self, name: &str, op: Op, shape: Vec<usize>) -> Result<NodeId> {
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::shape(name, "duplicate node name"));
        }
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            shape,
        });
        Ok(self.nodes.len() - 1)
    }

    fn parent(&self, name: &str, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::shape(name, format!("unknown parent node {id}")))
    }

    fn add_param(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.params.push(Param {
            name,
            value: Tensor::zeros(shape),
        });
        self.params.len() - 1
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(name, format!("invalid input shape {shape:?}")));
        }
        self.push(name, Op::Input, shape.to_vec())
    }

    pub fn dense(&mut self, name: &str, x: NodeId, out: usize) -> Result<NodeId> {
        let p = self.parent(name, x)?;
        if p.shape.len() != 1 {
            return Err(Error::shape(name, format!("dense expects a vector input, got {:?}", p.shape)));
        }
        if out == 0 {
            return Err(Error::shape(name, "zero output width"));
        }
        let n_in = p.shape[0];
        let weight = self.add_param(format!("{name}.weight"), &[n_in, out]);
        let bias = self.add_param(format!("{name}.bias"), &[out]);
        self.push(name, Op::Dense { input: x, weight, bias }, vec![out])
    }

    pub fn conv2d(&mut self, name: &str, x: NodeId, out_channels: usize, kernel: usize) -> Result<NodeId> {
        let p = self.parent(name, x)?;
        if p.shape.len() != 3 {
            return Err(Error::shape(name, format!("conv2d expects [C, H, W], got {:?}", p.shape)));
        }
        if kernel.is_multiple_of(2) || out_channels == 0 {
            return Err(Error::shape(name, "kernel must be odd and channels positive"));
        }
        let (c_in, h, w) = (p.shape[0], p.shape[1], p.shape[2]);
        let weight = self.add_param(format!("{name}.weight"), &[out_channels, c_in, kernel, kernel]);
        let bias = self.add_param(format!("{name}.bias"), &[out_channels]);
        self.push(
            name,
            Op::Conv2d {
                input: x,
                weight,
                bias,
                kernel,
            },
            vec![out_channels, h, w],
        )
    }

    pub fn maxpool2x2(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let p = self.parent(name, x)?;
        if p.shape.len() != 3 || p.shape[1] < 2 || p.shape[2] < 2 {
            return Err(Error::shape(name, format!("maxpool2x2 expects [C, H>=2, W>=2], got {:?}", p.shape)));
        }
        let shape = vec![p.shape[0], p.shape[1] / 2, p.shape[2] / 2];
        self.push(name, Op::MaxPool2x2 { input: x }, shape)
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let shape = self.parent(name, x)?.shape.clone();
        self.push(name, Op::Relu { input: x }, shape)
    }

    pub fn sigmoid(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let shape = self.parent(name, x)?.shape.clone();
        self.push(name, Op::Sigmoid { input: x }, shape)
    }

    pub fn softplus(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let shape = self.parent(name, x)?.shape.clone();
        self.push(name, Op::Softplus { input: x }, shape)
    }

    pub fn dropout(&mut self, name: &str, x: NodeId, spec: DropoutSpec) -> Result<NodeId> {
        let p = self.parent(name, x)?;
        if spec.spatial && p.shape.len() != 3 {
            return Err(Error::shape(name, "spatial dropout expects [C, H, W]"));
        }
        let shape = p.shape.clone();
        DropoutSpec::new(spec.rate, spec.spatial)?;
        self.push(name, Op::Dropout { input: x, spec }, shape)
    }

    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::shape(name, "concat of nothing"));
        }
        let mut width = 0;
        for &x in xs {
            let p = self.parent(name, x)?;
            if p.shape.len() != 1 {
                return Err(Error::shape(name, format!("concat expects vectors, `{}` is {:?}", p.name, p.shape)));
            }
            width += p.shape[0];
        }
        self.push(name, Op::Concat { inputs: xs.to_vec() }, vec![width])
    }

    pub fn flatten(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let n = self.parent(name, x)?.sample_len();
        self.push(name, Op::Flatten { input: x }, vec![n])
    }

    pub fn mark_output(&mut self, name: &str, node: NodeId) -> Result<()> {
        if node >= self.nodes.len() {
            return Err(Error::shape(name, "unknown output node"));
        }
        self.outputs.push((name.to_string(), node));
        Ok(())
    }

    /// Fan-in scaled uniform weights, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// and zero biases.
    pub fn init_params<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for p in &mut self.params {
            if p.name.ends_with(".bias") {
                p.value.data_mut().fill(T::zero());
                continue;
            }
            let shape = p.value.shape();
            let fan_in: usize = if shape.len() == 2 { shape[0] } else { shape[1..].iter().product() };
            let limit = (6.0 / fan_in as f64).sqrt();
            for v in p.value.data_mut() {
                *v = T::from_f64_lossy(rng.random_range(-limit..limit));
            }
        }
    }

    // ---- execution ----------------------------------------------------

    /// Runs the graph, recording intermediates for `backward`.
    pub fn forward<R: Rng + ?Sized>(&self, inputs: &[(&str, &Tensor<T>)], mode: Mode, rng: &mut R) -> Result<Record<T>> {
        self.run_mode(inputs, mode, &mut RngRef(rng), true)
    }

    /// Like `forward` but keeps only the output values.
    pub fn predict<R: Rng + ?Sized>(&self, inputs: &[(&str, &Tensor<T>)], mode: Mode, rng: &mut R) -> Result<Record<T>> {
        self.run_mode(inputs, mode, &mut RngRef(rng), false)
    }

    /// Replays a forward pass with the given (frozen or shared) masks.
    pub fn forward_with_masks(&self, inputs: &[(&str, &Tensor<T>)], masks: &DropoutMasks<T>) -> Result<Record<T>> {
        self.run(inputs, MaskPlan::Given(masks), true)
    }

    pub fn predict_with_masks(&self, inputs: &[(&str, &Tensor<T>)], masks: &DropoutMasks<T>) -> Result<Record<T>> {
        self.run(inputs, MaskPlan::Given(masks), false)
    }

    /// Draws one per-sample mask for every dropout node; applying it with
    /// `forward_with_masks` shares it across the whole batch.
    pub fn draw_shared_masks<R: Rng + ?Sized>(&self, rng: &mut R) -> DropoutMasks<T> {
        let mut per_node = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(spec) = node.dropout() {
                per_node[id] = draw_mask(node, spec, 1, &mut RngRef(rng));
            }
        }
        DropoutMasks { per_node }
    }

    fn run_mode(&self, inputs: &[(&str, &Tensor<T>)], mode: Mode, rng: &mut dyn RngCore, keep: bool) -> Result<Record<T>> {
        match mode {
            Mode::Deterministic => self.run(inputs, MaskPlan::Given(&DropoutMasks::identity()), keep),
            Mode::Train | Mode::McSample => self.run(inputs, MaskPlan::Fresh { rng, shared: false }, keep),
        }
    }

    fn run(&self, inputs: &[(&str, &Tensor<T>)], mut plan: MaskPlan<'_, T>, keep: bool) -> Result<Record<T>> {
        let n = self.nodes.len();
        let mut values: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut masks: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut pool_index: Vec<Option<Vec<u32>>> = vec![None; n];
        let mut batch: Option<usize> = None;

        // Last consumer of each node, so intermediates can be freed early
        // when not recording.
        let mut last_use = vec![0usize; n];
        for (id, node) in self.nodes.iter().enumerate() {
            for p in node.parents() {
                last_use[p] = id;
            }
        }
        let is_output = |id: NodeId| self.outputs.iter().any(|(_, o)| *o == id);

        for (id, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input => {
                    let t = inputs
                        .iter()
                        .find(|(name, _)| *name == node.name)
                        .map(|(_, t)| *t)
                        .ok_or_else(|| Error::shape(&node.name, "input not bound"))?;
                    let (b, rest) = t
                        .shape()
                        .split_first()
                        .ok_or_else(|| Error::shape(&node.name, "missing batch dimension"))?;
                    if rest != node.shape.as_slice() {
                        return Err(Error::shape(
                            &node.name,
                            format!("expected per-sample shape {:?}, got {:?}", node.shape, rest),
                        ));
                    }
                    match batch {
                        None => batch = Some(*b),
                        Some(bb) if bb != *b => return Err(Error::shape(&node.name, format!("batch size {b} differs from {bb}"))),
                        _ => {}
                    }
                    t.clone()
                }
                op => {
                    let b = batch.ok_or_else(|| Error::shape(&node.name, "no inputs bound"))?;
                    self.eval_op(id, node, op, b, &values, &mut plan, &mut masks, &mut pool_index)?
                }
            };
            values[id] = Some(value);
            if !keep {
                for p in node.parents() {
                    if last_use[p] == id && !is_output(p) {
                        values[p] = None;
                    }
                }
            }
        }

        for (name, id) in &self.outputs {
            if let Some(v) = &values[*id] {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("output `{name}` (node `{}`)", self.nodes[*id].name)));
                }
            }
        }

        if !keep {
            for (id, v) in values.iter_mut().enumerate() {
                if !is_output(id) {
                    *v = None;
                }
            }
            pool_index.iter_mut().for_each(|p| *p = None);
        }

        Ok(Record {
            batch: batch.unwrap_or(0),
            values,
            masks,
            pool_index,
            complete: keep,
            outputs: self.outputs.clone(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_op(
        &self,
        id: NodeId,
        node: &Node,
        op: &Op,
        b: usize,
        values: &[Option<Tensor<T>>],
        plan: &mut MaskPlan<'_, T>,
        masks: &mut [Option<Tensor<T>>],
        pool_index: &mut [Option<Vec<u32>>],
    ) -> Result<Tensor<T>> {
        let val = |p: NodeId| values[p].as_ref().expect("parent evaluated");
        let mut out_shape = vec![b];
        out_shape.extend_from_slice(&node.shape);
        let out_len = b * node.sample_len();
        let t = match op {
            Op::Input => unreachable!(),
            Op::Dense { input, weight, bias } => {
                let x = val(*input);
                let mut out = vec![T::zero(); out_len];
                kernels::dense_forward(
                    x.data(),
                    b,
                    self.nodes[*input].shape[0],
                    self.params[*weight].value.data(),
                    self.params[*bias].value.data(),
                    &mut out,
                );
                Tensor::from_parts(out_shape, out)
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                kernel,
            } => {
                let g = self.conv_geom(*input, node, *kernel);
                let mut out = vec![T::zero(); out_len];
                kernels::conv_forward(
                    &g,
                    val(*input).data(),
                    b,
                    self.params[*weight].value.data(),
                    self.params[*bias].value.data(),
                    &mut out,
                );
                Tensor::from_parts(out_shape, out)
            }
            Op::MaxPool2x2 { input } => {
                let s = &self.nodes[*input].shape;
                let mut out = vec![T::zero(); out_len];
                let mut idx = vec![0u32; out_len];
                kernels::maxpool_forward(val(*input).data(), b * s[0], s[1], s[2], &mut out, &mut idx);
                pool_index[id] = Some(idx);
                Tensor::from_parts(out_shape, out)
            }
            Op::Relu { input } => map(val(*input), |x| x.max(T::zero())),
            Op::Sigmoid { input } => map(val(*input), kernels::sigmoid),
            Op::Softplus { input } => map(val(*input), kernels::softplus),
            Op::Dropout { input, spec } => {
                let x = val(*input);
                let mask = match plan {
                    MaskPlan::Fresh { rng, shared } => {
                        let rows = if *shared { 1 } else { b };
                        draw_mask(node, *spec, rows, &mut **rng)
                    }
                    MaskPlan::Given(m) => m.get(id).cloned(),
                };
                match mask {
                    None => x.clone(),
                    Some(m) => {
                        let rows = m.shape()[0];
                        if rows != 1 && rows != b {
                            return Err(Error::shape(&node.name, format!("mask batch {rows} vs input batch {b}")));
                        }
                        let out = apply_mask(x.data(), m.data(), b, node, spec.spatial, rows == 1);
                        masks[id] = Some(m);
                        Tensor::from_parts(out_shape, out)
                    }
                }
            }
            Op::Concat { inputs } => {
                let mut out = Vec::with_capacity(out_len);
                for s in 0..b {
                    for &p in inputs {
                        let w = self.nodes[p].shape[0];
                        out.extend_from_slice(&val(p).data()[s * w..(s + 1) * w]);
                    }
                }
                Tensor::from_parts(out_shape, out)
            }
            Op::Flatten { input } => val(*input).clone().reshaped(out_shape),
        };
        Ok(t)
    }

    fn conv_geom(&self, input: NodeId, node: &Node, kernel: usize) -> ConvGeom {
        let s = &self.nodes[input].shape;
        ConvGeom {
            c_in: s[0],
            c_out: node.shape[0],
            h: s[1],
            w: s[2],
            k: kernel,
        }
    }

    /// Reverse pass. `seeds` are gradients of the scalar loss with respect to
    /// named outputs; outputs without a seed contribute nothing.
    pub fn backward(&self, record: &Record<T>, seeds: &[(&str, Tensor<T>)]) -> Result<Gradients<T>> {
        if !record.complete || record.values.len() != self.nodes.len() {
            return Err(Error::NoRecordedForward);
        }
        let b = record.batch;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (name, seed) in seeds {
            let id = self
                .outputs
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, id)| *id)
                .ok_or_else(|| Error::shape(*name, "seed for unknown output"))?;
            let expected = record.values[id].as_ref().map(|v| v.shape().to_vec());
            if expected.as_deref() != Some(seed.shape()) {
                return Err(Error::shape(
                    *name,
                    format!("seed shape {:?} vs output {:?}", seed.shape(), expected),
                ));
            }
            accumulate(&mut grads[id], seed.clone());
        }

        let mut pgrads: Vec<Tensor<T>> = self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();

        for id in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let val = |p: NodeId| record.values[p].as_ref().ok_or(Error::NoRecordedForward);
            match &node.op {
                Op::Input => {}
                Op::Dense { input, weight, bias } => {
                    let x = val(*input)?;
                    let n_in = self.nodes[*input].shape[0];
                    let mut dx = vec![T::zero(); b * n_in];
                    let (dw, db) = two_mut(&mut pgrads, *weight, *bias);
                    kernels::dense_backward(
                        x.data(),
                        b,
                        n_in,
                        self.params[*weight].value.data(),
                        dy.data(),
                        dw.data_mut(),
                        db.data_mut(),
                        &mut dx,
                    );
                    accumulate(&mut grads[*input], Tensor::from_parts(x.shape().to_vec(), dx));
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    kernel,
                } => {
                    let x = val(*input)?;
                    let g = self.conv_geom(*input, node, *kernel);
                    let mut dx = vec![T::zero(); x.len()];
                    let (dw, db) = two_mut(&mut pgrads, *weight, *bias);
                    kernels::conv_backward(
                        &g,
                        x.data(),
                        b,
                        self.params[*weight].value.data(),
                        dy.data(),
                        dw.data_mut(),
                        db.data_mut(),
                        &mut dx,
                    );
                    accumulate(&mut grads[*input], Tensor::from_parts(x.shape().to_vec(), dx));
                }
                Op::MaxPool2x2 { input } => {
                    let x = val(*input)?;
                    let idx = record.pool_index[id].as_ref().ok_or(Error::NoRecordedForward)?;
                    let mut dx = vec![T::zero(); x.len()];
                    kernels::maxpool_backward(dy.data(), idx, &mut dx);
                    accumulate(&mut grads[*input], Tensor::from_parts(x.shape().to_vec(), dx));
                }
                Op::Relu { input } => {
                    let x = val(*input)?;
                    let dx = zip_map(x, &dy, |x, g| if x > T::zero() { g } else { T::zero() });
                    accumulate(&mut grads[*input], dx);
                }
                Op::Sigmoid { input } => {
                    let y = val(id)?;
                    let dx = zip_map(y, &dy, |y, g| g * y * (T::one() - y));
                    accumulate(&mut grads[*input], dx.reshaped(val(*input)?.shape().to_vec()));
                }
                Op::Softplus { input } => {
                    let x = val(*input)?;
                    let dx = zip_map(x, &dy, |x, g| g * kernels::sigmoid(x));
                    accumulate(&mut grads[*input], dx);
                }
                Op::Dropout { input, spec } => {
                    let dx = match &record.masks[id] {
                        None => dy,
                        Some(m) => {
                            let rows = m.shape()[0];
                            let d = apply_mask(dy.data(), m.data(), b, node, spec.spatial, rows == 1);
                            Tensor::from_parts(dy.shape().to_vec(), d)
                        }
                    };
                    accumulate(&mut grads[*input], dx);
                }
                Op::Concat { inputs } => {
                    let total = node.shape[0];
                    let mut offset = 0;
                    for &p in inputs {
                        let w = self.nodes[p].shape[0];
                        let mut d = Vec::with_capacity(b * w);
                        for s in 0..b {
                            d.extend_from_slice(&dy.data()[s * total + offset..s * total + offset + w]);
                        }
                        accumulate(&mut grads[p], Tensor::from_parts(vec![b, w], d));
                        offset += w;
                    }
                }
                Op::Flatten { input } => {
                    let shape = val(*input)?.shape().to_vec();
                    accumulate(&mut grads[*input], dy.reshaped(shape));
                }
            }
        }
        Ok(Gradients { params: pgrads })
    }
}

struct RngRef<'a, R: ?Sized>(&'a mut R);

impl<R: RngCore + ?Sized> RngCore for RngRef<'_, R> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

fn draw_mask<T: Real>(node: &Node, spec: DropoutSpec, rows: usize, rng: &mut dyn RngCore) -> Option<Tensor<T>> {
    if spec.rate == 0.0 {
        return None;
    }
    let per_row = if spec.spatial { node.shape[0] } else { node.sample_len() };
    let keep = T::from_f64_lossy(1.0 / (1.0 - spec.rate));
    let data = (0..rows * per_row)
        .map(|_| if rng.random::<f64>() < spec.rate { T::zero() } else { keep })
        .collect();
    Some(Tensor::from_parts(vec![rows, per_row], data))
}

fn apply_mask<T: Real>(x: &[T], mask: &[T], b: usize, node: &Node, spatial: bool, broadcast: bool) -> Vec<T> {
    let n = node.sample_len();
    let plane = if spatial { n / node.shape[0] } else { 1 };
    let per_row = n / plane;
    let mut out = Vec::with_capacity(x.len());
    for s in 0..b {
        let row = if broadcast { 0 } else { s };
        let m = &mask[row * per_row..(row + 1) * per_row];
        let xs = &x[s * n..(s + 1) * n];
        for (i, v) in xs.iter().enumerate() {
            out.push(*v * m[i / plane]);
        }
    }
    out
}

fn map<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect())
}

fn zip_map<T: Real>(x: &Tensor<T>, g: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().zip(g.data()).map(|(a, b)| f(*a, *b)).collect())
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn two_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert!(i < j);
    let (a, b) = v.split_at_mut(j);
    (&mut a[i], &mut b[0])
}
