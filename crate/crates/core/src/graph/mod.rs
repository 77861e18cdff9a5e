//! Operator DAG, scheduling, layout planning, multi-output fusion and execution.

mod exec;
mod fuse;
mod plan;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;

use thiserror::Error;

use crate::ops::{self, ActKind, ConvSpec, OpError};
use crate::tensor::{Shape, TensorError};
use crate::weights::WeightStore;

pub use exec::{execute, execute_with, ExecError, ExecOptions, ExecOutcome, ExecStats};
pub use fuse::{fuse_mrt, fusion_groups, FusionGroup};
pub use plan::{plan_layouts, LayoutPlan, LayoutProfile};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph contains a cycle through {0} node(s)")]
    Cycle(usize),
    #[error("tensor {0:?} has more than one producer")]
    MultipleProducers(TensorId),
    #[error("unknown tensor {0:?}")]
    UnknownTensor(TensorId),
    #[error("tensor {0:?} is neither a graph input nor produced by a node")]
    Dangling(TensorId),
    #[error("node {node}: {source}")]
    Op {
        node: String,
        #[source]
        source: OpError,
    },
    #[error("node {node}: declared output {declared} but inferred {inferred}")]
    ShapeMismatch {
        node: String,
        declared: Shape,
        inferred: Shape,
    },
    #[error("node {node}: expected {expected} input(s), got {got}")]
    Arity {
        node: String,
        expected: usize,
        got: usize,
    },
    #[error("weight {name} declared with dims {declared:?}, op needs {needed:?}")]
    WeightDims {
        name: String,
        declared: Vec<usize>,
        needed: Vec<usize>,
    },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A convolution with a fused activation and named weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvOp {
    pub spec: ConvSpec,
    pub act: ActKind,
    pub weight: String,
    pub bias: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeOp {
    pub reduction: usize,
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Conv(ConvOp),
    /// Sibling 1x1 convolutions over one input, one output per branch.
    MultiConv1x1(Vec<ConvOp>),
    Upsample {
        factor: usize,
    },
    Add,
    Activation(ActKind),
    GlobalAvgPool,
    SqueezeExcite(SeOp),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv(_) => "conv",
            OpKind::MultiConv1x1(_) => "mrt_conv1x1",
            OpKind::Upsample { .. } => "upsample",
            OpKind::Add => "add",
            OpKind::Activation(_) => "activation",
            OpKind::GlobalAvgPool => "gap",
            OpKind::SqueezeExcite(_) => "squeeze_excite",
        }
    }

    pub fn weight_names(&self) -> Vec<&str> {
        fn conv(c: &ConvOp) -> Vec<&str> {
            let mut v = vec![c.weight.as_str()];
            v.extend(c.bias.as_deref());
            v
        }
        match self {
            OpKind::Conv(c) => conv(c),
            OpKind::MultiConv1x1(bs) => bs.iter().flat_map(conv).collect(),
            OpKind::SqueezeExcite(se) => vec![&se.w1, &se.b1, &se.w2, &se.b2],
            _ => Vec::new(),
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::Add => 2,
            _ => 1,
        }
    }

    /// Output shapes given input shapes.
    pub fn infer_shapes(&self, inputs: &[Shape]) -> Result<Vec<Shape>, OpError> {
        let x = inputs[0];
        match self {
            OpKind::Conv(c) => Ok(vec![c.spec.output_shape(x)?]),
            OpKind::MultiConv1x1(bs) => bs.iter().map(|c| c.spec.output_shape(x)).collect(),
            OpKind::Upsample { factor } => Ok(vec![ops::upsample_shape(x, *factor)?]),
            OpKind::Add => {
                if inputs[1] != x {
                    return Err(OpError::Shape(format!("add of {} and {}", x, inputs[1])));
                }
                Ok(vec![x])
            }
            OpKind::Activation(_) => Ok(vec![x]),
            OpKind::GlobalAvgPool => Ok(vec![x.with_spatial(1, 1)]),
            OpKind::SqueezeExcite(se) => {
                ops::se_reduced_channels(x.c, se.reduction)?;
                Ok(vec![x])
            }
        }
    }

    /// Dims each named weight must have for the given input shape.
    pub fn weight_dims(&self, input: Shape) -> Result<Vec<(String, Vec<usize>)>, OpError> {
        let conv = |c: &ConvOp| {
            let mut v = vec![(c.weight.clone(), c.spec.weight_dims().to_vec())];
            if let Some(b) = &c.bias {
                v.push((b.clone(), vec![c.spec.cout]));
            }
            v
        };
        Ok(match self {
            OpKind::Conv(c) => conv(c),
            OpKind::MultiConv1x1(bs) => bs.iter().flat_map(conv).collect(),
            OpKind::SqueezeExcite(se) => {
                let c = input.c;
                let r = ops::se_reduced_channels(c, se.reduction)?;
                vec![
                    (se.w1.clone(), vec![r, c]),
                    (se.b1.clone(), vec![r]),
                    (se.w2.clone(), vec![c, r]),
                    (se.b2.clone(), vec![c]),
                ]
            }
            _ => Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpNode {
    pub id: NodeId,
    pub name: String,
    pub op: OpKind,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Shape,
}

/// A DAG of operators over a tensor table, plus declared and (optionally) materialised weights.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<OpNode>,
    tensors: Vec<TensorInfo>,
    weight_dims: BTreeMap<String, Vec<usize>>,
    pub weights: WeightStore,
    inputs: Vec<TensorId>,
    outputs: Vec<TensorId>,
    next_node: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[OpNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&OpNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn tensor(&self, id: TensorId) -> Result<&TensorInfo, GraphError> {
        self.tensors.get(id.0).ok_or(GraphError::UnknownTensor(id))
    }

    pub fn shape(&self, id: TensorId) -> Result<Shape, GraphError> {
        Ok(self.tensor(id)?.shape)
    }

    pub fn inputs(&self) -> &[TensorId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[TensorId] {
        &self.outputs
    }

    /// Declared weight names and dims, in name order.
    pub fn weight_decls(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.weight_dims
    }

    pub fn declare_tensor(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
    ) -> Result<TensorId, GraphError> {
        shape.validate()?;
        self.tensors.push(TensorInfo {
            name: name.into(),
            shape,
        });
        Ok(TensorId(self.tensors.len() - 1))
    }

    pub fn add_input(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
    ) -> Result<TensorId, GraphError> {
        let id = self.declare_tensor(name, shape)?;
        self.inputs.push(id);
        Ok(id)
    }

    pub fn mark_output(&mut self, id: TensorId) -> Result<(), GraphError> {
        self.tensor(id)?;
        if !self.outputs.contains(&id) {
            self.outputs.push(id);
        }
        Ok(())
    }

    pub fn producer(&self, t: TensorId) -> Option<&OpNode> {
        self.nodes.iter().find(|n| n.outputs.contains(&t))
    }

    pub fn consumers(&self, t: TensorId) -> impl Iterator<Item = &OpNode> {
        self.nodes.iter().filter(move |n| n.inputs.contains(&t))
    }

    /// Append a node over already-declared tensors. Only the single-producer
    /// rule is checked here; [`Graph::validate`] checks everything else.
    pub fn add_node(
        &mut self,
        name: impl Into<String>,
        op: OpKind,
        inputs: Vec<TensorId>,
        outputs: Vec<TensorId>,
    ) -> Result<NodeId, GraphError> {
        for &t in inputs.iter().chain(&outputs) {
            self.tensor(t)?;
        }
        for &t in &outputs {
            if self.producer(t).is_some() || self.inputs.contains(&t) {
                return Err(GraphError::MultipleProducers(t));
            }
        }
        let id = NodeId(self.next_node);
        self.next_node += 1;
        self.nodes.push(OpNode {
            id,
            name: name.into(),
            op,
            inputs,
            outputs,
        });
        Ok(id)
    }

    /// Add a node, inferring and declaring its outputs and weights.
    pub fn push(
        &mut self,
        name: impl Into<String>,
        op: OpKind,
        inputs: &[TensorId],
    ) -> Result<Vec<TensorId>, GraphError> {
        let name = name.into();
        if inputs.len() != op.arity() {
            return Err(GraphError::Arity {
                node: name,
                expected: op.arity(),
                got: inputs.len(),
            });
        }
        let shapes = inputs
            .iter()
            .map(|&t| self.shape(t))
            .collect::<Result<Vec<_>, _>>()?;
        let op_err = |source| GraphError::Op {
            node: name.clone(),
            source,
        };
        let out_shapes = op.infer_shapes(&shapes).map_err(op_err)?;
        for (wname, dims) in op.weight_dims(shapes[0]).map_err(op_err)? {
            self.declare_weight(wname, dims)?;
        }
        let outputs = if out_shapes.len() == 1 {
            vec![self.declare_tensor(name.clone(), out_shapes[0])?]
        } else {
            out_shapes
                .into_iter()
                .enumerate()
                .map(|(i, s)| self.declare_tensor(format!("{name}:{i}"), s))
                .collect::<Result<_, _>>()?
        };
        self.add_node(name, op, inputs.to_vec(), outputs.clone())?;
        Ok(outputs)
    }

    fn declare_weight(&mut self, name: String, dims: Vec<usize>) -> Result<(), GraphError> {
        if let Some(prev) = self.weight_dims.get(&name) {
            if *prev != dims {
                return Err(GraphError::WeightDims {
                    name,
                    declared: prev.clone(),
                    needed: dims,
                });
            }
        }
        self.weight_dims.insert(name, dims);
        Ok(())
    }

    fn push_one(
        &mut self,
        name: impl Into<String>,
        op: OpKind,
        inputs: &[TensorId],
    ) -> Result<TensorId, GraphError> {
        Ok(self.push(name, op, inputs)?[0])
    }

    /// Convolution named `name` with weights `name.weight` / `name.bias`.
    pub fn conv(
        &mut self,
        name: &str,
        x: TensorId,
        spec: ConvSpec,
        act: ActKind,
    ) -> Result<TensorId, GraphError> {
        let op = ConvOp {
            spec,
            act,
            weight: format!("{name}.weight"),
            bias: spec.has_bias.then(|| format!("{name}.bias")),
        };
        self.push_one(name, OpKind::Conv(op), &[x])
    }

    pub fn upsample(
        &mut self,
        name: &str,
        x: TensorId,
        factor: usize,
    ) -> Result<TensorId, GraphError> {
        self.push_one(name, OpKind::Upsample { factor }, &[x])
    }

    pub fn add(&mut self, name: &str, a: TensorId, b: TensorId) -> Result<TensorId, GraphError> {
        self.push_one(name, OpKind::Add, &[a, b])
    }

    pub fn activation(
        &mut self,
        name: &str,
        x: TensorId,
        kind: ActKind,
    ) -> Result<TensorId, GraphError> {
        self.push_one(name, OpKind::Activation(kind), &[x])
    }

    pub fn global_avg_pool(&mut self, name: &str, x: TensorId) -> Result<TensorId, GraphError> {
        self.push_one(name, OpKind::GlobalAvgPool, &[x])
    }

    pub fn squeeze_excite(
        &mut self,
        name: &str,
        x: TensorId,
        reduction: usize,
    ) -> Result<TensorId, GraphError> {
        let op = SeOp {
            reduction,
            w1: format!("{name}.fc1.weight"),
            b1: format!("{name}.fc1.bias"),
            w2: format!("{name}.fc2.weight"),
            b2: format!("{name}.fc2.bias"),
        };
        self.push_one(name, OpKind::SqueezeExcite(op), &[x])
    }

    /// Check arity, shapes along every edge, weight declarations and acyclicity.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut produced: HashMap<TensorId, NodeId> = HashMap::new();
        for node in &self.nodes {
            for &t in &node.outputs {
                if produced.insert(t, node.id).is_some() || self.inputs.contains(&t) {
                    return Err(GraphError::MultipleProducers(t));
                }
            }
        }
        for node in &self.nodes {
            if node.inputs.len() != node.op.arity() {
                return Err(GraphError::Arity {
                    node: node.name.clone(),
                    expected: node.op.arity(),
                    got: node.inputs.len(),
                });
            }
            let shapes = node
                .inputs
                .iter()
                .map(|&t| {
                    if !produced.contains_key(&t) && !self.inputs.contains(&t) {
                        return Err(GraphError::Dangling(t));
                    }
                    self.shape(t)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let op_err = |source| GraphError::Op {
                node: node.name.clone(),
                source,
            };
            let inferred = node.op.infer_shapes(&shapes).map_err(op_err)?;
            if inferred.len() != node.outputs.len() {
                return Err(GraphError::Arity {
                    node: node.name.clone(),
                    expected: inferred.len(),
                    got: node.outputs.len(),
                });
            }
            for (&t, &inf) in node.outputs.iter().zip(&inferred) {
                let declared = self.shape(t)?;
                if declared != inf {
                    return Err(GraphError::ShapeMismatch {
                        node: node.name.clone(),
                        declared,
                        inferred: inf,
                    });
                }
            }
            for (name, needed) in node.op.weight_dims(shapes[0]).map_err(op_err)? {
                match self.weight_dims.get(&name) {
                    Some(d) if *d == needed => {}
                    other => {
                        return Err(GraphError::WeightDims {
                            name,
                            declared: other.cloned().unwrap_or_default(),
                            needed,
                        })
                    }
                }
            }
        }
        for &t in &self.outputs {
            if !produced.contains_key(&t) && !self.inputs.contains(&t) {
                return Err(GraphError::Dangling(t));
            }
        }
        topo_schedule(self)?;
        Ok(())
    }

    fn replace_nodes(&mut self, nodes: Vec<OpNode>) {
        self.nodes = nodes;
    }
}

/// Topological order, ties broken by smallest node id.
pub fn topo_schedule(g: &Graph) -> Result<Vec<NodeId>, GraphError> {
    let mut producer: HashMap<TensorId, NodeId> = HashMap::new();
    for n in &g.nodes {
        for &t in &n.outputs {
            if producer.insert(t, n.id).is_some() {
                return Err(GraphError::MultipleProducers(t));
            }
        }
    }
    let mut indegree: BTreeMap<NodeId, usize> = g.nodes.iter().map(|n| (n.id, 0)).collect();
    let mut successors: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for n in &g.nodes {
        for t in &n.inputs {
            if let Some(&p) = producer.get(t) {
                *indegree.get_mut(&n.id).unwrap() += 1;
                successors.entry(p).or_default().push(n.id);
            }
        }
    }
    let mut ready: BinaryHeap<Reverse<NodeId>> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&id, _)| Reverse(id))
        .collect();
    let mut order = Vec::with_capacity(g.nodes.len());
    while let Some(Reverse(id)) = ready.pop() {
        order.push(id);
        for s in successors.get(&id).into_iter().flatten() {
            let d = indegree.get_mut(s).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse(*s));
            }
        }
    }
    if order.len() != g.nodes.len() {
        return Err(GraphError::Cycle(g.nodes.len() - order.len()));
    }
    Ok(order)
}

/// Check that `order` is a permutation of the graph's nodes respecting every edge.
pub fn check_schedule(g: &Graph, order: &[NodeId]) -> Result<(), GraphError> {
    if order.len() != g.nodes.len() {
        return Err(GraphError::Schedule(format!(
            "{} entries for {} nodes",
            order.len(),
            g.nodes.len()
        )));
    }
    let mut available: std::collections::HashSet<TensorId> = g.inputs.iter().copied().collect();
    let mut seen = std::collections::HashSet::new();
    for id in order {
        let node = g
            .node(*id)
            .ok_or_else(|| GraphError::Schedule(format!("unknown node {id}")))?;
        if !seen.insert(*id) {
            return Err(GraphError::Schedule(format!("node {id} scheduled twice")));
        }
        if let Some(t) = node.inputs.iter().find(|t| !available.contains(t)) {
            return Err(GraphError::Schedule(format!(
                "node {id} reads tensor {} before it is produced",
                t.0
            )));
        }
        available.extend(node.outputs.iter().copied());
    }
    Ok(())
}
