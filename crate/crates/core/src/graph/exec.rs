//! Sequential reference executor.
//!
//! Intermediate tensors are released as soon as their last consumer has run,
//! and released buffers are handed to later tensors of the same storage
//! extent.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use thiserror::Error;

use super::plan::LayoutPlan;
use super::{check_schedule, topo_schedule, Graph, GraphError, NodeId, OpKind, OpNode, TensorId};
use crate::ops::{self, OpError, PointwiseBranch, SeWeights};
use crate::tensor::{LogicalTensor, PhysicalBuffer, Shape, TensorError};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("missing weight {0}")]
    MissingWeight(String),
    #[error("weight {name} has dims {got:?}, expected {expected:?}")]
    WeightDims {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("graph has {expected} input(s), {got} supplied")]
    InputCount { expected: usize, got: usize },
    #[error("input {index} has shape {got}, graph expects {expected}")]
    InputShape {
        index: usize,
        expected: Shape,
        got: Shape,
    },
    #[error("node {node}: {source}")]
    Op {
        node: String,
        #[source]
        source: OpError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, Default)]
pub struct ExecOptions {
    /// Explicit node order; must be a valid topological order.
    pub schedule: Option<Vec<NodeId>>,
    /// Recycle released buffers for later tensors.
    pub reuse_buffers: bool,
}

impl ExecOptions {
    pub fn reference() -> Self {
        ExecOptions {
            schedule: None,
            reuse_buffers: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExecStats {
    pub buffers_allocated: usize,
    pub buffers_reused: usize,
    pub peak_live_bytes: usize,
    pub weights_touched: BTreeSet<String>,
}

#[derive(Debug)]
pub struct ExecOutcome {
    pub outputs: Vec<LogicalTensor>,
    pub stats: ExecStats,
}

/// Run the graph with the default options and return its outputs in order.
pub fn execute(
    g: &Graph,
    inputs: &[LogicalTensor],
    plan: &LayoutPlan,
) -> Result<Vec<LogicalTensor>, ExecError> {
    Ok(execute_with(g, inputs, plan, &ExecOptions::reference())?.outputs)
}

struct Pool {
    free: Vec<Arc<PhysicalBuffer>>,
    live: HashMap<TensorId, LogicalTensor>,
    reuse: bool,
    stats: ExecStats,
}

impl Pool {
    fn place(
        &mut self,
        t: TensorId,
        shape: Shape,
        plan: &LayoutPlan,
        values: &[f32],
    ) -> Result<(), ExecError> {
        let layout = plan.layout(t);
        let extent = layout.extent(shape).ok_or(TensorError::Allocation(shape))?;
        let reused = self
            .reuse
            .then(|| self.free.iter().position(|b| b.capacity() == extent))
            .flatten();
        let buffer = match reused {
            Some(i) => {
                self.stats.buffers_reused += 1;
                self.free.swap_remove(i)
            }
            None => {
                self.stats.buffers_allocated += 1;
                PhysicalBuffer::zeroed(extent)
            }
        };
        let tensor = LogicalTensor::view(buffer, shape, layout, 0)?;
        tensor.store_interleaved(values)?;
        self.live.insert(t, tensor);
        let live: usize = self.live.values().map(|t| t.buffer().byte_len()).sum();
        self.stats.peak_live_bytes = self.stats.peak_live_bytes.max(live);
        Ok(())
    }

    fn release(&mut self, t: TensorId) {
        if let Some(tensor) = self.live.remove(&t) {
            let buffer = tensor.buffer().clone();
            drop(tensor);
            if self.reuse && Arc::strong_count(&buffer) == 1 {
                self.free.push(buffer);
            }
        }
    }
}

pub fn execute_with(
    g: &Graph,
    inputs: &[LogicalTensor],
    plan: &LayoutPlan,
    opts: &ExecOptions,
) -> Result<ExecOutcome, ExecError> {
    if inputs.len() != g.inputs().len() {
        return Err(ExecError::InputCount {
            expected: g.inputs().len(),
            got: inputs.len(),
        });
    }
    let order = match &opts.schedule {
        Some(order) => {
            check_schedule(g, order)?;
            order.clone()
        }
        None => topo_schedule(g)?,
    };

    let mut remaining: HashMap<TensorId, usize> = HashMap::new();
    for node in g.nodes() {
        for &t in &node.inputs {
            *remaining.entry(t).or_default() += 1;
        }
    }
    let keep = |t: &TensorId| g.outputs().contains(t);

    let mut pool = Pool {
        free: Vec::new(),
        live: HashMap::new(),
        reuse: opts.reuse_buffers,
        stats: ExecStats::default(),
    };
    for (index, (&tid, tensor)) in g.inputs().iter().zip(inputs).enumerate() {
        let expected = g.shape(tid)?;
        if tensor.shape() != expected {
            return Err(ExecError::InputShape {
                index,
                expected,
                got: tensor.shape(),
            });
        }
        pool.place(tid, expected, plan, &tensor.to_interleaved())?;
    }

    for id in order {
        let node = g.node(id).expect("scheduled node exists");
        let results = run_node(g, node, &pool.live, &mut pool.stats.weights_touched)?;
        for (&t, values) in node.outputs.iter().zip(&results) {
            pool.place(t, g.shape(t)?, plan, values)?;
        }
        for &t in &node.inputs {
            let r = remaining.get_mut(&t).expect("counted input");
            *r -= 1;
            if *r == 0 && !keep(&t) {
                pool.release(t);
            }
        }
        for &t in &node.outputs {
            if !remaining.contains_key(&t) && !keep(&t) {
                pool.release(t);
            }
        }
    }

    let outputs = g
        .outputs()
        .iter()
        .map(|t| pool.live.get(t).cloned().ok_or(GraphError::Dangling(*t)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ExecOutcome {
        outputs,
        stats: pool.stats,
    })
}

fn weight<'g>(
    g: &'g Graph,
    name: &str,
    expected: &[usize],
    touched: &mut BTreeSet<String>,
) -> Result<&'g [f32], ExecError> {
    let w = g
        .weights
        .get(name)
        .ok_or_else(|| ExecError::MissingWeight(name.to_string()))?;
    if w.dims != expected {
        return Err(ExecError::WeightDims {
            name: name.to_string(),
            got: w.dims.clone(),
            expected: expected.to_vec(),
        });
    }
    touched.insert(name.to_string());
    Ok(&w.data)
}

fn run_node(
    g: &Graph,
    node: &OpNode,
    live: &HashMap<TensorId, LogicalTensor>,
    touched: &mut BTreeSet<String>,
) -> Result<Vec<Vec<f32>>, ExecError> {
    let input = |i: usize| -> Result<(Vec<f32>, Shape), ExecError> {
        let t = node.inputs[i];
        let tensor = live.get(&t).ok_or(GraphError::Dangling(t))?;
        Ok((tensor.to_interleaved(), tensor.shape()))
    };
    let op_err = |source| ExecError::Op {
        node: node.name.clone(),
        source,
    };
    let (x, xs) = input(0)?;
    let dims = node.op.weight_dims(xs).map_err(op_err)?;
    let mut wts: HashMap<&str, &[f32]> = HashMap::new();
    for (name, d) in &dims {
        wts.insert(name.as_str(), weight(g, name, d, touched)?);
    }

    let out = match &node.op {
        OpKind::Conv(c) => {
            let b = c.bias.as_deref().map(|b| wts[b]);
            let (mut y, _) =
                ops::conv2d_raw(&x, xs, wts[c.weight.as_str()], b, &c.spec).map_err(op_err)?;
            ops::activation_in_place(&mut y, c.act);
            vec![y]
        }
        OpKind::MultiConv1x1(branches) => {
            let specs: Vec<PointwiseBranch<'_>> = branches
                .iter()
                .map(|c| PointwiseBranch {
                    spec: &c.spec,
                    weight: wts[c.weight.as_str()],
                    bias: c.bias.as_deref().map(|b| wts[b]),
                })
                .collect();
            let outs = ops::conv1x1_multi_raw(&x, xs, &specs).map_err(op_err)?;
            outs.into_iter()
                .zip(branches)
                .map(|((mut y, _), c)| {
                    ops::activation_in_place(&mut y, c.act);
                    y
                })
                .collect()
        }
        OpKind::Upsample { factor } => vec![
            ops::bilinear_upsample_raw(&x, xs, *factor)
                .map_err(op_err)?
                .0,
        ],
        OpKind::Add => {
            let (y, ys) = input(1)?;
            if ys != xs {
                return Err(op_err(OpError::Shape(format!("add of {xs} and {ys}"))));
            }
            vec![ops::add_raw(&x, &y)]
        }
        OpKind::Activation(kind) => {
            let mut y = x;
            ops::activation_in_place(&mut y, *kind);
            vec![y]
        }
        OpKind::GlobalAvgPool => vec![ops::global_avg_pool_raw(&x, xs).0],
        OpKind::SqueezeExcite(se) => {
            let w = SeWeights {
                w1: wts[se.w1.as_str()],
                b1: wts[se.b1.as_str()],
                w2: wts[se.w2.as_str()],
                b2: wts[se.b2.as_str()],
            };
            vec![
                ops::squeeze_excite_raw(&x, xs, w, se.reduction)
                    .map_err(op_err)?
                    .0,
            ]
        }
    };
    Ok(out)
}
