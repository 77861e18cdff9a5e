//! Static parameter and MAC counting.
//!
//! Convolutions count `out_h * out_w * kh * kw * (cin / groups) * cout` MACs.
//! Elementwise work is counted in MAC-equivalents: four per output element
//! for bilinear upsampling, one per element for add, activation and pooling.
//! OPs are `2 * MACs`; size is `4 * params` bytes in decimal megabytes.

use std::fmt::Write as _;

use thiserror::Error;

use crate::graph::{topo_schedule, Graph, GraphError, NodeId, OpKind, OpNode, TensorId};
use crate::ops;
use crate::tensor::Shape;
use crate::zoo::{self, ModelConfig, ZooError};

pub const BYTES_PER_PARAM: u64 = 4;

pub const COST_CONVENTIONS: &str = "MACs: conv = out_h*out_w*kh*kw*(cin/groups)*cout; \
upsample = 4 per output element; add/activation = 1 per element; pooling = 1 per input element; \
squeeze-excite = pooling + both projections + gating. OPs = 2*MACs. Size = 4 bytes/param, MB = 1e6 bytes.";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("node {node}: shape of tensor {tensor:?} is unresolved")]
    UnresolvedShape { node: String, tensor: TensorId },
    #[error("graph input is {found}, analysis requested resolution {requested}")]
    ResolutionMismatch { requested: usize, found: Shape },
    #[error("node {node}: {source}")]
    Op {
        node: String,
        #[source]
        source: ops::OpError,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            macs: self.macs + o.macs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeCost {
    pub id: NodeId,
    pub name: String,
    pub kind: &'static str,
    pub output_shapes: Vec<Shape>,
    pub cost: Cost,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub nodes: Vec<NodeCost>,
    pub total: Cost,
}

impl CostReport {
    pub fn params(&self) -> u64 {
        self.total.params
    }

    pub fn macs(&self) -> u64 {
        self.total.macs
    }

    pub fn ops(&self) -> u64 {
        2 * self.total.macs
    }

    pub fn size_bytes(&self) -> u64 {
        BYTES_PER_PARAM * self.total.params
    }

    pub fn size_mb(&self) -> f64 {
        self.size_bytes() as f64 / 1e6
    }

    pub fn ops_e9(&self) -> f64 {
        self.ops() as f64 / 1e9
    }

    /// Per-node CSV: `id,name,kind,output_shape,params,macs`.
    pub fn nodes_csv(&self) -> String {
        let mut s = String::from("id,name,kind,output_shape,params,macs\n");
        for n in &self.nodes {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                n.id,
                n.name.replace(',', ";"),
                n.kind,
                shapes_str(&n.output_shapes),
                n.cost.params,
                n.cost.macs
            );
        }
        s
    }
}

fn shapes_str(shapes: &[Shape]) -> String {
    shapes
        .iter()
        .map(Shape::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

fn shape_of(g: &Graph, node: &OpNode, t: TensorId) -> Result<Shape, AnalysisError> {
    g.shape(t).map_err(|_| AnalysisError::UnresolvedShape {
        node: node.name.clone(),
        tensor: t,
    })
}

fn conv_cost(spec: &ops::ConvSpec, out: Shape) -> Cost {
    let (kh, kw) = spec.kernel;
    let per_out = (kh * kw * (spec.cin / spec.groups)) as u64;
    let params = per_out * spec.cout as u64 + if spec.has_bias { spec.cout as u64 } else { 0 };
    Cost {
        params,
        macs: (out.n * out.h * out.w) as u64 * spec.cout as u64 * per_out,
    }
}

/// Parameters and MACs of one node.
pub fn count_node(g: &Graph, node: &OpNode) -> Result<Cost, AnalysisError> {
    let input = shape_of(g, node, node.inputs[0])?;
    let outputs = node
        .outputs
        .iter()
        .map(|&t| shape_of(g, node, t))
        .collect::<Result<Vec<_>, _>>()?;
    let out_elems = outputs[0].len() as u64;
    Ok(match &node.op {
        OpKind::Conv(c) => conv_cost(&c.spec, outputs[0]),
        OpKind::MultiConv1x1(branches) => branches
            .iter()
            .zip(&outputs)
            .map(|(c, &o)| conv_cost(&c.spec, o))
            .fold(Cost::default(), |a, b| a + b),
        OpKind::Upsample { .. } => Cost {
            params: 0,
            macs: 4 * out_elems,
        },
        OpKind::Add | OpKind::Activation(_) => Cost {
            params: 0,
            macs: out_elems,
        },
        OpKind::GlobalAvgPool => Cost {
            params: 0,
            macs: input.len() as u64,
        },
        OpKind::SqueezeExcite(se) => {
            let c = input.c as u64;
            let r = ops::se_reduced_channels(input.c, se.reduction).map_err(|source| {
                AnalysisError::Op {
                    node: node.name.clone(),
                    source,
                }
            })? as u64;
            let projections = 2 * c * r;
            Cost {
                params: projections + r + c,
                macs: input.len() as u64 + input.n as u64 * projections + out_elems,
            }
        }
    })
}

/// Cost of every node (in schedule order) and the totals.
pub fn analyze(g: &Graph, resolution: usize) -> Result<CostReport, AnalysisError> {
    if let Some(&input) = g.inputs().first() {
        let s = g.shape(input)?;
        if s.h != resolution || s.w != resolution {
            return Err(AnalysisError::ResolutionMismatch {
                requested: resolution,
                found: s,
            });
        }
    }
    let mut nodes = Vec::with_capacity(g.nodes().len());
    let mut total = Cost::default();
    for id in topo_schedule(g)? {
        let node = g.node(id).expect("scheduled node exists");
        let cost = count_node(g, node)?;
        total = total + cost;
        nodes.push(NodeCost {
            id,
            name: node.name.clone(),
            kind: node.op.name(),
            output_shapes: node
                .outputs
                .iter()
                .map(|&t| g.shape(t))
                .collect::<Result<_, _>>()?,
            cost,
        });
    }
    Ok(CostReport { nodes, total })
}

/// Build the graph for `cfg` (structure only) and analyze it.
pub fn analyze_config(cfg: &ModelConfig) -> Result<CostReport, AnalysisError> {
    let g = zoo::build_graph(cfg)?;
    analyze(&g, cfg.resolution)
}

/// One line per node: `id kind output_shape params macs`.
pub fn graph_summary(g: &Graph) -> Result<String, AnalysisError> {
    let mut s = String::new();
    for id in topo_schedule(g)? {
        let node = g.node(id).expect("scheduled node exists");
        let cost = count_node(g, node)?;
        let shapes: Vec<Shape> = node
            .outputs
            .iter()
            .map(|&t| g.shape(t))
            .collect::<Result<_, _>>()?;
        let _ = writeln!(
            s,
            "{} {} {} {} {}",
            id,
            node.op.name(),
            shapes_str(&shapes),
            cost.params,
            cost.macs
        );
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: String,
    pub params: u64,
    pub size_mb: f64,
    pub ops_e9: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_HEADER: &str = "config,params,size_mb,ops_e9";

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.3},{:.3}",
                r.config, r.params, r.size_mb, r.ops_e9
            );
        }
        s
    }

    /// Aligned table with the counting conventions as a footer.
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.config.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut s = format!(
            "{:<width$}  {:>12}  {:>10}  {:>10}\n",
            "config", "params", "size_mb", "ops_e9"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>12}  {:>10.3}  {:>10.3}",
                r.config, r.params, r.size_mb, r.ops_e9
            );
        }
        let _ = writeln!(s, "# {COST_CONVENTIONS}");
        s
    }
}

pub fn ablation_report(configs: &[ModelConfig]) -> Result<AblationTable, AnalysisError> {
    let rows = configs
        .iter()
        .map(|cfg| {
            let r = analyze_config(cfg)?;
            Ok(AblationRow {
                config: cfg.label(),
                params: r.params(),
                size_mb: r.size_mb(),
                ops_e9: r.ops_e9(),
            })
        })
        .collect::<Result<_, AnalysisError>>()?;
    Ok(AblationTable { rows })
}
