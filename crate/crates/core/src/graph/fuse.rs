//! Multi-output fusion of sibling 1x1 convolutions.

use std::collections::BTreeMap;

use super::{Graph, NodeId, OpKind, OpNode, TensorId};

/// Sibling 1x1 convolutions reading one tensor, and the node that replaces them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionGroup {
    pub input: TensorId,
    pub members: Vec<NodeId>,
    pub fused: NodeId,
}

fn fusible(node: &OpNode) -> Option<TensorId> {
    match &node.op {
        OpKind::Conv(c) if c.spec.is_pointwise() => Some(node.inputs[0]),
        _ => None,
    }
}

/// Groups of two or more fusible siblings, ordered by input tensor. The fused
/// node keeps the smallest member id.
pub fn fusion_groups(g: &Graph) -> Vec<FusionGroup> {
    let mut by_input: BTreeMap<TensorId, Vec<NodeId>> = BTreeMap::new();
    for node in g.nodes() {
        if let Some(t) = fusible(node) {
            by_input.entry(t).or_default().push(node.id);
        }
    }
    by_input
        .into_iter()
        .filter(|(_, m)| m.len() > 1)
        .map(|(input, mut members)| {
            members.sort();
            FusionGroup {
                input,
                fused: members[0],
                members,
            }
        })
        .collect()
}

/// Merge sibling 1x1 convolutions over a common input into one multi-output node.
///
/// Outputs keep their tensor ids, so consumers and graph outputs are untouched.
pub fn fuse_mrt(g: &Graph) -> Graph {
    let groups = fusion_groups(g);
    if groups.is_empty() {
        return g.clone();
    }
    let mut member_of: BTreeMap<NodeId, usize> = BTreeMap::new();
    for (i, grp) in groups.iter().enumerate() {
        for &m in &grp.members {
            member_of.insert(m, i);
        }
    }
    let mut nodes = Vec::with_capacity(g.nodes().len());
    for node in g.nodes() {
        match member_of.get(&node.id) {
            None => nodes.push(node.clone()),
            Some(&i) if groups[i].fused == node.id => {
                let members: Vec<&OpNode> = groups[i]
                    .members
                    .iter()
                    .map(|id| g.node(*id).expect("member exists"))
                    .collect();
                let branches = members
                    .iter()
                    .map(|m| match &m.op {
                        OpKind::Conv(c) => c.clone(),
                        _ => unreachable!("only convs are fusible"),
                    })
                    .collect();
                let name = format!(
                    "mrt({})",
                    members
                        .iter()
                        .map(|m| m.name.as_str())
                        .collect::<Vec<_>>()
                        .join("+")
                );
                nodes.push(OpNode {
                    id: node.id,
                    name,
                    op: OpKind::MultiConv1x1(branches),
                    inputs: vec![groups[i].input],
                    outputs: members
                        .iter()
                        .flat_map(|m| m.outputs.iter().copied())
                        .collect(),
                });
            }
            Some(_) => {}
        }
    }
    let mut out = g.clone();
    out.replace_nodes(nodes);
    out
}
