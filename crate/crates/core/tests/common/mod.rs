//! Random DAGs built from every operator the executor supports.

#![allow(dead_code)]

pub mod chains;
pub mod oracles;

use edgeseg::graph::{Graph, NodeId, TensorId};
use edgeseg::ops::{ActKind, ConvSpec};
use edgeseg::tensor::Shape;
use edgeseg::zoo;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ACTS: [ActKind; 3] = [ActKind::Relu6, ActKind::Sigmoid, ActKind::Identity];

/// A graph of `steps` random nodes over one input, with every sink tensor
/// marked as an output and weights drawn from `seed`.
pub fn random_dag(seed: u64, steps: usize) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let c0 = rng.gen_range(1..=6);
    let h = rng.gen_range(2..=6);
    let w = rng.gen_range(2..=6);
    let x = g.add_input("x", Shape::new(1, h, w, c0).unwrap()).unwrap();
    let mut pool: Vec<TensorId> = vec![x];
    for i in 0..steps {
        let a = *pool.choose(&mut rng).unwrap();
        let s = g.shape(a).unwrap();
        let name = format!("n{i}");
        let t = match rng.gen_range(0..8) {
            0 | 1 => {
                // several pointwise siblings on one input feed the fusion pass
                let act = *ACTS.choose(&mut rng).unwrap();
                g.conv(
                    &name,
                    a,
                    ConvSpec::pointwise(s.c, rng.gen_range(1..=6)),
                    act,
                )
            }
            2 => g.conv(&name, a, ConvSpec::depthwise(s.c, 3, 1), ActKind::Relu6),
            3 => {
                let groups = [1, 2, 3]
                    .into_iter()
                    .filter(|d| s.c.is_multiple_of(*d))
                    .max()
                    .unwrap();
                g.conv(
                    &name,
                    a,
                    ConvSpec::grouped(s.c, groups * 2, 3, 1, groups),
                    ActKind::Identity,
                )
            }
            4 => {
                let same: Vec<TensorId> = pool
                    .iter()
                    .copied()
                    .filter(|&t| g.shape(t).unwrap() == s)
                    .collect();
                let b = *same.choose(&mut rng).unwrap();
                g.add(&name, a, b)
            }
            5 => g.activation(&name, a, *ACTS.choose(&mut rng).unwrap()),
            6 => {
                let red = [1, 2, 4]
                    .into_iter()
                    .filter(|d| s.c.is_multiple_of(*d))
                    .max()
                    .unwrap();
                g.squeeze_excite(&name, a, red)
            }
            _ if s.h * s.w <= 36 => g.upsample(&name, a, 2),
            _ => g.activation(&name, a, ActKind::Relu6),
        }
        .unwrap();
        pool.push(t);
    }
    let consumed: Vec<TensorId> = g.nodes().iter().flat_map(|n| n.inputs.clone()).collect();
    for t in pool.into_iter().skip(1) {
        if !consumed.contains(&t) {
            g.mark_output(t).unwrap();
        }
    }
    g.weights = zoo::init_weights(&g, seed).unwrap();
    g
}

/// A uniformly chosen ready node at each step of Kahn's algorithm.
pub fn random_topo(g: &Graph, seed: u64) -> Vec<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done: Vec<TensorId> = g.inputs().to_vec();
    let mut left: Vec<_> = g.nodes().iter().collect();
    let mut order = Vec::new();
    while !left.is_empty() {
        let ready: Vec<usize> = (0..left.len())
            .filter(|&i| left[i].inputs.iter().all(|t| done.contains(t)))
            .collect();
        let pick = *ready.choose(&mut rng).expect("acyclic");
        let node = left.swap_remove(pick);
        done.extend(node.outputs.iter().copied());
        order.push(node.id);
    }
    order
}

pub fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}
