//! Physical layout assignment per tensor.

use std::collections::HashSet;

use super::{Graph, TensorId};
use crate::tensor::Layout;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayoutProfile {
    /// Interleaved everywhere.
    Reference,
    /// Packed4 for every internal activation; graph inputs and outputs stay interleaved.
    Packed,
}

/// One layout per tensor id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutPlan {
    layouts: Vec<Layout>,
}

impl LayoutPlan {
    pub fn uniform(g: &Graph, layout: Layout) -> Self {
        LayoutPlan {
            layouts: vec![layout; g.tensors().len()],
        }
    }

    pub fn layout(&self, t: TensorId) -> Layout {
        self.layouts
            .get(t.0)
            .copied()
            .unwrap_or(Layout::Interleaved)
    }

    pub fn set(&mut self, t: TensorId, layout: Layout) {
        if t.0 >= self.layouts.len() {
            self.layouts.resize(t.0 + 1, Layout::Interleaved);
        }
        self.layouts[t.0] = layout;
    }

    pub fn len(&self) -> usize {
        self.layouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layouts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TensorId, Layout)> + '_ {
        self.layouts
            .iter()
            .enumerate()
            .map(|(i, &l)| (TensorId(i), l))
    }
}

pub fn plan_layouts(g: &Graph, profile: LayoutProfile) -> LayoutPlan {
    let mut plan = LayoutPlan::uniform(g, Layout::Interleaved);
    if profile == LayoutProfile::Packed {
        let io: HashSet<TensorId> = g.inputs().iter().chain(g.outputs()).copied().collect();
        for i in 0..g.tensors().len() {
            let t = TensorId(i);
            if !io.contains(&t) {
                plan.set(t, Layout::Packed4);
            }
        }
    }
    plan
}
