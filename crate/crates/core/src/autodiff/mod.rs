//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] is a tape built during one forward pass. Each op records its
//! parents and a backward closure; [`Graph::backward`] walks the tape in
//! reverse creation order, which makes gradient accumulation deterministic
//! for a fixed program. Nodes only carry backward closures when some input
//! requires a gradient, so frozen-parameter forward passes pay no tape cost.

mod conv;
#[cfg(test)]
mod fd_tests;
mod ops;

pub use conv::{conv2d, conv_transpose2d, linear};
pub use ops::*;

use ndarray::ArrayD;

/// Index of a node within one graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Stable identity of a trainable parameter, assigned at model construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u32);

/// Per-parent gradient contributions; `None` for inputs that need none.
type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[&ArrayD<f64>], &[bool]) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<NodeId>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Param leaves in registration order, for deterministic harvesting.
    params: Vec<(ParamId, NodeId)>,
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Constant input.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push_node(value, vec![], false, None)
    }

    /// Differentiable input (used by gradient checks and tests).
    pub fn leaf_grad(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push_node(value, vec![], true, None)
    }

    /// Registers a parameter leaf. Repeated registration of the same
    /// `ParamId` (weight sharing across sub-forwards) returns the existing
    /// node so gradients accumulate into one buffer.
    pub fn param(&mut self, id: ParamId, value: &ArrayD<f64>, trainable: bool) -> NodeId {
        if let Some(&(_, node)) = self.params.iter().find(|(pid, _)| *pid == id) {
            debug_assert_eq!(
                self.nodes[node.0].requires_grad, trainable,
                "parameter {id:?} registered with conflicting trainability"
            );
            return node;
        }
        let node = self.push_node(value.clone(), vec![], trainable, None);
        self.params.push((id, node));
        node
    }

    /// Cuts the tape: same value, no gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.leaf(v)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1, "scalar() on a non-scalar node");
        v.iter().next().copied().unwrap_or(0.0)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn any_requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.requires_grad(*id))
    }

    pub(crate) fn push_node(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<NodeId>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> NodeId {
        debug_assert!(requires_grad || backward.is_none());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward,
        });
        id
    }

    /// Records an op node: keeps the backward closure only if some parent
    /// requires a gradient.
    pub(crate) fn push_op(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<NodeId>,
        backward: BackwardFn,
    ) -> NodeId {
        let rg = self.any_requires(&parents);
        let backward = if rg { Some(backward) } else { None };
        self.push_node(value, parents, rg, backward)
    }

    /// Reverse pass from a scalar node. Populates gradients for every leaf
    /// that requires one; op-node gradients are freed as soon as consumed.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward expects a scalar loss node"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.raw_dim()));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(back) = self.nodes[i].backward.as_ref() else {
                continue; // leaf: keep its gradient for harvesting
            };
            let g_out = grads[i].take().expect("checked above");
            let parents = self.nodes[i].parents.clone();
            let parent_vals: Vec<&ArrayD<f64>> =
                parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_rg: Vec<bool> = parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let contribs = back(&g_out, &parent_vals, &parent_rg);
            debug_assert_eq!(contribs.len(), parents.len());
            for (p, contrib) in parents.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(c.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => *acc += &c,
                    slot @ None => *slot = Some(c),
                }
            }
        }
        self.grads = grads;
    }

    /// Gradient of a leaf after [`backward`](Self::backward).
    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Harvests parameter gradients in registration order. Parameters whose
    /// leaves were frozen (or unreached by the loss) are omitted.
    pub fn param_grads(&self) -> Vec<(ParamId, &ArrayD<f64>)> {
        self.params
            .iter()
            .filter_map(|(pid, node)| self.grad(*node).map(|g| (*pid, g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn shared_param_accumulates_once() {
        // f(w) = mean(w * x1) + mean(w * x2); the w leaf must be shared.
        let w = arr1(&[2.0, -1.0]).into_dyn();
        let mut g = Graph::new();
        let wid = ParamId(0);
        let wn = g.param(wid, &w, true);
        let wn2 = g.param(wid, &w, true);
        assert_eq!(wn, wn2);
        let x1 = g.leaf(arr1(&[1.0, 3.0]).into_dyn());
        let x2 = g.leaf(arr1(&[5.0, 7.0]).into_dyn());
        let a = mul(&mut g, wn, x1);
        let b = mul(&mut g, wn2, x2);
        let s = add(&mut g, a, b);
        let loss = mean_all(&mut g, s);
        g.backward(loss);
        let grads = g.param_grads();
        assert_eq!(grads.len(), 1);
        // d/dw mean(w*x1 + w*x2) = (x1 + x2) / 2
        let expect = arr1(&[3.0, 5.0]).into_dyn();
        assert_eq!(grads[0].1, &expect);
    }

    #[test]
    fn frozen_leaf_gets_no_grad_and_no_tape() {
        let mut g = Graph::new();
        let x = g.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let y = relu(&mut g, x);
        assert!(!g.requires_grad(y));
        let l = mean_all(&mut g, y);
        g.backward(l);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn self_multiplication_doubles_gradient() {
        let mut g = Graph::new();
        let x = g.leaf_grad(arr1(&[3.0]).into_dyn());
        let sq = mul(&mut g, x, x);
        let l = mean_all(&mut g, sq);
        g.backward(l);
        assert_eq!(g.grad(x).unwrap()[[0]], 6.0);
    }
}
