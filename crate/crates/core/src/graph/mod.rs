//! Reverse-mode gradient tape over a fixed set of tensor operations.
//!
//! Every op records its output value together with an analytic vector-Jacobian
//! product. [`Graph::backward`] replays the tape in reverse. The op set is
//! closed: flows, nets, priors and losses are all compositions of the ops in
//! this module, and each op is covered by a finite-difference check.

mod conv;
mod elementwise;
mod linalg;
mod resample;
mod shape;

pub use conv::{conv2d_forward, ConvGeometry};
pub use resample::{sep_apply, SepMatrix};
pub use shape::{squeeze_index, unsqueeze_tensor, squeeze_tensor};

use std::collections::HashMap;

use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Inputs available to a backward closure.
pub(crate) struct BackCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// Whether the i-th input needs a gradient; closures may skip work otherwise.
    pub needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    retain: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, NodeId>,
    track: bool,
    trainable: [bool; 3],
    staged: Vec<(ParamId, Tensor<T>)>,
}

impl<'p, T: Real> Graph<'p, T> {
    /// Tracking graph; gradients flow to flow and discriminator parameters.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph { params, nodes: Vec::new(), bound: HashMap::new(), track: true, trainable: [true, true, false], staged: Vec::new() }
    }

    /// Tracking graph that only differentiates parameters in `groups`.
    pub fn for_groups(params: &'p ParamStore<T>, groups: &[ParamGroup]) -> Self {
        let mut g = Self::new(params);
        g.trainable = [false; 3];
        for grp in groups {
            g.trainable[grp.code() as usize] = true;
        }
        g
    }

    /// Non-tracking graph: values only, no backward closures are kept.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Graph { params, nodes: Vec::new(), bound: HashMap::new(), track: false, trainable: [false; 3], staged: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Data leaf; never differentiated.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.leaf_node(t, false)
    }

    /// Leaf whose gradient is wanted (oracle tests, latent probes).
    pub fn variable(&mut self, t: Tensor<T>) -> NodeId {
        let tracked = self.track;
        self.leaf_node(t, tracked)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.bound.get(&id) {
            return n;
        }
        let rg = self.track && self.trainable[self.params.group(id).code() as usize];
        let n = self.leaf_node(self.params.get(id).clone(), rg);
        self.bound.insert(id, n);
        n
    }

    /// Records a parameter value computed during this pass (data-dependent
    /// initialization). The store is not touched until the caller commits
    /// [`Graph::take_staged`].
    pub fn stage(&mut self, id: ParamId, value: Tensor<T>) {
        self.staged.retain(|(p, _)| *p != id);
        self.staged.push((id, value));
    }

    pub fn staged(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.staged.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn take_staged(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.staged)
    }

    /// Keeps the gradient of an interior node after [`Graph::backward`].
    pub fn retain_grad(&mut self, id: NodeId) {
        self.nodes[id.0].retain = true;
    }

    fn leaf_node(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad, retain: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an op output. The closure is dropped when no parent needs a gradient.
    pub(crate) fn push<F>(&mut self, value: Tensor<T>, parents: &[NodeId], backward: F) -> NodeId
    where
        F: Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let rg = self.track && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward: Option<BackwardFn<T>> = if rg { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node { value, parents: parents.to_vec(), backward, requires_grad: rg, retain: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Copy of `x` cut from the tape (stop-gradient).
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.input(v)
    }

    /// Gradients of the single-element node `loss` with respect to every
    /// differentiable leaf and every retained node.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut kept: HashMap<NodeId, Tensor<T>> = HashMap::new();
        if !self.nodes[loss.0].requires_grad {
            return Gradients { kept, bound: self.bound.clone() };
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                let ctx = BackCtx {
                    inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                    output: &node.value,
                    grad: &g,
                    needs: node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect(),
                };
                let pgrads = bw(&ctx);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(pgrads) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            if node.backward.is_none() || node.retain {
                kept.insert(NodeId(i), g);
            }
        }
        Gradients { kept, bound: self.bound.clone() }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    kept: HashMap<NodeId, Tensor<T>>,
    bound: HashMap<ParamId, NodeId>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf or retained node; `None` when it received none.
    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.kept.get(&id)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.bound.get(&id).and_then(|n| self.kept.get(n))
    }

    /// Parameter gradients, zero-filled for parameters the loss did not touch.
    pub fn param_or_zeros(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        self.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    /// Flattened gradient for `ids`, in the same layout as [`ParamStore::flatten`].
    pub fn flatten(&self, store: &ParamStore<T>, ids: &[ParamId]) -> Vec<f64> {
        ids.iter().flat_map(|&id| self.param_or_zeros(store, id).to_f64_vec()).collect()
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    //! Finite-difference harness for single ops.
    use super::*;
    use crate::oracle::finite_diff_grad;

    /// Checks the gradient of `sum(w ⊙ op(inputs))` for a fixed random weight
    /// `w`, against central differences, for every input.
    pub fn check_op(inputs: &[Tensor<f64>], op: impl Fn(&mut Graph<'_, f64>, &[NodeId]) -> NodeId, tol: f64) {
        let store = ParamStore::<f64>::new();
        let probe = {
            let mut g = Graph::inference(&store);
            let ids: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let out = op(&mut g, &ids);
            g.value(out).clone()
        };
        let weights: Vec<f64> = (0..probe.numel()).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 5.0 + 0.05).collect();
        let weights = Tensor::<f64>::from_vec(probe.shape(), weights).unwrap();

        let eval = |vals: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::inference(&store);
            let ids: Vec<_> = vals.iter().map(|t| g.input(t.clone())).collect();
            let out = op(&mut g, &ids);
            g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };

        let mut g = Graph::new(&store);
        let ids: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = op(&mut g, &ids);
        let w = g.input(weights.clone());
        let prod = g.mul(out, w);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);

        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.node(ids[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            let numeric = finite_diff_grad(
                |x: &[f64]| {
                    let mut vals = inputs.to_vec();
                    vals[k] = Tensor::from_vec(t.shape(), x.to_vec()).unwrap();
                    eval(&vals)
                },
                t.data(),
                1e-6,
            )
            .unwrap();
            for (i, (a, n)) in analytic.data().iter().zip(&numeric).enumerate() {
                let err = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
                assert!(err < tol, "input {k} coord {i}: analytic {a} numeric {n}");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_accumulates_over_reuse() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let z = g.add(y, x);
        let grads = g.backward(z);
        assert_eq!(grads.node(x).unwrap().item(), 7.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.variable(Tensor::scalar(2.0));
        let d = g.detach(x);
        let y = g.mul(x, d);
        let grads = g.backward(y);
        assert_eq!(grads.node(x).unwrap().item(), 2.0);
    }

    #[test]
    fn inference_graph_keeps_no_closures() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let x = g.variable(Tensor::scalar(2.0));
        let y = g.exp(x);
        assert!(!g.requires_grad(y));
    }

    #[test]
    fn frozen_params_are_constants() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("frozen", Tensor::scalar(1.5), ParamGroup::Frozen);
        let q = store.add("flow", Tensor::scalar(2.0), ParamGroup::Flow);
        let mut g = Graph::new(&store);
        let a = g.param(p);
        let b = g.param(q);
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert!(grads.param(p).is_none());
        assert_eq!(grads.param(q).unwrap().item(), 1.5);
    }
}
