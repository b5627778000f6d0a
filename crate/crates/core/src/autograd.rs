//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is the tape: every operation on a [`Var`] computes its value
//! eagerly and appends a node holding the value, its parents and an adjoint
//! closure. Node ids increase in execution order, so [`Graph::backward`]
//! walks ids downward and visits operations in exact reverse order. A new
//! graph is built for every forward pass.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, Activation};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Adjoint of one operation: receives the output gradient and a mask of
/// which parents need a gradient, returns one optional gradient per parent.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    record: bool,
}

#[derive(Clone, Copy)]
pub struct Var<'g, T: Element> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            record: true,
        }
    }

    /// A graph that evaluates values but records no adjoints.
    pub fn no_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node {
            value: Arc::new(value),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_arc(Arc::new(value))
    }

    fn leaf_arc(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.push_node(Node {
            value,
            requires_grad: self.record,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// The leaf bound to a stored parameter; repeated calls return the same leaf
    /// so every use of the parameter accumulates into one gradient.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let v = self.leaf_arc(store.value(id).clone());
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// Appends an operation with a caller-supplied adjoint.
    pub fn custom<'g>(
        &'g self,
        parents: &[Var<'g, T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'g, T> {
        let requires_grad = self.record && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push_node(Node {
            value: Arc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        })
    }

    /// Back-propagates from a scalar. Gradients of every reachable leaf are
    /// summed over all uses.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let need: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &need);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &needed) in node.parents.iter().zip(parent_grads).zip(&need) {
                let Some(pg) = pg else { continue };
                if !needed {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "adjoint shape");
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p] = Some(pg),
                }
            }
        }
        let params = self.params.borrow().iter().map(|(&pid, &node)| (pid, node)).collect();
        Ok(Gradients { grads, params })
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let values: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = ops::concat_channels(&refs)?;
        let widths: Vec<usize> = values.iter().map(|v| v.channels()).collect();
        Ok(self.custom(parts, out, move |g, _| {
            ops::split_channels(g, &widths).into_iter().map(Some).collect()
        }))
    }

    /// `g ⊙ a + (1 − g) ⊙ b`, evaluated literally in that form.
    pub fn gate_blend<'g>(&'g self, g: Var<'g, T>, a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
        let (gv, av, bv) = (g.value(), a.value(), b.value());
        av.expect_same_shape(&gv, "gate_blend")?;
        bv.expect_same_shape(&gv, "gate_blend")?;
        let one = T::one();
        let out = Tensor::from_fn(gv.shape(), |i| {
            let gi = gv.data()[i];
            gi * av.data()[i] + (one - gi) * bv.data()[i]
        });
        Ok(self.custom(&[g, a, b], out, move |dy, need| {
            let dg = need[0].then(|| {
                Tensor::from_fn(dy.shape(), |i| dy.data()[i] * (av.data()[i] - bv.data()[i]))
            });
            let da = need[1].then(|| Tensor::from_fn(dy.shape(), |i| dy.data()[i] * gv.data()[i]));
            let db = need[2].then(|| Tensor::from_fn(dy.shape(), |i| dy.data()[i] * (one - gv.data()[i])));
            vec![dg, da, db]
        }))
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Element> Gradients<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads[v.id].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, node)| self.grads[node].as_ref())
    }

    /// Parameter gradients in parameter-id order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<(ParamId, &Tensor<T>)> = self
            .params
            .iter()
            .filter_map(|&(p, node)| self.grads[node].as_ref().map(|g| (p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }

    /// Adds every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in self.params() {
            store.accumulate_grad(id, g);
        }
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = self.value().add(&other.value())?;
        Ok(self.graph.custom(&[self, other], out, |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]
        }))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = self.value().sub(&other.value())?;
        Ok(self.graph.custom(&[self, other], out, |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.map(|v| -v))]
        }))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let out = a.mul(&b)?;
        Ok(self.graph.custom(&[self, other], out, move |g, need| {
            vec![
                need[0].then(|| g.mul(&b).expect("shape")),
                need[1].then(|| g.mul(&a).expect("shape")),
            ]
        }))
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        let out = self.value().scale(s);
        self.graph.custom(&[self], out, move |g, _| vec![Some(g.scale(s))])
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn exp(self) -> Var<'g, T> {
        let out = self.value().map(|v| v.exp());
        let y = Arc::new(out.clone());
        self.graph
            .custom(&[self], out, move |g, _| vec![Some(g.mul(&y).expect("shape"))])
    }

    pub fn act(self, kind: Activation) -> Var<'g, T> {
        let x = self.value();
        let out = ops::activation(&x, kind);
        self.graph.custom(&[self], out, move |g, _| {
            vec![Some(Tensor::from_fn(g.shape(), |i| {
                g.data()[i] * kind.derivative(x.data()[i])
            }))]
        })
    }

    pub fn silu(self) -> Var<'g, T> {
        self.act(Activation::Silu)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.act(Activation::Sigmoid)
    }

    pub fn softplus(self) -> Var<'g, T> {
        self.act(Activation::Softplus)
    }

    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let (x, wv) = (self.value(), w.value());
        let bv = b.map(|b| b.value());
        let out = ops::linear(&x, &wv, bv.as_deref())?;
        let mut parents = vec![self, w];
        parents.extend(b);
        let has_bias = b.is_some();
        Ok(self.graph.custom(&parents, out, move |g, need| {
            let (dx, dw, db) = ops::linear_backward(&x, &wv, g, [need[0], need[1], has_bias && need[2]]);
            let mut v = vec![dx, dw];
            if has_bias {
                v.push(db);
            }
            v
        }))
    }

    pub fn conv2d_depthwise(self, kernel: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let (x, kv) = (self.value(), kernel.value());
        let bv = bias.map(|b| b.value());
        let out = ops::conv2d_depthwise(&x, &kv, bv.as_deref())?;
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.graph.custom(&parents, out, move |g, need| {
            let (dx, dk, db) =
                ops::conv2d_depthwise_backward(&x, &kv, g, [need[0], need[1], has_bias && need[2]]);
            let mut v = vec![dx, dk];
            if has_bias {
                v.push(db);
            }
            v
        }))
    }

    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        let gv = gamma.value();
        let (out, cache) = ops::layer_norm_cached(&self.value(), &gv, &beta.value(), eps)?;
        Ok(self.graph.custom(&[self, gamma, beta], out, move |g, need| {
            let (dx, dg, db) = ops::layer_norm_backward(&cache, &gv, g, [need[0], need[1], need[2]]);
            vec![dx, dg, db]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let old = self.shape();
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.graph.custom(&[self], out, move |g, _| {
            vec![Some(g.clone().reshape(&old).expect("reshape back"))]
        }))
    }

    pub fn permute_tokens(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let out = ops::permute_tokens(&self.value(), perm)?;
        let inv = ops::invert_permutation(perm);
        Ok(self.graph.custom(&[self], out, move |g, _| {
            vec![Some(ops::permute_tokens(g, &inv).expect("inverse permutation"))]
        }))
    }

    pub fn depth_to_space(self, r: usize) -> Result<Var<'g, T>> {
        let out = ops::depth_to_space(&self.value(), r)?;
        Ok(self.graph.custom(&[self], out, move |g, _| {
            vec![Some(ops::space_to_depth(g, r).expect("inverse rearrangement"))]
        }))
    }

    pub fn space_to_depth(self, r: usize) -> Result<Var<'g, T>> {
        let out = ops::space_to_depth(&self.value(), r)?;
        Ok(self.graph.custom(&[self], out, move |g, _| {
            vec![Some(ops::depth_to_space(g, r).expect("inverse rearrangement"))]
        }))
    }

    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.graph
            .custom(&[self], out, move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    /// `Σ w ⊙ x` for a constant weight tensor; scalarizes outputs for gradient checks.
    pub fn dot_const(self, w: &Tensor<T>) -> Result<Var<'g, T>> {
        let x = self.value();
        x.expect_same_shape(w, "dot_const")?;
        let out = Tensor::scalar(x.mul(w)?.sum());
        let w = w.clone();
        Ok(self.graph.custom(&[self], out, move |g, _| vec![Some(w.scale(g.item()))]))
    }
}
