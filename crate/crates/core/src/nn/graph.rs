//! Reverse-mode accumulation over a recorded operation list.
//!
//! Every forward call appends a node holding its output value and, when any
//! input needs a gradient, the adjoint rule. `backward` walks the list in
//! reverse once. Parameters enter the graph through [`Graph::param`] and
//! their gradients are collected by id.

use std::collections::HashMap;

use super::{ParamStore, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Adjoint rule of one recorded operation.
pub trait Backward<T: Real> {
    /// Returns one gradient per input; entries for inputs with
    /// `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    training: bool,
    record: bool,
}

impl<T: Real> Graph<T> {
    /// Graph that records adjoints (training or gradient checking).
    pub fn new(training: bool) -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), training, record: true }
    }

    /// Evaluation graph: dropout disabled, no adjoints recorded.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), training: false, record: false }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Vec::new(), None, false)
    }

    /// Leaf that receives a gradient (used by gradient checks on inputs).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let rec = self.record;
        self.push(t, Vec::new(), None, rec)
    }

    /// Binds parameter `id` from `store`. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: &str) -> Var {
        if let Some(&v) = self.params.get(id) {
            return v;
        }
        let p = store.get(id).unwrap_or_else(|| panic!("unknown parameter `{id}`"));
        let needs = self.record && p.trainable;
        let v = self.push(p.value.clone(), Vec::new(), None, needs);
        self.params.insert(id.to_string(), v);
        v
    }

    /// Records an operation output. `op` is dropped when no input needs a
    /// gradient or the graph does not record.
    pub fn record(&mut self, value: Tensor<T>, inputs: &[Var], op: impl Backward<T> + 'static) -> Var {
        let needs = self.record && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        if needs {
            self.push(value, inputs.to_vec(), Some(Box::new(op)), true)
        } else {
            self.push(value, Vec::new(), None, false)
        }
    }

    fn push(&mut self, value: Tensor<T>, inputs: Vec<Var>, op: Option<Box<dyn Backward<T>>>, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced at node {}", self.nodes.len());
        self.nodes.push(Node { value, inputs, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(op) = &node.op else {
                if node.needs_grad {
                    leaves.insert(i, g);
                }
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect();
            let input_grads = op.backward(&inputs, &node.value, &g, &needs);
            for ((v, ig), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                if !need {
                    continue;
                }
                let Some(ig) = ig else { continue };
                debug_assert_eq!(ig.shape(), self.nodes[v.0].value.shape(), "gradient shape at node {}", v.0);
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let params = self.params.iter().map(|(k, v)| (k.clone(), *v)).collect();
        Gradients { leaves, params }
    }
}

/// Gradients of leaf nodes after [`Graph::backward`].
pub struct Gradients<T: Real> {
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: &str) -> Option<&Tensor<T>> {
        self.params.get(id).and_then(|v| self.leaves.get(&v.0))
    }

    /// Adds every parameter gradient into `store`.
    pub fn accumulate(&self, store: &mut ParamStore<T>) {
        for (id, v) in &self.params {
            if let (Some(g), Some(p)) = (self.leaves.get(&v.0), store.get_mut(id)) {
                p.grad.add_assign(g);
            }
        }
    }
}
