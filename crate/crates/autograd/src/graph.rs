use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use crate::Float;

/// Backward rule of one node: receives the gradient of the node's output and a
/// mask telling which parents need a gradient, and returns one entry per parent.
pub(crate) type GradFn<F> = Box<dyn Fn(&ArrayD<F>, &[bool]) -> Vec<Option<ArrayD<F>>>>;

struct Node<F: Float> {
    value: Arc<ArrayD<F>>,
    parents: Vec<usize>,
    grad_fn: Option<GradFn<F>>,
    requires_grad: bool,
}

/// Define-by-run tape. Every operation on a [`Var`] appends a node; calling
/// [`Graph::backward`] walks the tape in reverse.
///
/// A graph is built for one forward pass and dropped afterwards, which
/// releases the shared parameter buffers it borrowed.
pub struct Graph<F: Float> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F: Float> {
    pub(crate) graph: &'g Graph<F>,
    pub(crate) id: usize,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.leaf(Arc::new(value), false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.leaf(Arc::new(value), true)
    }

    /// Leaf sharing an existing buffer, e.g. a parameter owned by a store.
    pub fn leaf(&self, value: Arc<ArrayD<F>>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            grad_fn: None,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: ArrayD<F>, parents: Vec<usize>, grad_fn: GradFn<F>) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            parents,
            grad_fn: if requires_grad { Some(grad_fn) } else { None },
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<ArrayD<F>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar root (seed gradient 1).
    pub fn backward(&self, root: Var<'_, F>) -> Gradients<F> {
        let value = self.value_of(root.id);
        assert_eq!(value.len(), 1, "backward root must be a scalar, got shape {:?}", value.shape());
        let seed = ArrayD::from_elem(value.raw_dim(), F::one());
        self.backward_with(root, seed)
    }

    /// Reverse pass with an explicit seed gradient of the root's shape
    /// (a vector-Jacobian product).
    pub fn backward_with(&self, root: Var<'_, F>, seed: ArrayD<F>) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.shape(),
            seed.shape(),
            "seed gradient shape must match the root"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(seed);
        let mut leaves = HashMap::new();
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let Some(grad_fn) = &node.grad_fn else {
                leaves.insert(id, grad);
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = grad_fn(&grad, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&parent, pg), need) in node.parents.iter().zip(parent_grads).zip(&mask) {
                let (Some(pg), true) = (pg, *need) else {
                    continue;
                };
                debug_assert_eq!(pg.shape(), nodes[parent].value.shape(), "gradient shape mismatch");
                match &mut grads[parent] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { by_id: leaves }
    }
}

/// Gradients of the leaves reached by a reverse pass.
pub struct Gradients<F: Float> {
    by_id: HashMap<usize, ArrayD<F>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of a leaf, or `None` when the leaf did not influence the root
    /// (or does not require a gradient).
    pub fn get(&self, var: Var<'_, F>) -> Option<&ArrayD<F>> {
        self.by_id.get(&var.id)
    }

    /// Like [`Gradients::get`] but returns zeros when the leaf was unreached.
    pub fn get_or_zeros(&self, var: Var<'_, F>) -> ArrayD<F> {
        match self.by_id.get(&var.id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(&var.shape())),
        }
    }

    pub fn take(&mut self, var: Var<'_, F>) -> Option<ArrayD<F>> {
        self.by_id.remove(&var.id)
    }
}

impl<'g, F: Float> Var<'g, F> {
    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<ArrayD<F>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn ndim(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.ndim()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// Owned copy of the value.
    pub fn to_array(&self) -> ArrayD<F> {
        (*self.value()).clone()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> F {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    /// Cuts the tape: same value, no gradient flows back through it.
    pub fn detach(&self) -> Var<'g, F> {
        self.graph.leaf(self.value(), false)
    }
}
