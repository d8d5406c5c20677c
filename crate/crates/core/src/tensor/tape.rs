use std::cell::{Ref, RefCell};
use std::fmt;

use super::{Real, Result, Tensor, TensorError};

/// Recorded operation producing a node. Parent references are node ids,
/// always smaller than the node's own id, so a reverse sweep over the node
/// list is a valid reverse topological order.
#[derive(Clone)]
pub(crate) enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Relu(usize),
    LeakyRelu(usize, F),
    MinConst(usize, F),
    Abs(usize),
    Square(usize),
    Scale(usize, F),
    AddConst(usize),
    Exp(usize),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Sum {
        x: usize,
        axis: Option<usize>,
    },
    Mean {
        x: usize,
        axis: Option<usize>,
    },
    Std {
        x: usize,
        axis: Option<usize>,
        ddof: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    Normalize {
        x: usize,
        eps: F,
    },
    Conv1d {
        x: usize,
        w: usize,
        kernel: usize,
        stride: usize,
    },
    GatherRows {
        x: usize,
        index: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    Reshape(usize),
}

pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
}

/// Computation tape: an append-only list of nodes in creation order.
///
/// A tape is confined to one thread. Leaves created with
/// `requires_grad = true` keep accumulated gradients across backward calls;
/// intermediate adjoints are discarded after each sweep.
pub struct Tape<F: Real> {
    pub(crate) nodes: RefCell<Vec<Node<F>>>,
    grads: RefCell<Vec<Option<Vec<F>>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    pub(crate) fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grads(&self) {
        self.grads.borrow_mut().clear();
    }

    fn backward_from(&self, loss: usize) -> Result<()> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss].value.shape().to_vec();
        if nodes[loss].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut adj: Vec<Option<Vec<F>>> = vec![None; loss + 1];
        adj[loss] = Some(vec![F::one()]);
        let mut store = self.grads.borrow_mut();
        if store.len() < nodes.len() {
            store.resize(nodes.len(), None);
        }
        for id in (0..=loss).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut store[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            super::ops::backward_op(&nodes, id, &g, &mut adj);
        }
        Ok(())
    }

    fn grad_of(&self, id: usize) -> Option<Tensor<F>> {
        let store = self.grads.borrow();
        let g = store.get(id)?.as_ref()?;
        let shape = self.nodes.borrow()[id].value.shape().to_vec();
        Some(Tensor::new(shape, g.clone()).expect("grad shape"))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: usize,
}

impl<F: Real> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t, F: Real> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value_ref(&self) -> Ref<'t, Tensor<F>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Tensor<F> {
        self.value_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        let v = self.value_ref();
        assert_eq!(v.len(), 1, "item() on non-scalar {:?}", v.shape());
        v.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Accumulated gradient of a `requires_grad` leaf, if any backward pass
    /// has reached it.
    pub fn grad(&self) -> Option<Tensor<F>> {
        self.tape.grad_of(self.id)
    }

    /// Accumulates d(self)/d(leaf) into every reachable trainable leaf.
    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }

    /// Copy of the value as a new constant leaf.
    pub fn detach(&self) -> Var<'t, F> {
        let v = self.value();
        self.tape.constant(v)
    }
}
