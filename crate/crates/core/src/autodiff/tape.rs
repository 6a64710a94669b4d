use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::ops::Op;
use super::{ParamId, ParamStore, Result, Tensor, TensorError};

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) param: Option<ParamId>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: HashMap<usize, usize>,
    faults: usize,
}

/// Execution record of one forward pass.
pub struct Tape {
    inner: RefCell<Inner>,
    grad_enabled: bool,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("faults", &inner.faults)
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: RefCell::default(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it requires grad.
    pub fn inference() -> Self {
        Self {
            inner: RefCell::default(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Count of forward results holding NaN/+inf, plus fully masked softmax
    /// rows.
    pub fn faults(&self) -> usize {
        self.inner.borrow().faults
    }

    pub(crate) fn note_fault(&self) {
        self.inner.borrow_mut().faults += 1;
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let id = self.push_node(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
            param: None,
        });
        Var { tape: self, id }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Records a parameter. Each parameter tensor gets one leaf per tape.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let shared = store.shared(id);
        let key = Rc::as_ptr(&shared) as usize;
        if let Some(&node) = self.inner.borrow().params.get(&key) {
            return Var { tape: self, id: node };
        }
        let node = self.push_node(Node {
            value: shared,
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
            param: Some(id),
        });
        self.inner.borrow_mut().params.insert(key, node);
        Var { tape: self, id: node }
    }

    fn push_node(&self, node: Node) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        if value.data().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            self.note_fault();
        }
        let requires_grad = self.grad_enabled && {
            let inner = self.inner.borrow();
            op.inputs().iter().any(|&i| inner.nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        let id = self.push_node(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Var { tape: self, id }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Reverse pass from a scalar loss. The tape is consumed: its nodes are
    /// released and any further use of its vars panics.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = std::mem::take(&mut self.inner.borrow_mut().nodes);
        if nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let loss_shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        let mut leaves: HashMap<usize, Tensor> = HashMap::new();
        let mut params = Vec::new();
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                if let Some(p) = node.param {
                    params.push((p, i));
                }
                leaves.insert(i, t);
                continue;
            }
            node.op.backward(&nodes, i, &g, &mut |input: usize, contribution: Vec<f64>| {
                if !nodes[input].requires_grad {
                    return;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(contribution) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            });
        }
        params.sort_unstable();
        Ok(Gradients { leaves, params })
    }
}

/// Gradients of every requires-grad leaf reached by a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|&(p, node)| (p, &self.leaves[&node]))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}
