use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Index of a node on a [`Tape`]. Inputs always carry smaller ids than the
/// nodes computed from them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

/// Backward rule of one recorded operation: receives the upstream gradient
/// of the node's output and accumulates into its inputs through the sink.
pub type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink<'_>)>;

struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Define-by-run gradient tape. A fresh tape is built for every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor living on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a tensor that never receives gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, None)
    }

    /// Records a differentiable leaf.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), true, None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Records the output of an operation. The backward rule is kept only
    /// when at least one input is differentiable.
    pub fn record<'t, F>(
        &'t self,
        shape: Vec<usize>,
        value: Vec<f64>,
        inputs: &[Var<'t>],
        backward: F,
    ) -> Var<'t>
    where
        F: Fn(&[f64], &mut GradSink<'_>) + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        let backward: Option<BackwardFn> =
            if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(shape, value, requires_grad, backward)
    }

    fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node { shape, value: Rc::new(value), requires_grad, backward });
        Var { tape: self, id }
    }

    /// Reverse-mode sweep from a scalar loss. Every node is visited at most
    /// once, in reverse recording order.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        assert!(std::ptr::eq(self, loss.tape), "loss recorded on another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id.0];
        if root.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        if !root.requires_grad {
            return Err(TensorError::Contract(
                "backward called on a tensor detached from the tape".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.id.0 + 1);
        grads.resize_with(loss.id.0 + 1, || None);
        grads[loss.id.0] = Some(vec![1.0]);
        for i in (0..=loss.id.0).rev() {
            let Some(upstream) = grads[i].take() else { continue };
            if let Some(rule) = &nodes[i].backward {
                let (inputs, _) = grads.split_at_mut(i);
                let mut sink = GradSink { grads: inputs, nodes: &nodes[..i] };
                rule(&upstream, &mut sink);
            }
            grads[i] = Some(upstream);
        }
        Ok(Gradients { grads })
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Write access to the gradients of a node's inputs during backward.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
}

impl GradSink<'_> {
    pub fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulation buffer for `id`, or `None` when `id` is not differentiable.
    pub fn slot(&mut self, id: NodeId) -> Option<&mut [f64]> {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[id.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }
}

/// Result of [`Tape::backward`]: one optional gradient buffer per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; v.numel()],
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id.0].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id.0].value.len()
    }

    pub fn value(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id.0].value)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id.0].requires_grad
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id.0];
        Tensor::new(n.shape.clone(), n.value.as_ref().clone()).expect("tape node shape")
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar");
        v[0]
    }

    /// Copy of this value as a new constant: no gradient flows back through it.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.to_tensor())
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id.0, self.shape())
    }
}
