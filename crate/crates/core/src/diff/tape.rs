use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink<'_>)>;

struct Node {
    shape: Vec<usize>,
    value: Rc<[f64]>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Records primitive operations in execution order for reverse-mode
/// differentiation.
///
/// Nodes are appended as operations run, so the node list is always in
/// topological order. A tape supports exactly one backward pass.
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("consumed", &inner.consumed)
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    sizes: &'a [usize],
    wants: &'a [bool],
}

impl GradSink<'_> {
    pub fn wants(&self, id: NodeId) -> bool {
        self.wants[id]
    }

    /// Runs `f` on the (zero-initialised on first use) gradient buffer of `id`.
    pub fn with(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.wants[id] {
            return;
        }
        let buf = self.grads[id].get_or_insert_with(|| vec![0.0; self.sizes[id]]);
        f(buf);
    }

    pub fn add(&mut self, id: NodeId, g: &[f64]) {
        self.with(id, |buf| buf.iter_mut().zip(g).for_each(|(a, b)| *a += b));
    }
}

/// Result of a backward pass: one gradient buffer per node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn wrt(&self, var: Var<'_>) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; var.len()])
    }

    /// Adds the gradient of `var` into `tensor.grad`.
    pub fn accumulate_into(&self, var: Var<'_>, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![0.0; tensor.len()]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Non-differentiable input.
    pub fn constant(&self, shape: &[usize], values: Vec<f64>) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.raw(shape.to_vec(), values.into(), false, None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(&[], vec![value])
    }

    /// Records a copy of `t`; differentiable iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.raw(
            t.shape().to_vec(),
            t.values().into(),
            t.requires_grad(),
            None,
        )
    }

    /// Records a differentiable leaf with the given values.
    pub fn variable(&self, shape: &[usize], values: Vec<f64>) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.raw(shape.to_vec(), values.into(), true, None)
    }

    /// Records the output of a primitive. `backward` receives the output
    /// gradient and pushes input gradients into the sink; it is dropped when
    /// no input requires a gradient.
    pub fn record<'t>(
        &'t self,
        shape: Vec<usize>,
        value: Rc<[f64]>,
        inputs: &[Var<'t>],
        backward: impl Fn(&[f64], &mut GradSink<'_>) + 'static,
    ) -> Var<'t> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = {
            let inner = self.inner.borrow();
            inputs.iter().any(|v| {
                debug_assert!(std::ptr::eq(v.tape, self), "mixing tapes");
                inner.nodes[v.id].requires_grad
            })
        };
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.raw(shape, value, requires_grad, backward)
    }

    fn raw(
        &self,
        shape: Vec<usize>,
        value: Rc<[f64]>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            value,
            requires_grad,
            backward,
        });
        Var { tape: self, id }
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Rc<[f64]> {
        self.inner.borrow().nodes[id].value.clone()
    }

    pub(crate) fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.inner.borrow().nodes[id].shape.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: NodeId) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Reverse pass from a scalar root. The tape is consumed: a second call
    /// returns [`Error::TapeConsumed`].
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        let root_len = inner.nodes[root.id].value.len();
        if root_len != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                inner.nodes[root.id].shape
            )));
        }
        inner.consumed = true;

        let n = inner.nodes.len();
        let sizes: Vec<usize> = inner.nodes.iter().map(|n| n.value.len()).collect();
        let wants: Vec<bool> = inner.nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if wants[root.id] {
            grads[root.id] = Some(vec![1.0]);
        }
        let backwards: Vec<Option<BackwardFn>> =
            inner.nodes.iter_mut().map(|n| n.backward.take()).collect();
        drop(inner);

        for id in (0..=root.id).rev() {
            let Some(bw) = &backwards[id] else { continue };
            let Some(g) = grads[id].take() else { continue };
            {
                let mut sink = GradSink {
                    grads: &mut grads,
                    sizes: &sizes,
                    wants: &wants,
                };
                bw(&g, &mut sink);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
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
        self.tape.shape_of(self.id)
    }

    pub fn value(&self) -> Rc<[f64]> {
        self.tape.value_of(self.id)
    }

    pub fn len(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Single value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value()[0]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.shape(), self.value().to_vec())
            .expect("tape nodes always hold consistent shapes")
    }

    /// Same values, no gradient path.
    pub fn detach(&self) -> Var<'t> {
        self.tape.raw(self.shape(), self.value(), false, None)
    }
}
