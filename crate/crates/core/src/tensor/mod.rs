//! Dense f32 tensors with tape-based reverse-mode differentiation.
//!
//! Storage is 32-bit, reductions and inner products accumulate in 64-bit.
//! Every op records its inputs and a backward closure when any input
//! participates in a gradient computation; `backward` replays the tape in
//! reverse topological order.

mod gradcheck;
mod ops;
mod optim;

pub use gradcheck::{grad_check, grad_check_params, grad_check_params_ref, grad_check_ref};
pub use ops::GradientAxis;
pub use optim::{zero_grad, Adam, AdamConfig};

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Backward closure: maps the gradient at this node to one gradient buffer
/// per parent, in parent order.
type BackFn = Box<dyn Fn(&[f32]) -> Vec<Vec<f32>>>;

struct Inner {
    shape: Vec<usize>,
    data: Rc<RefCell<Vec<f32>>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f32>>>,
    parents: Vec<Tensor>,
    backward: Option<BackFn>,
    consumed: Cell<bool>,
}

/// Dense N-dimensional float tensor, row-major.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor(Rc::new(Inner {
            shape: shape.to_vec(),
            data: Rc::new(RefCell::new(data)),
            requires_grad: false,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            consumed: Cell::new(false),
        })))
    }

    /// Leaf tensor that collects gradients.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        Ok(Tensor(Rc::new(Inner {
            shape: t.0.shape.clone(),
            data: t.0.data.clone(),
            requires_grad: true,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            consumed: Cell::new(false),
        })))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("consistent by construction")
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("consistent by construction")
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::new(&[1], vec![value]).expect("consistent by construction")
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.borrow().clone()
    }

    /// In-place overwrite of the raw buffer. Only meaningful for leaves
    /// (optimizer steps, finite-difference probes).
    pub fn set_data(&self, data: &[f32]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Add an externally computed gradient (custom ops with analytic
    /// backward paths that bypass the tape).
    pub fn accumulate_grad(&self, g: &[f32]) {
        assert_eq!(g.len(), self.numel(), "accumulate_grad length mismatch");
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// New leaf sharing this tensor's storage, cut off from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor(Rc::new(Inner {
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            requires_grad: false,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            consumed: Cell::new(false),
        }))
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.0.requires_grad || self.0.backward.is_some()
    }

    /// Shared handle to the raw storage, used by backward closures.
    pub(crate) fn storage(&self) -> Rc<RefCell<Vec<f32>>> {
        self.0.data.clone()
    }

    /// Build an op result, recording parents and the backward closure only
    /// when some input participates in differentiation.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f32>,
        inputs: &[&Tensor],
        back: impl Fn(&[f32]) -> Vec<Vec<f32>> + 'static,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let track = inputs.iter().any(|t| t.needs_grad());
        Tensor(Rc::new(Inner {
            shape,
            data: Rc::new(RefCell::new(data)),
            requires_grad: false,
            grad: RefCell::new(None),
            parents: if track { inputs.iter().map(|t| (*t).clone()).collect() } else { Vec::new() },
            backward: if track { Some(Box::new(back)) } else { None },
            consumed: Cell::new(false),
        }))
    }

    /// Reverse-mode sweep from a scalar loss. Accumulates gradients into
    /// every `requires_grad` leaf reachable from the loss. Forward buffers
    /// are never mutated.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.0.shape.clone()));
        }
        if self.0.consumed.get() {
            return Err(Error::GraphConsumed);
        }
        self.0.consumed.set(true);

        // Iterative post-order DFS for a topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const Inner> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.0));
        while let Some((node, child)) = stack.pop() {
            if child < node.0.parents.len() {
                stack.push((node.clone(), child + 1));
                let parent = node.0.parents[child].clone();
                let key = Rc::as_ptr(&parent.0);
                if visited.insert(key) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        let mut grads: HashMap<*const Inner, Vec<f32>> = HashMap::new();
        grads.insert(Rc::as_ptr(&self.0), vec![1.0]);

        for node in order.iter().rev() {
            let key = Rc::as_ptr(&node.0);
            let Some(grad_out) = grads.get(&key).cloned() else { continue };
            if node.0.requires_grad {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(existing) => {
                        for (e, g) in existing.iter_mut().zip(&grad_out) {
                            *e += g;
                        }
                    }
                    None => *slot = Some(grad_out.clone()),
                }
            }
            if let Some(back) = &node.0.backward {
                let parent_grads = back(&grad_out);
                debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(pg.len(), parent.numel());
                    let pkey = Rc::as_ptr(&parent.0);
                    match grads.get_mut(&pkey) {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&pg) {
                                *a += g;
                            }
                        }
                        None => {
                            grads.insert(pkey, pg);
                        }
                    }
                }
            }
            grads.remove(&key);
        }
        Ok(())
    }
}

// ── Shape helpers ────────────────────────────────────────────────────

/// NumPy-style trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < a.len() { a[a.len() - 1 - i] } else { 1 };
        let db = if i < b.len() { b[b.len() - 1 - i] } else { 1 };
        out[rank - 1 - i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::ShapeMismatch { left: a.to_vec(), right: b.to_vec() });
        };
    }
    Ok(out)
}

/// Row-major strides, with stride 0 on dimensions broadcast up to `out`.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; out.len()];
    let mut acc = 1usize;
    let offset = out.len() - shape.len();
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 && out[offset + i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Sum a gradient over the dimensions that were broadcast from `src_shape`
/// up to `out_shape`.
pub(crate) fn reduce_broadcast(grad: &[f32], out_shape: &[usize], src_shape: &[usize]) -> Vec<f32> {
    if out_shape == src_shape {
        return grad.to_vec();
    }
    let src_numel: usize = src_shape.iter().product();
    let mut out = vec![0.0f32; src_numel];
    let strides = broadcast_strides(src_shape, out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    for &g in grad {
        let mut src_off = 0usize;
        for (d, &i) in idx.iter().enumerate() {
            src_off += i * strides[d];
        }
        out[src_off] += g;
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[3, 1, 4], &[2, 4]).unwrap(), vec![3, 2, 4]);
        assert_eq!(broadcast_shape(&[5], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shape(&[3], &[4]).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_consumes_graph() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.sum().unwrap();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::GraphConsumed)));
    }

    #[test]
    fn sum_grad_is_ones() {
        let x = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let loss = x.sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_grad_is_2x() {
        let x = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_does_not_mutate_forward_values() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.silu().unwrap();
        let snapshot = y.to_vec();
        let loss = y.sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(y.to_vec(), snapshot);
        assert_eq!(x.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn grad_accumulates_across_shared_use() {
        // loss = sum(x + x) => grad 2
        let x = Tensor::param(&[2], vec![1.0, 1.0]).unwrap();
        let loss = x.add(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }
}
