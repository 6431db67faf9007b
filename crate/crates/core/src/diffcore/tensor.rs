//! The tensor handle and the reverse-mode engine.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use super::TensorError;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` with gradient recording disabled on this thread.
///
/// Forward passes inside the closure build no graph, which keeps pure
/// evaluation (metrics, statistics collection) allocation-light.
pub fn with_no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Per-pass transient gradient storage, keyed by node identity.
///
/// Keeping propagation state out of the tensors themselves makes repeated
/// backward passes accumulate leaf gradients correctly instead of
/// re-propagating stale interior gradients.
pub(crate) struct GradSink {
    map: HashMap<usize, Vec<f64>>,
}

impl GradSink {
    fn new() -> Self {
        GradSink { map: HashMap::new() }
    }

    /// Accumulate a contribution toward `t`, if the pass needs to reach it.
    pub(crate) fn add(&mut self, t: &Tensor, contribution: &[f64]) {
        if !t.needs_grad() {
            return;
        }
        match self.map.entry(t.ptr_id()) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                for (g, c) in e.get_mut().iter_mut().zip(contribution) {
                    *g += c;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(contribution.to_vec());
            }
        }
    }

    fn take(&mut self, t: &Tensor) -> Option<Vec<f64>> {
        self.map.remove(&t.ptr_id())
    }
}

/// Backward rule recorded on an op's output.
///
/// `backward` receives the output's values and this pass's gradient and
/// pushes parent contributions into the sink. Implementations must compute
/// contributions into locals before touching the sink so that aliased
/// parents (the same tensor appearing twice) stay sound.
pub(crate) trait BackwardOp {
    fn parents(&self) -> Vec<Tensor>;
    fn backward(&self, out_values: &[f64], out_grad: &[f64], sink: &mut GradSink);
}

pub(crate) struct TensorInner {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    /// True when a backward pass must reach this tensor (leaf that requires
    /// grad, or interior node with such an ancestor).
    pub needs_grad: bool,
    pub op: Option<Box<dyn BackwardOp>>,
}

/// Dense row-major f64 tensor participating in a differentiable graph.
///
/// Cloning is cheap: handles share storage. Values are immutable after
/// construction except through [`Tensor::set_values`] /
/// [`Tensor::update_values`], which are meant for optimizer updates on
/// leaves between graph builds.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorInner>>,
}

impl Tensor {
    fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            values.len(),
            numel,
            "tensor construction: {} values for shape {:?}",
            values.len(),
            shape
        );
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                shape,
                values,
                grad: None,
                requires_grad,
                needs_grad: requires_grad && grad_enabled(),
                op: None,
            })),
        }
    }

    /// A differentiable leaf (network parameter).
    pub fn parameter(shape: &[usize], values: Vec<f64>) -> Self {
        Tensor::new(shape.to_vec(), values, true)
    }

    /// A non-differentiable leaf (input data).
    pub fn constant(shape: &[usize], values: Vec<f64>) -> Self {
        Tensor::new(shape.to_vec(), values, false)
    }

    /// A scalar constant with empty shape.
    pub fn scalar(v: f64) -> Self {
        Tensor::new(Vec::new(), vec![v], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::constant(shape, vec![0.0; shape.iter().product()])
    }

    /// Interior-node constructor used by ops.
    pub(crate) fn from_op(shape: Vec<usize>, values: Vec<f64>, op: Box<dyn BackwardOp>) -> Self {
        let record = grad_enabled() && op.parents().iter().any(|p| p.needs_grad());
        let t = Tensor::new(shape, values, false);
        if record {
            let mut inner = t.inner.borrow_mut();
            inner.needs_grad = true;
            inner.op = Some(op);
        }
        t
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Copy of the values.
    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    /// Run `f` over the values without copying.
    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().values)
    }

    /// The single value of a scalar tensor.
    pub fn value(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.values.len(), 1, "value() on non-scalar tensor");
        inner.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.inner.borrow().needs_grad
    }

    /// Copy of the accumulated gradient, if one has been populated.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Run `f` over the gradient without copying.
    pub fn with_grad<R>(&self, f: impl FnOnce(Option<&[f64]>) -> R) -> R {
        f(self.inner.borrow().grad.as_deref())
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite values in place (optimizer updates on leaves).
    pub fn set_values(&self, new: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.values.len(), new.len(), "set_values length mismatch");
        inner.values.copy_from_slice(new);
    }

    /// Apply `f` to the values in place (optimizer updates on leaves).
    pub fn update_values(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.borrow_mut().values);
    }

    /// A non-differentiable copy sharing no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(&self.shape(), self.values())
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(contribution.len(), inner.values.len());
        match &mut inner.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => inner.grad = Some(contribution.to_vec()),
        }
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    /// True when two handles refer to the same storage.
    pub fn same_tensor(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Reverse-mode accumulation from this scalar into every tensor on a
    /// `requires_grad` path. Repeated calls without [`Tensor::zero_grad`]
    /// accumulate.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar { shape: self.shape() });
        }
        if !self.needs_grad() {
            self.accumulate_grad(&[1.0]);
            return Ok(());
        }

        // Iterative DFS postorder: parents land before consumers, so the
        // reversed order is a valid backward schedule.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.ptr_id()) {
                continue;
            }
            stack.push((t.clone(), true));
            let inner = t.inner.borrow();
            if let Some(op) = &inner.op {
                for p in op.parents() {
                    if p.needs_grad() && !visited.contains(&p.ptr_id()) {
                        stack.push((p, false));
                    }
                }
            }
        }

        let mut sink = GradSink::new();
        sink.add(self, &[1.0]);
        for t in order.iter().rev() {
            let Some(g) = sink.take(t) else { continue };
            t.accumulate_grad(&g);
            let inner = t.inner.borrow();
            if let Some(op) = &inner.op {
                op.backward(&inner.values, &g, &mut sink);
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("values", &inner.values)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{mul, sum};

    #[test]
    fn scalar_accessors() {
        let t = Tensor::scalar(3.5);
        assert!(t.is_scalar());
        assert_eq!(t.value(), 3.5);
        assert_eq!(t.shape(), Vec::<usize>::new());
    }

    #[test]
    fn backward_on_non_scalar_is_an_error() {
        let t = Tensor::parameter(&[2], vec![1.0, 2.0]);
        assert!(matches!(t.backward(), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum(x^2), x = [1, 2] -> grad [2, 4]
        let x = Tensor::parameter(&[2], vec![1.0, 2.0]);
        let loss = sum(&mul(&x, &x).unwrap());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::parameter(&[2], vec![1.0, 2.0]);
        let loss = sum(&mul(&x, &x).unwrap());
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn disconnected_parameter_keeps_no_grad() {
        let x = Tensor::parameter(&[2], vec![1.0, 2.0]);
        let unused = Tensor::parameter(&[2], vec![5.0, 5.0]);
        let loss = sum(&mul(&x, &x).unwrap());
        loss.backward().unwrap();
        assert!(unused.grad().is_none());
    }

    #[test]
    fn shared_subexpression_gradients_add() {
        // loss = sum(x*x + x*x) -> grad 4x
        let x = Tensor::parameter(&[2], vec![1.0, 2.0]);
        let sq = mul(&x, &x).unwrap();
        let loss = sum(&crate::diffcore::add(&sq, &sq).unwrap());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::parameter(&[2], vec![1.0, 2.0]);
        let loss = with_no_grad(|| sum(&mul(&x, &x).unwrap()));
        assert_eq!(loss.value(), 5.0);
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }
}
