//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The graph is built eagerly: every operation on tracked tensors records a
//! backward rule at call time. Tensors are immutable after creation except
//! for their gradient buffers; parameter values are only rewritten by the
//! optimizer between steps, through [`Tensor::set_data`].
//!
//! Gradient accumulation is additive across fan-out. Buffers are zeroed
//! explicitly via [`Tensor::zero_grad`], never implicitly: running backward
//! twice doubles leaf gradients by design.

mod gemm;
mod ops;

pub use gemm::{gemm_acc, gemm_nt_acc, gemm_tn_acc, transpose_into};

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{HprnError, Result};
use crate::scalar::Scalar;

/// Semantic axis label, carried for diagnostics only; never affects equality.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Axis {
    Channel,
    Height,
    Width,
    Group,
    Item,
    Anon,
}

impl Axis {
    fn tag(self) -> &'static str {
        match self {
            Axis::Channel => "C",
            Axis::Height => "H",
            Axis::Width => "W",
            Axis::Group => "G",
            Axis::Item => "N",
            Axis::Anon => "",
        }
    }
}

/// Tensor shape: ordered dimension sizes plus per-axis labels.
#[derive(Clone, Debug)]
pub struct Shape {
    dims: Vec<usize>,
    labels: Vec<Axis>,
}

impl PartialEq for Shape {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
    }
}
impl Eq for Shape {}

impl Shape {
    pub fn of(dims: &[usize]) -> Self {
        assert!(dims.iter().all(|&d| d >= 1), "all dims must be >= 1");
        Shape {
            dims: dims.to_vec(),
            labels: vec![Axis::Anon; dims.len()],
        }
    }

    pub fn labeled(dims: &[usize], labels: &[Axis]) -> Self {
        assert_eq!(dims.len(), labels.len());
        assert!(dims.iter().all(|&d| d >= 1), "all dims must be >= 1");
        Shape {
            dims: dims.to_vec(),
            labels: labels.to_vec(),
        }
    }

    /// Channel-height-width image shape.
    pub fn chw(c: usize, h: usize, w: usize) -> Self {
        Shape::labeled(&[c, h, w], &[Axis::Channel, Axis::Height, Axis::Width])
    }

    pub fn vector(n: usize) -> Self {
        Shape::labeled(&[n], &[Axis::Channel])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn label(&self, axis: usize) -> Axis {
        self.labels[axis]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, (&d, &l)) in self.dims.iter().zip(self.labels.iter()).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            let tag = l.tag();
            if tag.is_empty() {
                write!(f, "{d}")?;
            } else {
                write!(f, "{tag}={d}")?;
            }
        }
        write!(f, "]")
    }
}

thread_local! {
    static DIV_GUARD_HITS: Cell<u64> = const { Cell::new(0) };
}

/// Number of elementwise divisions whose denominator was clamped to the
/// 1e-8 magnitude floor since the last reset.
pub fn div_guard_hits() -> u64 {
    DIV_GUARD_HITS.with(|c| c.get())
}

pub fn reset_div_guard_hits() {
    DIV_GUARD_HITS.with(|c| c.set(0));
}

pub(crate) fn bump_div_guard() {
    DIV_GUARD_HITS.with(|c| c.set(c.get() + 1));
}

type BackwardFn<T> = Box<dyn Fn(&[T])>;

struct Node<T: Scalar> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct TensorInner<T: Scalar> {
    shape: Shape,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    node: Option<Node<T>>,
    tracked: bool,
}

/// Reference-counted dense tensor. Cloning is cheap and shares storage.
pub struct Tensor<T: Scalar> {
    inner: Rc<TensorInner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{} tracked={}", self.shape(), self.is_tracked())
    }
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(shape: Shape, data: Vec<T>, node: Option<Node<T>>, tracked: bool) -> Self {
        assert_eq!(
            shape.numel(),
            data.len(),
            "shape {shape} does not match data length {}",
            data.len()
        );
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                node,
                tracked,
            }),
        }
    }

    /// Constant (untracked) tensor.
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(HprnError::dimension(
                "from_vec",
                shape.to_string(),
                format!("data of length {}", data.len()),
            ));
        }
        Ok(Tensor::from_parts(shape, data, None, false))
    }

    /// Leaf tensor participating in autodiff (a learnable parameter).
    pub fn parameter(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(HprnError::dimension(
                "parameter",
                shape.to_string(),
                format!("data of length {}", data.len()),
            ));
        }
        Ok(Tensor::from_parts(shape, data, None, true))
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Tensor::from_parts(shape, vec![T::zero(); n], None, false)
    }

    pub fn full(shape: Shape, v: T) -> Self {
        let n = shape.numel();
        Tensor::from_parts(shape, vec![v; n], None, false)
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_parts(Shape::of(&[1]), vec![v], None, false)
    }

    /// Output of an op; tracked iff any parent is tracked.
    pub(crate) fn from_op(
        shape: Shape,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) + 'static,
    ) -> Self {
        let tracked = parents.iter().any(|p| p.is_tracked());
        if tracked {
            Tensor::from_parts(
                shape,
                data,
                Some(Node {
                    parents,
                    backward: Box::new(backward),
                }),
                true,
            )
        } else {
            Tensor::from_parts(shape, data, None, false)
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.inner.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.inner.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.tracked
    }

    /// Borrow the value buffer.
    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// Clone the value buffer out.
    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// The single value of a 1-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Overwrite values in place. Only the optimizer should do this, between
    /// steps, while no graph from a previous step is still being traversed.
    pub fn set_data(&self, values: &[T]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    pub fn update_data(&self, f: impl FnMut(&mut T)) {
        self.inner.data.borrow_mut().iter_mut().for_each(f);
    }

    /// Gradient buffer contents, or zeros if backward never reached this
    /// tensor.
    pub fn grad_vec(&self) -> Vec<T> {
        match self.inner.grad.borrow().as_ref() {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.numel()],
        }
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Add into the gradient buffer, allocating zeros on first touch.
    pub fn accumulate_grad(&self, delta: &[T]) {
        assert_eq!(delta.len(), self.numel(), "gradient length mismatch");
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (b, &d) in buf.iter_mut().zip(delta.iter()) {
            *b += d;
        }
    }

    /// Like [`Tensor::accumulate_grad`] but takes the buffer by value; when
    /// no gradient exists yet the vector is adopted without a copy. Most
    /// tensors receive exactly one contribution, so this skips a zero-fill
    /// and an add pass on the hot path.
    pub fn accumulate_grad_owned(&self, delta: Vec<T>) {
        assert_eq!(delta.len(), self.numel(), "gradient length mismatch");
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            None => *slot = Some(delta),
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
        }
    }

    /// A constant copy sharing no graph history.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::from_parts(self.shape().clone(), self.to_vec(), None, false)
    }

    /// Reverse-mode sweep from a scalar loss. Populates gradient buffers of
    /// every tracked tensor that the loss depends on; each graph node's rule
    /// runs exactly once.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(HprnError::contract(
                "backward",
                format!("loss must be scalar, got shape {}", self.shape()),
            ));
        }
        if !self.is_tracked() {
            // Loss does not depend on any parameter; nothing to do.
            return Ok(());
        }

        let order = topo_order(self);
        self.accumulate_grad(&[T::one()]);
        for t in order.iter().rev() {
            if let Some(node) = t.inner.node.as_ref() {
                // Skip nodes the loss gradient never reached.
                let g = t.inner.grad.borrow();
                if let Some(gbuf) = g.as_ref() {
                    (node.backward)(gbuf);
                }
            }
        }
        // Intermediate gradient buffers die with the graph; only leaves are
        // typically still referenced by the caller.
        Ok(())
    }
}

/// Iterative DFS post-order; result is a topological order (parents before
/// children in the returned list).
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order: Vec<Tensor<T>> = Vec::new();
    let mut seen: HashSet<*const ()> = HashSet::new();
    // (tensor, child cursor)
    let mut stack: Vec<(Tensor<T>, usize)> = Vec::new();

    let key = |t: &Tensor<T>| Rc::as_ptr(&t.inner) as *const ();

    if seen.insert(key(root)) {
        stack.push((root.clone(), 0));
    }
    while let Some((t, cursor)) = stack.pop() {
        let parents = t.inner.node.as_ref().map(|n| &n.parents);
        let n_parents = parents.map_or(0, |p| p.len());
        if cursor < n_parents {
            let parent = parents.unwrap()[cursor].clone();
            stack.push((t, cursor + 1));
            if parent.is_tracked() && seen.insert(key(&parent)) {
                stack.push((parent, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_display_carries_labels() {
        let s = Shape::chw(3, 4, 5);
        assert_eq!(s.to_string(), "[C=3, H=4, W=5]");
        assert_eq!(Shape::of(&[2, 2]).to_string(), "[2, 2]");
    }

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::<f64>::from_vec(Shape::of(&[2, 2]), vec![1.0; 3]).is_err());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let t = Tensor::<f64>::parameter(Shape::of(&[2]), vec![1.0, 2.0]).unwrap();
        assert!(t.backward().is_err());
    }

    #[test]
    fn linear_loss_gradient_is_ones() {
        let w = Tensor::<f64>::parameter(Shape::of(&[3]), vec![1.0, -2.0, 0.5]).unwrap();
        let loss = w.sum_all();
        loss.backward().unwrap();
        assert_eq!(w.grad_vec(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_loss_gradient_is_w() {
        let w = Tensor::<f64>::parameter(Shape::of(&[3]), vec![1.0, -2.0, 0.5]).unwrap();
        let loss = w.mul(&w).unwrap().sum_all().scale(0.5);
        loss.backward().unwrap();
        assert_eq!(w.grad_vec(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn accumulation_is_additive_across_backwards() {
        // backward of a sum of two graphs equals the sum of separate
        // backwards run into the same buffers.
        let w = Tensor::<f64>::parameter(Shape::of(&[2]), vec![2.0, 3.0]).unwrap();
        let l1 = w.sum_all();
        let l2 = w.mul(&w).unwrap().sum_all();
        l1.backward().unwrap();
        l2.backward().unwrap();
        let split = w.grad_vec();

        w.zero_grad();
        let joint = w.sum_all().add(&w.mul(&w).unwrap().sum_all()).unwrap();
        joint.backward().unwrap();
        assert_eq!(split, w.grad_vec());
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // y = w + w => dy/dw = 2
        let w = Tensor::<f64>::parameter(Shape::of(&[2]), vec![1.0, 1.0]).unwrap();
        let y = w.add(&w).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(w.grad_vec(), vec![2.0, 2.0]);
    }

    #[test]
    fn unreachable_parameter_grad_is_zero() {
        let w = Tensor::<f64>::parameter(Shape::of(&[2]), vec![1.0, 1.0]).unwrap();
        let v = Tensor::<f64>::parameter(Shape::of(&[2]), vec![1.0, 1.0]).unwrap();
        let loss = w.sum_all();
        loss.backward().unwrap();
        assert!(!v.has_grad());
        assert_eq!(v.grad_vec(), vec![0.0, 0.0]);
    }
}
