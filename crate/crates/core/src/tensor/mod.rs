//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted value buffer. Operations on
//! tensors that require gradients attach a record (parents plus a backward
//! closure) to their result; [`Tensor::backward`] walks those records in
//! reverse topological order, sums gradients over every use of an operand,
//! and deposits the totals on the leaf tensors. Records are consumed by the
//! walk, so a graph can be differentiated once.

mod conv;
mod gradcheck;
mod norm;
mod ops;
mod real;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

pub use conv::ConvGeometry;
pub use gradcheck::{grad_check, GradCheckReport};
pub use norm::BatchStats;
pub use ops::Elementwise;
pub(crate) use real::{gemm, MatRef};
pub use real::Real;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording operations on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Input-gradient closure: `(output values, output gradient, parents) -> per-parent gradients`.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Record<T: Real> {
    name: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    leaf: bool,
    grad: Mutex<Option<Vec<T>>>,
    record: Mutex<Option<Record<T>>>,
    consumed: AtomicBool,
}

/// Dense row-major n-dimensional array with optional gradient.
pub struct Tensor<T: Real = f32>(Arc<Node<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad);
        if self.numel() <= 16 {
            s.field("values", &self.0.data);
        }
        s.finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    fn from_node(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        leaf: bool,
        record: Option<Record<T>>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            leaf,
            grad: Mutex::new(None),
            record: Mutex::new(record),
            consumed: AtomicBool::new(false),
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        if shape.contains(&0) {
            return Err(Error::shape("new", format!("zero-sized dimension in {shape:?}")));
        }
        Ok(Self::from_node(shape.to_vec(), data, false, true, None))
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(t.into_param())
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_node(vec![1], vec![T::of(v)], false, true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_node(shape.to_vec(), vec![T::zero(); numel(shape)], false, true, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_node(shape.to_vec(), vec![T::of(v); numel(shape)], false, true, None)
    }

    /// Same values as a fresh leaf that requires gradients.
    pub fn into_param(self) -> Self {
        let (shape, data) = match Arc::try_unwrap(self.0) {
            Ok(node) => (node.shape, node.data),
            Err(shared) => (shared.shape.clone(), shared.data.clone()),
        };
        Self::from_node(shape, data, true, true, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn values(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0].f64()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.leaf
    }

    /// Accumulated gradient of a leaf tensor, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// Constant copy sharing no record with `self`.
    pub fn detach(&self) -> Self {
        if !self.requires_grad() {
            return self.clone();
        }
        Self::from_node(self.0.shape.clone(), self.0.data.clone(), false, true, None)
    }

    pub fn same_node(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Result of an operation. A record is attached only when gradients are
    /// enabled and some parent requires them.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let record = requires_grad.then(|| Record {
            name,
            parents,
            backward,
        });
        Self::from_node(shape, data, requires_grad, false, record)
    }

    /// Name of the operation that produced this tensor, while its record is alive.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.record.lock().expect("record lock").as_ref().map(|r| r.name)
    }

    /// Reverse-mode differentiation from this scalar.
    ///
    /// Gradients are summed over every use of an operand and added to the
    /// `grad` buffer of each reachable leaf that requires gradients. The
    /// records of the traversed graph are released.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarBackward(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        if self.0.consumed.swap(true, Ordering::SeqCst) {
            return Err(Error::BackwardTwice);
        }
        if self.is_leaf() {
            accumulate_leaf(self, vec![T::one()]);
            return Ok(());
        }

        let order = self.topo_order()?;
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.0.id, vec![T::one()]);

        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.0.id) else {
                // Unreached node (e.g. only feeds parents that do not need gradients).
                let _ = node.0.record.lock().expect("record lock").take();
                node.0.consumed.store(true, Ordering::SeqCst);
                continue;
            };
            let record = node.0.record.lock().expect("record lock").take();
            node.0.consumed.store(true, Ordering::SeqCst);
            let Some(record) = record else {
                return Err(Error::BackwardTwice);
            };
            let parent_grads = (record.backward)(&node.0.data, &grad, &record.parents);
            debug_assert_eq!(parent_grads.len(), record.parents.len(), "{}", record.name);
            for (parent, g) in record.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), parent.numel(), "grad length from {}", record.name);
                if parent.is_leaf() {
                    accumulate_leaf(parent, g);
                } else {
                    match pending.get_mut(&parent.0.id) {
                        Some(acc) => add_into(acc, &g),
                        None => {
                            pending.insert(parent.0.id, g);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Non-leaf nodes reachable from `self`, parents before children.
    fn topo_order(&self) -> Result<Vec<Tensor<T>>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.0.id) {
                continue;
            }
            let parents: Vec<Tensor<T>> = {
                let rec = node.0.record.lock().expect("record lock");
                match rec.as_ref() {
                    Some(r) => r.parents.clone(),
                    None if node.0.consumed.load(Ordering::SeqCst) => {
                        return Err(Error::BackwardTwice)
                    }
                    None => Vec::new(),
                }
            };
            stack.push((node, true));
            for p in parents {
                if p.requires_grad() && !p.is_leaf() && !visited.contains(&p.0.id) {
                    stack.push((p, false));
                }
            }
        }
        Ok(order)
    }
}

fn accumulate_leaf<T: Real>(t: &Tensor<T>, g: Vec<T>) {
    let mut slot = t.0.grad.lock().expect("grad lock");
    match slot.as_mut() {
        Some(acc) => add_into(acc, &g),
        None => *slot = Some(g),
    }
}

pub(crate) fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += *b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64]) -> Tensor<f64> {
        Tensor::param(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = param(&[1.0, 2.0, 3.0]);
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn unreachable_tensor_has_no_gradient() {
        let x = param(&[1.0, 2.0]);
        let y = param(&[5.0]);
        let _unused = y.scale(3.0);
        x.square().sum().backward().unwrap();
        assert!(y.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn gradients_accumulate_over_uses() {
        let x = param(&[1.0, -1.0, 4.0]);
        x.sum().add(&x.sum()).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let x = param(&[1.0, 2.0]);
        assert!(matches!(x.square().backward(), Err(Error::NonScalarBackward(_))));
    }

    #[test]
    fn second_backward_is_rejected() {
        let x = param(&[1.0, 2.0]);
        let loss = x.square().sum();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::BackwardTwice)));
        // a second loss sharing the consumed subgraph is rejected too
        let shared = x.square();
        let a = shared.sum();
        let b = shared.scale(2.0).sum();
        a.backward().unwrap();
        assert!(matches!(b.backward(), Err(Error::BackwardTwice)));
    }

    #[test]
    fn record_is_released_after_backward() {
        let x = param(&[3.0]);
        let y = x.square();
        assert_eq!(y.op_name(), Some("square"));
        y.sum().backward().unwrap();
        assert_eq!(y.op_name(), None);
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = param(&[1.0]);
        let y = no_grad(|| x.square());
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }

    #[test]
    fn tensors_cross_threads() {
        let x = param(&[1.0, 2.0]);
        let y = std::thread::spawn(move || x.square().sum().item()).join().unwrap();
        assert_eq!(y, 5.0);
    }
}
