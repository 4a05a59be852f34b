//! Reverse-mode autodiff over dense row-major tensors.
//!
//! A [`Tensor`] is a shared handle to one graph node: a value buffer, a
//! lazily allocated gradient buffer, the parent handles the value was
//! computed from, and a closure that pushes an incoming gradient out to
//! those parents. The op constructors in [`ops`] build the graph eagerly;
//! [`Tensor::backward`] on a scalar walks the reachable subgraph exactly
//! once in reverse topological order. Gradients accumulate across backward
//! calls until [`Tensor::zero_grad`], which is what makes shared
//! subexpressions (and repeated backward) sum rather than overwrite.
//!
//! Nodes whose ancestry contains no trainable leaf drop their parents and
//! closure at construction, so constants cost nothing at backward time.
//! Handles are `Rc`-based and not `Send`; a model lives on one worker.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{shape_err, Result};

pub mod ops;

/// Scalar types the numerics are generic over. `quantize` rounds through
/// f32 so f32 and f64 models can be initialized bit-equivalently, which the
/// cross-precision gradient checks rely on.
pub trait Element: num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static {
    const DTYPE: &'static str;
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn quantize(v: f64) -> Self {
        Self::of((v as f32) as f64)
    }
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    #[inline]
    fn of(v: f64) -> f32 {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    #[inline]
    fn of(v: f64) -> f64 {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense boolean attention mask, row-major `(rows, cols)`, `true` = the
/// query row may attend to the key column.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Mask> {
        if allow.len() != rows * cols {
            return Err(shape_err(format!(
                "mask buffer holds {} entries, shape ({rows}, {cols}) needs {}",
                allow.len(),
                rows * cols
            )));
        }
        Ok(Mask { rows, cols, allow })
    }

    pub fn full(rows: usize, cols: usize) -> Mask {
        Mask {
            rows,
            cols,
            allow: vec![true; rows * cols],
        }
    }

    /// Strictly causal square mask: position i attends to positions <= i.
    pub fn causal(n: usize) -> Mask {
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allow[i * n + j] = true;
            }
        }
        Mask {
            rows: n,
            cols: n,
            allow,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Mask {
        let mut allow = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allow.push(f(r, c));
            }
        }
        Mask { rows, cols, allow }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn count_allowed(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|r| (0..r).all(|c| self.get(r, c) == self.get(c, r)))
    }

    /// Elementwise conjunction; shapes must match.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(shape_err(format!(
                "mask and: ({}, {}) vs ({}, {})",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let allow = self
            .allow
            .iter()
            .zip(&other.allow)
            .map(|(&a, &b)| a && b)
            .collect();
        Ok(Mask {
            rows: self.rows,
            cols: self.cols,
            allow,
        })
    }
}

/// (output data, incoming gradient, parents) -> pushes gradient into parents.
type BackwardFn<T> = Box<dyn Fn(&[T], &[T], &[Tensor<T>])>;

struct Node<T: Element> {
    op: &'static str,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tensor<T: Element = f32>(Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.0.op)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    /// Constant leaf (no gradient tracked).
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        Self::leaf(shape, data, false)
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        Self::leaf(shape, data, true)
    }

    fn leaf(shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(shape_err(format!(
                "leaf shape {:?} does not describe a buffer of {} elements",
                shape,
                data.len()
            )));
        }
        Ok(Tensor(Rc::new(Node {
            op: "leaf",
            shape: shape.to_vec(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        })))
    }

    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        Self::leaf(shape, vec![T::zero(); n], false).expect("zeros: valid shape")
    }

    pub fn scalar(v: T) -> Tensor<T> {
        Self::leaf(&[1], vec![v], false).expect("scalar leaf")
    }

    /// Node produced by an op. Constant ancestry collapses to a constant
    /// leaf so backward never visits it.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Tensor<T> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{op}: shape/buffer mismatch");
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "{op}: produced a non-finite value"
        );
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        if requires_grad {
            Tensor(Rc::new(Node {
                op,
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                parents,
                backward: Some(backward),
                requires_grad: true,
            }))
        } else {
            Tensor(Rc::new(Node {
                op,
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                requires_grad: false,
            }))
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    /// Rows/cols of a 2-D tensor; 1-D counts as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(format!("expected rank <= 2, got {s:?}"))),
        }
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.0.data.borrow()[0]
    }

    pub fn at(&self, flat: usize) -> T {
        self.0.data.borrow()[flat]
    }

    /// Overwrite the buffer in place (optimizer updates, finite-difference
    /// probes). Shape is fixed for the node's lifetime.
    pub fn set_data(&self, new: &[T]) -> Result<()> {
        if new.len() != self.numel() {
            return Err(shape_err(format!(
                "set_data: {} values into a {:?} tensor",
                new.len(),
                self.0.shape
            )));
        }
        self.0.data.borrow_mut().copy_from_slice(new);
        Ok(())
    }

    pub fn set_at(&self, flat: usize, v: T) {
        self.0.data.borrow_mut()[flat] = v;
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Stable identity of the underlying node.
    pub fn node_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        if !self.0.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.numel(), "gradient size mismatch");
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b = *b + x;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse sweep from a scalar. Each reachable node's closure runs once,
    /// after all of that node's consumers have contributed its gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(shape_err(format!(
                "backward requires a scalar, got shape {:?}",
                self.0.shape
            )));
        }
        if !self.0.requires_grad {
            return Ok(());
        }
        let order = self.topo_order();
        // Leaf gradients accumulate across sweeps; op-node gradients are
        // per-sweep scratch and must start clean or a second backward call
        // would compound through the interior instead of doubling.
        for t in &order {
            if t.0.backward.is_some() {
                t.zero_grad();
            }
        }
        self.accumulate_grad(&[T::one()]);
        for t in order.iter().rev() {
            let node = &t.0;
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let grad_ref = node.grad.borrow();
            let Some(g) = grad_ref.as_ref() else {
                continue;
            };
            let data = node.data.borrow();
            back(&data, g, &node.parents);
        }
        Ok(())
    }

    /// Post-order over the requires-grad subgraph: parents precede children,
    /// self is last. Iterating in reverse therefore visits every consumer
    /// before the node it feeds.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.node_id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                if p.0.requires_grad && !visited.contains(&p.node_id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn leaf_shape_must_match_buffer() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::<f32>::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(t.backward().is_err());
    }

    #[test]
    fn constant_graphs_are_pruned() {
        let a = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let c = ops::add(&a, &b).unwrap();
        assert!(!c.requires_grad());
        let s = ops::sum_all(&c);
        s.backward().unwrap();
        assert!(a.grad().is_none());
    }

    #[test]
    fn shared_subexpression_gradient_sums_over_uses() {
        // y = x + x ; dy/dx = 2 per component
        let x = Tensor::<f64>::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = ops::add(&x, &x).unwrap();
        let s = ops::sum_all(&y);
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn two_backward_calls_double_the_gradient() {
        let x = Tensor::<f64>::param(&[2], vec![5.0, -1.0]).unwrap();
        let s = ops::sum_all(&x);
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn diamond_graph_traversed_once_per_node() {
        // s = sum(a*x + b*x): x's gradient gets both branch contributions.
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let a = Tensor::<f64>::from_vec(&[2], vec![3.0, 3.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2], vec![4.0, 4.0]).unwrap();
        let left = ops::mul(&a, &x).unwrap();
        let right = ops::mul(&b, &x).unwrap();
        let s = ops::sum_all(&ops::add(&left, &right).unwrap());
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0, 7.0]);
    }

    #[test]
    fn mask_causal_and_symmetry() {
        let c = Mask::causal(4);
        assert!(c.get(3, 0) && !c.get(0, 3));
        assert!(!c.is_symmetric());
        let f = Mask::full(4, 4);
        assert!(f.is_symmetric());
        assert_eq!(f.and(&c).unwrap(), c);
    }

    #[test]
    fn quantize_rounds_through_f32_in_both_precisions() {
        let v = 0.1f64 + 1e-12;
        assert_eq!(f64::quantize(v), (v as f32) as f64);
        assert_eq!(f32::quantize(v).as_f64(), f64::quantize(v));
    }
}
