//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are row-major, heap-allocated, and cheap to clone (shared
//! reference-counted storage). Operations in [`ops`] record a backward
//! closure on their output; [`backward`] walks the recorded graph once in
//! reverse topological order and accumulates gradients into every
//! reachable input that requires them.

pub mod gemm;
pub mod ops;
pub mod optim;
pub mod param;
pub mod rng;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Element type for tensors: `f32` for training, `f64` for the
/// finite-difference gradient harness.
pub trait Scalar:
    Copy
    + PartialEq
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Identifier stored in checkpoint tensor records.
    const DTYPE_CODE: u8;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;

    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_bytes_slice(bytes: &[u8]) -> Self;
    /// Bytes per element in checkpoint payloads.
    const BYTE_WIDTH: usize;

    /// Single-precision-or-double GEMM, dispatched to `matrixmultiply`.
    ///
    /// # Safety
    /// Pointer/stride contract is exactly that of `matrixmultiply::sgemm`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $code:expr, $width:expr, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE_CODE: u8 = $code;
            const BYTE_WIDTH: usize = $width;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            fn to_le_bytes_vec(self) -> Vec<u8> {
                self.to_le_bytes().to_vec()
            }
            fn from_le_bytes_slice(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $width];
                buf.copy_from_slice(&bytes[..$width]);
                <$t>::from_le_bytes(buf)
            }

            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, 0, 4, matrixmultiply::sgemm);
impl_scalar!(f64, 1, 8, matrixmultiply::dgemm);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

/// Whether newly built ops record backward closures on this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Run `f` with gradient recording disabled, restoring the previous state
/// afterwards (also on panic).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|c| c.replace(false)));
    f()
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward closure: `(output_grad, output_data)` scatters into parents.
type BackwardFn<S> = Box<dyn Fn(&[S], &[S])>;

struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    parents: Vec<Tensor<S>>,
    backward_fn: Option<BackwardFn<S>>,
}

/// A dense n-dimensional array, optionally a node in an autodiff graph.
///
/// Cloning a `Tensor` clones the handle, not the storage.
pub struct Tensor<S: Scalar> {
    inner: Rc<RefCell<Inner<S>>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("id", &inner.id)
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::leaf(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![S::ZERO; numel])
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: S) -> Self {
        Self::leaf(vec![], vec![value])
    }

    fn leaf(shape: Vec<usize>, data: Vec<S>) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: next_id(),
                shape,
                data,
                grad: None,
                requires_grad: false,
                parents: Vec::new(),
                backward_fn: None,
            })),
        }
    }

    /// Build an op output. Records the graph edge only when gradients are
    /// enabled and some parent takes part in differentiation; otherwise the
    /// result is a plain leaf.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward_fn: BackwardFn<S>,
    ) -> Self {
        let record = grad_enabled() && parents.iter().any(|p| p.participates());
        let t = Self::leaf(shape, data);
        if record {
            let mut inner = t.inner.borrow_mut();
            inner.requires_grad = true;
            inner.parents = parents;
            inner.backward_fn = Some(backward_fn);
        }
        t
    }

    /// True when this node either is a trainable leaf or carries graph
    /// history, i.e. gradients must flow through or into it.
    pub(crate) fn participates(&self) -> bool {
        let inner = self.inner.borrow();
        inner.requires_grad || inner.backward_fn.is_some()
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, value: bool) -> &Self {
        self.inner.borrow_mut().requires_grad = value;
        self
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn get(&self, idx: usize) -> S {
        self.inner.borrow().data[idx]
    }

    /// Overwrite one element in place (used by the optimizer and the
    /// finite-difference harness).
    pub fn set(&self, idx: usize, value: S) {
        self.inner.borrow_mut().data[idx] = value;
    }

    /// Replace the whole payload, keeping the shape.
    pub fn set_data(&self, data: &[S]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data.copy_from_slice(data);
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[S]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [S]) -> R) -> R {
        f(&mut self.inner.borrow_mut().data)
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.borrow().grad.clone()
    }

    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Accumulate into this tensor's gradient buffer, allocating zeros on
    /// first touch.
    pub(crate) fn with_grad_mut<R>(&self, f: impl FnOnce(&mut [S]) -> R) -> R {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![S::ZERO; n]);
        f(grad)
    }

    /// Copy of the data with no graph history and no gradient requirement.
    pub fn detach(&self) -> Tensor<S> {
        let inner = self.inner.borrow();
        Self::leaf(inner.shape.clone(), inner.data.clone())
    }

    /// Independent leaf copy that keeps the `requires_grad` flag.
    pub fn deep_clone(&self) -> Tensor<S> {
        let inner = self.inner.borrow();
        let t = Self::leaf(inner.shape.clone(), inner.data.clone());
        t.set_requires_grad(inner.requires_grad);
        t
    }
}

/// Run reverse-mode differentiation from a scalar loss.
///
/// Seeds `d loss / d loss = 1`, then visits every recorded op once in
/// reverse topological order. Gradients accumulate additively, so a tensor
/// consumed by several ops receives the sum of its contributions. Existing
/// `.grad` buffers are accumulated into, not reset; call
/// [`Tensor::clear_grad`] (or let the optimizer do it) between steps.
pub fn backward<S: Scalar>(loss: &Tensor<S>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let order = topo_order(loss);
    loss.with_grad_mut(|g| g[0] += S::ONE);
    for node in order.iter().rev() {
        let inner = node.inner.borrow();
        if let (Some(backward_fn), Some(grad)) = (&inner.backward_fn, &inner.grad) {
            backward_fn(grad, &inner.data);
        }
    }
    Ok(())
}

/// Iterative post-order DFS over the recorded graph (no recursion, so deep
/// chains from long unrolled loops cannot overflow the stack).
fn topo_order<S: Scalar>(root: &Tensor<S>) -> Vec<Tensor<S>> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor<S>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        let inner = node.inner.borrow();
        for parent in &inner.parents {
            if !visited.contains(&parent.id()) {
                stack.push((parent.clone(), false));
            }
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_item() {
        let t = Tensor::scalar(4.5f32);
        assert_eq!(t.item(), 4.5);
        assert_eq!(t.shape(), Vec::<usize>::new());
        assert_eq!(t.numel(), 1);
    }

    #[test]
    fn clone_shares_storage() {
        let a = Tensor::<f32>::zeros(&[3]);
        let b = a.clone();
        a.set(1, 7.0);
        assert_eq!(b.get(1), 7.0);
        let c = a.deep_clone();
        a.set(1, 9.0);
        assert_eq!(c.get(1), 7.0);
    }

    #[test]
    fn grad_accumulates_across_multiple_uses() {
        // loss = sum(x + x) => d loss / dx = 2 everywhere.
        let x = Tensor::new(&[1, 1, 1, 3], vec![1.0f32, 2.0, 3.0]).unwrap();
        x.set_requires_grad(true);
        let y = ops::add(&x, &x).unwrap();
        let loss = ops::weighted_sum(&y, &[1.0, 1.0, 1.0]).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::new(&[1, 1, 1, 2], vec![1.0f32, 2.0]).unwrap();
        x.set_requires_grad(true);
        let y = ops::scale(&x, 2.0);
        assert!(backward(&y).is_err());
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = Tensor::new(&[1, 1, 1, 2], vec![1.0f32, 2.0]).unwrap();
        x.set_requires_grad(true);
        let y = no_grad(|| ops::scale(&x, 3.0));
        assert!(!y.participates());
        assert!(grad_enabled());
        // Nested guard restores the outer state.
        no_grad(|| {
            assert!(!grad_enabled());
            no_grad(|| assert!(!grad_enabled()));
            assert!(!grad_enabled());
        });
        assert!(grad_enabled());
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let x = Tensor::new(&[1, 1, 1, 2], vec![1.0f32, 2.0]).unwrap();
        x.set_requires_grad(true);
        let y = ops::scale(&x, 2.0).detach();
        let z = ops::scale(&y, 5.0);
        assert!(!z.participates());
    }

    #[test]
    fn grad_buffers_accumulate_until_cleared() {
        let x = Tensor::new(&[1, 1, 1, 2], vec![1.0f32, 2.0]).unwrap();
        x.set_requires_grad(true);
        for expected in [3.0f32, 6.0] {
            let loss = ops::weighted_sum(&x, &[3.0, 0.0]).unwrap();
            backward(&loss).unwrap();
            assert_eq!(x.grad().unwrap()[0], expected);
        }
        x.clear_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        // loss = sum(2x) + sum(3x): gradient 5 per element.
        let x = Tensor::new(&[1, 1, 1, 2], vec![1.0f32, 1.0]).unwrap();
        x.set_requires_grad(true);
        let a = ops::scale(&x, 2.0);
        let b = ops::scale(&x, 3.0);
        let s = ops::add(&a, &b).unwrap();
        let loss = ops::weighted_sum(&s, &[1.0, 1.0]).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0, 5.0]);
    }
}
