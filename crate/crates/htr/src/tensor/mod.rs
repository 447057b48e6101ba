//! Dense tensor engine with reverse-mode automatic differentiation.
//!
//! Values are recorded on a [`Tape`]; each recorded operation stores a
//! backward rule. The engine is generic over the element type: `f32` is the
//! training/inference substrate, `f64` exists for finite-difference gradient
//! verification ([`grad_check`]).

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{HtrError, Result};

pub mod conv;
pub mod ops;

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    num_traits::Float + std::iter::Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Element for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Element for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

type BackFn<E> = Box<dyn Fn(&[E], &mut Grads<E>)>;

struct Node<E: Element> {
    data: Rc<Vec<E>>,
    shape: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackFn<E>>,
    grad: Option<Vec<E>>,
}

/// Gradient accumulation buffers, indexed by node id. Fan-out adds.
pub struct Grads<E: Element> {
    bufs: Vec<Option<Vec<E>>>,
}

impl<E: Element> Grads<E> {
    fn new(n: usize) -> Self {
        Grads { bufs: (0..n).map(|_| None).collect() }
    }

    /// Add `v` into the gradient buffer for node `id`.
    pub fn add(&mut self, id: usize, v: Vec<E>) {
        match &mut self.bufs[id] {
            Some(buf) => {
                debug_assert_eq!(buf.len(), v.len());
                for (b, x) in buf.iter_mut().zip(v) {
                    *b = *b + x;
                }
            }
            slot => *slot = Some(v),
        }
    }

    /// Zero-initialized buffer for node `id`, for in-place scatter rules.
    pub fn buf(&mut self, id: usize, len: usize) -> &mut [E] {
        self.bufs[id].get_or_insert_with(|| vec![E::zero(); len])
    }
}

/// Records every operation of one forward pass in topological order.
///
/// Single-owner: one tape per training step, never shared across steps.
pub struct Tape<E: Element> {
    inner: RefCell<TapeInner<E>>,
}

struct TapeInner<E: Element> {
    nodes: Vec<Node<E>>,
    check_finite: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { inner: RefCell::new(TapeInner { nodes: Vec::new(), check_finite: false }) }
    }

    /// Debug mode: every recorded value is scanned for NaN/Inf.
    pub fn check_finite(&self, on: bool) {
        self.inner.borrow_mut().check_finite = on;
    }

    /// Create a leaf tensor.
    pub fn tensor(&self, data: Vec<E>, shape: &[usize], requires_grad: bool) -> Result<Tensor<'_, E>> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(HtrError::Dimension(format!(
                "shape {:?} does not describe a buffer of {} values",
                shape,
                data.len()
            )));
        }
        Ok(self.record(data, shape.to_vec(), requires_grad, None))
    }

    pub fn scalar(&self, v: E) -> Tensor<'_, E> {
        self.record(vec![v], vec![1], false, None)
    }

    pub fn zeros(&self, shape: &[usize], requires_grad: bool) -> Tensor<'_, E> {
        let numel: usize = shape.iter().product();
        self.record(vec![E::zero(); numel], shape.to_vec(), requires_grad, None)
    }

    pub(crate) fn record(
        &self,
        data: Vec<E>,
        shape: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackFn<E>>,
    ) -> Tensor<'_, E> {
        let mut inner = self.inner.borrow_mut();
        if inner.check_finite {
            if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
                panic!("non-finite value {bad:?} recorded on tape (node {})", inner.nodes.len());
            }
        }
        let id = inner.nodes.len();
        inner.nodes.push(Node { data: Rc::new(data), shape, requires_grad, backward, grad: None });
        Tensor { tape: self, id }
    }

    /// Reverse sweep from a scalar loss; populates `grad` on every
    /// requires-grad node. Visits each recorded operation exactly once.
    pub fn backward(&self, loss: Tensor<E>) -> Result<()> {
        {
            let inner = self.inner.borrow();
            let node = &inner.nodes[loss.id];
            if node.data.len() != 1 {
                return Err(HtrError::Contract(format!(
                    "backward requires a scalar loss, got shape {:?}",
                    node.shape
                )));
            }
        }
        let n = self.inner.borrow().nodes.len();
        let mut grads = Grads::new(n);
        grads.add(loss.id, vec![E::one()]);
        {
            let inner = self.inner.borrow();
            for id in (0..=loss.id).rev() {
                let Some(g) = grads.bufs[id].take() else { continue };
                let node = &inner.nodes[id];
                if let Some(back) = &node.backward {
                    back(&g, &mut grads);
                }
                grads.bufs[id] = Some(g);
            }
        }
        let mut inner = self.inner.borrow_mut();
        for (id, node) in inner.nodes.iter_mut().enumerate() {
            if node.requires_grad {
                node.grad = grads.bufs[id].take();
            }
        }
        Ok(())
    }
}

/// Handle to a value on a [`Tape`]. Cheap to copy; data is shared.
#[derive(Clone, Copy)]
pub struct Tensor<'t, E: Element> {
    pub(crate) tape: &'t Tape<E>,
    pub(crate) id: usize,
}

impl<'t, E: Element> Tensor<'t, E> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    pub fn data(&self) -> Rc<Vec<E>> {
        Rc::clone(&self.tape.inner.borrow().nodes[self.id].data)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Gradient populated by the last `backward` call, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn item(&self) -> E {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on non-scalar");
        d[0]
    }
}

/// Verify analytic gradients of `f` against central finite differences.
///
/// `f` maps leaf tensors to a scalar. Inputs should be bounded away from
/// non-differentiable kinks by at least `10 * eps`. Returns the maximum
/// relative error over all input coordinates, with the relative error
/// denominator `max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[(Vec<f64>, Vec<usize>)], eps: f64) -> f64
where
    F: for<'a> Fn(&'a Tape<f64>, &[Tensor<'a, f64>]) -> Tensor<'a, f64>,
{
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::<f64>::new();
        let leaves: Vec<_> = inputs
            .iter()
            .map(|(d, s)| tape.tensor(d.clone(), s, true).expect("grad_check input"))
            .collect();
        let loss = f(&tape, &leaves);
        tape.backward(loss).expect("grad_check backward");
        leaves
            .iter()
            .zip(inputs)
            .map(|(l, (d, _))| l.grad().unwrap_or_else(|| vec![0.0; d.len()]))
            .collect()
    };

    let eval = |points: &[Vec<f64>]| -> f64 {
        let tape = Tape::<f64>::new();
        let leaves: Vec<_> = points
            .iter()
            .zip(inputs)
            .map(|(d, (_, s))| tape.tensor(d.clone(), s, false).expect("grad_check input"))
            .collect();
        f(&tape, &leaves).item()
    };

    let mut max_err: f64 = 0.0;
    let mut points: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].0.len() {
            let orig = points[i][j];
            points[i][j] = orig + eps;
            let hi = eval(&points);
            points[i][j] = orig - eps;
            let lo = eval(&points);
            points[i][j] = orig;
            let numeric = (hi - lo) / (2.0 * eps);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            max_err = max_err.max(err);
        }
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_shape_mismatch_rejected() {
        let tape = Tape::<f32>::new();
        assert!(tape.tensor(vec![1.0, 2.0], &[3], false).is_err());
        assert!(tape.tensor(vec![], &[0], false).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f32>::new();
        let x = tape.tensor(vec![1.0, 2.0], &[2], true).unwrap();
        assert!(matches!(tape.backward(x), Err(HtrError::Contract(_))));
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn finite_check_panics_on_nan() {
        let tape = Tape::<f32>::new();
        tape.check_finite(true);
        let _ = tape.tensor(vec![f32::NAN], &[1], false);
    }
}
