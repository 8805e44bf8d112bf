use std::cell::{Ref, RefCell};
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::real::Real;
use crate::error::{Error, Result};

/// Dense n-dimensional array. Values are immutable during forward and
/// backward passes; only the optimizer (between steps) and checkpoint
/// restore rewrite them. Clones are cheap and share storage, so a
/// parameter held by a model and by an optimizer registry is one buffer.
pub struct Tensor<R: Real> {
    shape: Rc<Vec<usize>>,
    data: Rc<RefCell<Vec<R>>>,
    grad: Option<Rc<RefCell<Vec<R>>>>,
}

impl<R: Real> Clone for Tensor<R> {
    fn clone(&self) -> Self {
        Tensor {
            shape: Rc::clone(&self.shape),
            data: Rc::clone(&self.data),
            grad: self.grad.clone(),
        }
    }
}

impl<R: Real> std::fmt::Debug for Tensor<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.data.borrow();
        write!(
            f,
            "Tensor{:?} grad={} data={:?}",
            self.shape,
            self.grad.is_some(),
            &d[..d.len().min(8)]
        )
    }
}

impl<R: Real> Tensor<R> {
    pub fn from_vec(shape: &[usize], data: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::from_vec", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: Rc::new(shape.to_vec()),
            data: Rc::new(RefCell::new(data)),
            grad: None,
        })
    }

    pub fn scalar(v: R) -> Self {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![R::ZERO; numel]).unwrap()
    }

    pub fn full(shape: &[usize], v: R) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![v; numel]).unwrap()
    }

    /// Gaussian init, mean 0, given std, from a seeded generator.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| R::from_f64(sample_normal(rng) * std))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Marks the tensor as a learnable parameter by attaching a zeroed
    /// gradient buffer.
    pub fn requires_grad(mut self) -> Self {
        if self.grad.is_none() {
            let n = self.numel();
            self.grad = Some(Rc::new(RefCell::new(vec![R::ZERO; n])));
        }
        self
    }

    pub(crate) fn with_grad_buffer(self, enabled: bool) -> Self {
        if enabled {
            self.requires_grad()
        } else {
            self
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<R>> {
        self.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<R> {
        self.data.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<R>>> {
        self.grad.as_ref().map(|g| g.borrow())
    }

    pub(crate) fn grad_rc(&self) -> Option<Rc<RefCell<Vec<R>>>> {
        self.grad.as_ref().map(Rc::clone)
    }

    pub(crate) fn data_rc(&self) -> Rc<RefCell<Vec<R>>> {
        Rc::clone(&self.data)
    }

    pub fn zero_grad(&self) {
        if let Some(g) = &self.grad {
            for v in g.borrow_mut().iter_mut() {
                *v = R::ZERO;
            }
        }
    }

    /// Replaces the underlying values in place. Callers are the optimizer
    /// and checkpoint restore, which own mutation rights between steps.
    pub fn set_data(&self, new: &[R]) -> Result<()> {
        if new.len() != self.numel() {
            return Err(Error::shape("Tensor::set_data", &self.shape, &[new.len()]));
        }
        self.data.borrow_mut().copy_from_slice(new);
        Ok(())
    }

    /// Zero-copy view with a new shape; data and gradient buffers are
    /// shared, so gradient flow needs no extra bookkeeping.
    pub(crate) fn reshaped(&self, shape: &[usize]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.numel());
        Tensor {
            shape: Rc::new(shape.to_vec()),
            data: Rc::clone(&self.data),
            grad: self.grad.clone(),
        }
    }

    pub fn item(&self) -> Result<R> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data.borrow()[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.borrow().iter().all(|v| v.is_finite())
    }
}

/// Box-Muller draw; two uniforms per normal keeps the stream layout simple
/// and reproducible.
fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
