use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

/// A dense f32 grid with an optional gradient buffer.
///
/// Handles are reference-counted: cloning a `Tensor` aliases the same
/// storage, which is how parameters stay shared between the module that owns
/// them and the tape nodes that consume them.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

pub struct TensorData {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub requires_grad: bool,
}

impl TensorData {
    /// Disjoint borrows of the value (mutable) and gradient (shared) buffers.
    pub fn split_value_grad(&mut self) -> (&mut [f32], &[f32]) {
        (&mut self.value, &self.grad)
    }
}

impl Tensor {
    pub fn from_vec(shape: &[usize], value: Vec<f32>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "value length must equal the product of the shape"
        );
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape: shape.to_vec(),
                value,
                grad: Vec::new(),
                requires_grad: false,
            })),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::from_vec(&[1], vec![v])
    }

    /// Marks the tensor as a differentiable leaf and allocates its gradient buffer.
    pub fn with_grad(self) -> Tensor {
        {
            let mut d = self.inner.borrow_mut();
            let n = d.value.len();
            d.requires_grad = true;
            d.grad = vec![0.0; n];
        }
        self
    }

    pub(crate) fn ensure_grad_buffer(&self) {
        let mut d = self.inner.borrow_mut();
        if d.grad.len() != d.value.len() {
            let n = d.value.len();
            d.grad = vec![0.0; n];
        }
        d.requires_grad = true;
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().value.len()
    }

    pub fn data(&self) -> Ref<'_, TensorData> {
        self.inner.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, TensorData> {
        self.inner.borrow_mut()
    }

    pub fn value(&self) -> Vec<f32> {
        self.inner.borrow().value.clone()
    }

    pub fn grad(&self) -> Vec<f32> {
        self.inner.borrow().grad.clone()
    }

    /// Scalar payload of a shape-`[1]` tensor.
    pub fn item(&self) -> f32 {
        let d = self.inner.borrow();
        assert_eq!(d.value.len(), 1, "item() on a non-scalar tensor");
        d.value[0]
    }

    pub fn zero_grad(&self) {
        let mut d = self.inner.borrow_mut();
        for g in d.grad.iter_mut() {
            *g = 0.0;
        }
    }

    /// Stable identity key for adjoint bookkeeping during a backward pass.
    pub(crate) fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            d.shape, d.requires_grad
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_buffer_matches_value_len() {
        let t = Tensor::zeros(&[2, 3]).with_grad();
        assert_eq!(t.grad().len(), 6);
        assert!(t.requires_grad());
    }

    #[test]
    fn clones_alias_storage() {
        let t = Tensor::zeros(&[2]).with_grad();
        let u = t.clone();
        t.data_mut().value[0] = 5.0;
        assert_eq!(u.value()[0], 5.0);
    }

    #[test]
    #[should_panic]
    fn shape_value_mismatch_panics() {
        let _ = Tensor::from_vec(&[2, 2], vec![1.0; 3]);
    }
}
