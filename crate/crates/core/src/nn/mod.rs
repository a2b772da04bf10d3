//! Small CPU neural-network toolkit: the layers the segmentation networks
//! are built from, each with an explicit backward pass.

mod activation;
mod conv;
mod optim;
mod tensor;

pub use activation::{sigmoid_backward, sigmoid_forward, PRelu};
pub use conv::{Conv3d, UpConv3d};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;

/// Makes the current thread flush subnormal floats to zero. Late in
/// training many gradients and Adam moments underflow, and subnormal
/// arithmetic is slow enough to dominate an epoch.
pub fn flush_subnormals() {
    #[cfg(target_arch = "x86_64")]
    #[allow(deprecated)]
    // SAFETY: only sets the FTZ and DAZ bits of this thread's MXCSR.
    unsafe {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        _mm_setcsr(_mm_getcsr() | 0x8040);
    }
}

/// A trainable parameter buffer with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Param { value, grad }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}
