use super::{Param, Tensor};

/// Parametric ReLU with one learnable negative slope per channel.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub alpha: Param,
}

impl PRelu {
    pub const INIT_SLOPE: f32 = 0.25;

    pub fn new(channels: usize) -> Self {
        PRelu {
            alpha: Param::new(vec![Self::INIT_SLOPE; channels]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        for c in 0..y.channels {
            let a = self.alpha.value[c];
            for v in y.channel_mut(c) {
                if *v < 0.0 {
                    *v *= a;
                }
            }
        }
        y
    }

    /// `x` is the pre-activation input.
    pub fn backward(&mut self, x: &Tensor, mut dy: Tensor) -> Tensor {
        for c in 0..x.channels {
            let a = self.alpha.value[c];
            let mut da = 0.0f64;
            for (d, &v) in dy.channel_mut(c).iter_mut().zip(x.channel(c)) {
                if v < 0.0 {
                    da += (*d * v) as f64;
                    *d *= a;
                }
            }
            self.alpha.grad[c] += da as f32;
        }
        dy
    }
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in &mut y.data {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
    y
}

/// Gradient through the logistic function given its output `p`.
pub fn sigmoid_backward(p: &Tensor, mut dp: Tensor) -> Tensor {
    for (d, &pv) in dp.data.iter_mut().zip(&p.data) {
        *d *= pv * (1.0 - pv);
    }
    dp
}
