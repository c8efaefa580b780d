//! Adam optimizer over named parameter tensors.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    moments: Vec<(Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, params: &[(String, Tensor<S>)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: params
                .iter()
                .map(|(_, p)| (vec![S::zero(); p.numel()], vec![S::zero(); p.numel()]))
                .collect(),
        }
    }

    /// One update from the gradients currently stored on the parameters.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &[(String, Tensor<S>)]) {
        self.step += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let lr = S::from_f64(self.lr);
        let eps = S::from_f64(self.eps);
        let bias1 = S::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bias2 = S::from_f64(1.0 - self.beta2.powi(self.step as i32));
        for ((_, p), (m, v)) in params.iter().zip(self.moments.iter_mut()) {
            let Some(grad) = p.grad() else {
                continue;
            };
            let mut data = p.to_vec();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (S::one() - b1) * grad[i];
                v[i] = b2 * v[i] + (S::one() - b2) * grad[i] * grad[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.set_data(data).expect("parameter shape is unchanged");
        }
    }

    pub fn zero_grads(&self, params: &[(String, Tensor<S>)]) {
        for (_, p) in params {
            p.clear_grad();
        }
    }
}
