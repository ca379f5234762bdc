//! Adaptive-moment optimizer with decoupled weight decay.

use super::{GradSet, Model};

pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(param_sizes: &[usize], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update: `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn step(&mut self, lr: f64, model: &mut Model, grads: &GradSet) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let grad_slices = grads.named_slices();
        let param_slices = model.named_slices_mut();
        assert_eq!(grad_slices.len(), param_slices.len());
        for (i, ((pname, params), (gname, _, grad))) in
            param_slices.into_iter().zip(grad_slices).enumerate()
        {
            debug_assert_eq!(pname, gname, "parameter order mismatch");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..params.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                params[j] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[j]);
            }
        }
    }
}
