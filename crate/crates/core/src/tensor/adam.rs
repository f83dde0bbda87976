//! Bias-corrected Adam over an ordered parameter list.

use super::Tensor;

/// Optimizer state. Moment buffers are kept per parameter, aligned with the
/// order of the parameter list handed to [`AdamState::apply`]; that order
/// must stay stable across steps.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: Vec<Moments>,
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// One update. `grads[i]` must match `params[i]` in length; missing
    /// gradients (None) leave the parameter and its moments untouched by
    /// the gradient but still decay nothing — the whole slot is skipped.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[Option<&[f64]>]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                })
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter list changed size");

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for ((param, grad), slot) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let Some(g) = grad else { continue };
            assert_eq!(g.len(), param.numel(), "gradient length mismatch");
            let data = param.data_mut();
            for i in 0..g.len() {
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
