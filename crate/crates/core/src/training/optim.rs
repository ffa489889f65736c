//! AdamW: Adam moments with decoupled weight decay.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(tensors: &[Tensor<f32>]) -> AdamState {
        AdamState {
            step: 0,
            m: tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// One decoupled-weight-decay Adam update:
/// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + lambda * theta)
/// with bias-corrected moments.
pub fn adamw_step(
    tensors: &mut [Tensor<f32>],
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    lr: f32,
    weight_decay: f32,
    hyper: &AdamHyper,
) {
    assert_eq!(tensors.len(), grads.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);

    for ((theta, grad), (m, v)) in tensors
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((p, &g), m_e), v_e) in theta
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *m_e = hyper.beta1 * *m_e + (1.0 - hyper.beta1) * g;
            *v_e = hyper.beta2 * *v_e + (1.0 - hyper.beta2) * g * g;
            let m_hat = *m_e / bc1;
            let v_hat = *v_e / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + hyper.eps) + weight_decay * *p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f32) -> Vec<Tensor<f32>> {
        vec![Tensor::from_vec(&[1], vec![v])]
    }

    #[test]
    fn zero_gradient_applies_pure_decay() {
        let mut theta = single(1.0);
        let grads = single(0.0);
        let mut state = AdamState::new(&theta);
        adamw_step(&mut theta, &grads, &mut state, 0.1, 0.01, &AdamHyper::default());
        assert!((theta[0].data()[0] - 0.999).abs() < 1e-6);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut theta = single(0.0);
        let grads = single(1.0);
        let mut state = AdamState::new(&theta);
        let lr = 0.05;
        adamw_step(&mut theta, &grads, &mut state, lr, 0.0, &AdamHyper::default());
        // m_hat = 1, v_hat = 1 after bias correction at t = 1.
        assert!((theta[0].data()[0] + lr).abs() < 1e-6);
    }

    /// Plain Adam written independently; lambda = 0 must match it exactly.
    fn plain_adam_step(
        theta: &mut f32,
        g: f32,
        m: &mut f32,
        v: &mut f32,
        t: i32,
        lr: f32,
        h: &AdamHyper,
    ) {
        *m = h.beta1 * *m + (1.0 - h.beta1) * g;
        *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
        let m_hat = *m / (1.0 - h.beta1.powi(t));
        let v_hat = *v / (1.0 - h.beta2.powi(t));
        *theta -= lr * m_hat / (v_hat.sqrt() + h.eps);
    }

    #[test]
    fn no_decay_reduces_to_adam() {
        let h = AdamHyper::default();
        let mut theta = single(0.7);
        let mut state = AdamState::new(&theta);
        let (mut ref_theta, mut ref_m, mut ref_v) = (0.7f32, 0.0f32, 0.0f32);
        for (t, g) in [0.3f32, -0.8, 0.1, 0.9, -0.2].iter().enumerate() {
            adamw_step(&mut theta, &single(*g), &mut state, 0.01, 0.0, &h);
            plain_adam_step(&mut ref_theta, *g, &mut ref_m, &mut ref_v, t as i32 + 1, 0.01, &h);
            assert_eq!(theta[0].data()[0], ref_theta, "step {t}");
        }
    }

    #[test]
    fn step_counter_advances() {
        let mut theta = single(1.0);
        let mut state = AdamState::new(&theta);
        for _ in 0..3 {
            adamw_step(&mut theta, &single(0.1), &mut state, 0.01, 0.0, &AdamHyper::default());
        }
        assert_eq!(state.step, 3);
    }
}
