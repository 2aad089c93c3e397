//! Adam with bias correction and global-norm gradient clipping.

use super::params::ParamStore;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm cap applied before the update; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// Scale all trainable gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) {
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let sq: f64 = ids
        .iter()
        .map(|&id| store.grad(id).data().iter().map(|g| g * g).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return;
    }
    let scale = max_norm / norm;
    for id in ids {
        for g in store.grad_mut(id).data_mut() {
            *g *= scale;
        }
    }
}

/// One Adam update over every trainable parameter, then zero all grads.
///
/// Standard bias-corrected Adam: m̂ = m/(1−β1ᵗ), v̂ = v/(1−β2ᵗ),
/// θ ← θ − lr·m̂/(√v̂ + ε).
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) {
    if let Some(max_norm) = cfg.clip_norm {
        clip_global_norm(store, max_norm);
    }

    let t = store.advance_step();
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);

    for id in store.ids().collect::<Vec<_>>() {
        if !store.is_trainable(id) {
            continue;
        }
        let grad: Vec<f64> = store.grad(id).data().to_vec();
        let (value, m, v, _) = store.adam_state_mut(id);
        for k in 0..grad.len() {
            let g = grad[k];
            m.data_mut()[k] = cfg.beta1 * m.data()[k] + (1.0 - cfg.beta1) * g;
            v.data_mut()[k] = cfg.beta2 * v.data()[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m.data()[k] / bc1;
            let v_hat = v.data()[k] / bc2;
            value.data_mut()[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    store.zero_grads();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn zero_grad_leaves_parameter_unchanged() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![1.5, -2.0]));
        adam_step(&mut s, &AdamConfig::default());
        assert_eq!(s.value(id).data(), &[1.5, -2.0]);
    }

    #[test]
    fn constant_grad_moves_opposite_sign() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![0.0]));
        let cfg = AdamConfig::default();
        for _ in 0..5 {
            s.accumulate_grad(id, &Tensor::vector(vec![3.0]));
            adam_step(&mut s, &cfg);
        }
        assert!(s.value(id).data()[0] < 0.0);

        let id2 = {
            let mut s2 = ParamStore::new();
            let id2 = s2.add("w", Tensor::vector(vec![0.0]));
            for _ in 0..5 {
                s2.accumulate_grad(id2, &Tensor::vector(vec![-3.0]));
                adam_step(&mut s2, &cfg);
            }
            assert!(s2.value(id2).data()[0] > 0.0);
            id2
        };
        let _ = id2;
    }

    #[test]
    fn first_step_is_approximately_lr() {
        // m̂ = g, v̂ = g² at t=1, so Δ = −lr·g/(|g|+ε) ≈ −lr for g=1.
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![0.0]));
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        };
        s.accumulate_grad(id, &Tensor::vector(vec![1.0]));
        adam_step(&mut s, &cfg);
        let delta = s.value(id).data()[0];
        assert!((delta + 0.1).abs() < 1e-6, "Δ = {delta}");
    }

    #[test]
    fn frozen_parameters_never_move() {
        let mut s = ParamStore::new();
        let id = s.add_frozen("frozen", Tensor::vector(vec![4.0]));
        s.accumulate_grad(id, &Tensor::vector(vec![100.0]));
        adam_step(&mut s, &AdamConfig::default());
        assert_eq!(s.value(id).data(), &[4.0]);
    }

    #[test]
    fn clipping_scales_to_the_requested_norm() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![0.0, 0.0]));
        s.accumulate_grad(id, &Tensor::vector(vec![300.0, 400.0]));
        clip_global_norm(&mut s, 1.0);
        let g = s.grad(id).data();
        assert!((g[0] - 0.6).abs() < 1e-12);
        assert!((g[1] - 0.8).abs() < 1e-12);

        // Below the cap nothing changes.
        let mut s2 = ParamStore::new();
        let id2 = s2.add("w", Tensor::vector(vec![0.0]));
        s2.accumulate_grad(id2, &Tensor::vector(vec![0.25]));
        clip_global_norm(&mut s2, 5.0);
        assert_eq!(s2.grad(id2).data(), &[0.25]);
    }
}
