use serde::Serialize;

use crate::numerics::{Scalar, Tensor};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 2e-4,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments, one pair per optimized tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &[&Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// Cosine annealing from `lr_max` at step 0 to 0 at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * lr_max * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One AdamW update of every tensor in `params` with matching `grads`.
/// Moments are kept in `f64`.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState,
    cfg: &AdamW,
    lr: f64,
) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    assert_eq!(params.len(), state.m.len(), "optimizer state matches parameter list");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        assert_eq!(p.shape(), g.shape(), "gradient shape");
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gv = gv.as_f64();
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gv;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let x = pv.as_f64();
            let update = m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * x;
            *pv = T::from_f64_lossy(x - lr * update);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.3), 0.3);
        assert!(cosine_lr(100, 100, 0.3).abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.3) - 0.15).abs() < 1e-16);
        assert!(cosine_lr(30, 100, 1.0) > cosine_lr(31, 100, 1.0));
    }

    #[test]
    fn single_step_on_square() {
        // f(x) = x², x = 1: g = 2, m̂ = 2, v̂ = 4
        let lr = 1e-3;
        let mut x = Tensor::<f64>::scalar(1.0);
        let g = Tensor::scalar(2.0);
        let mut st = AdamState::new(&[&x]);
        adamw_step(&mut [&mut x], &[g], &mut st, &AdamW::default(), lr);
        let want = 1.0 - lr * (2.0 / (2.0 + 2e-4) + 0.01 * 1.0);
        assert!((x.data()[0] - want).abs() < 1e-15, "{} vs {want}", x.data()[0]);
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut x = Tensor::<f32>::full(&[2, 2], 0.5);
        let before = x.clone();
        let mut st = AdamState::new(&[&x]);
        adamw_step(
            &mut [&mut x],
            &[Tensor::full(&[2, 2], 1.0)],
            &mut st,
            &AdamW::default(),
            0.0,
        );
        assert_eq!(x, before);
    }
}
