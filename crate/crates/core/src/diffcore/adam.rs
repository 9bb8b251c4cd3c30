//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Real};
use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 gives plain Adam.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Applies one update to every parameter, then zeroes the gradients.
///
/// Every parameter must have received a gradient since the last step.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, cfg: &AdamConfig) -> Result<()> {
    if let Some((name, _)) = store.iter().find(|(_, e)| !e.has_grad()) {
        return Err(contract(format!("parameter `{name}` has no gradient")));
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one, eps, lr, wd) = (T::one(), T::of(cfg.eps), T::of(cfg.lr), T::of(cfg.weight_decay));
    for (_, e) in store.iter_mut() {
        e.step += 1;
        let t = e.step as i32;
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let value = e.value.data_mut();
        let (m, v) = (e.m.data_mut(), e.v.data_mut());
        for (i, g) in e.grad.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (one - b1) * *g;
            v[i] = b2 * v[i] + (one - b2) * *g * *g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            value[i] = value[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * value[i]);
            *g = T::zero();
        }
        e.has_grad = false;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn store(v: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap()).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore<f64>, g: &[f64]) {
        s.accumulate_grad("w", &Tensor::new(vec![g.len()], g.to_vec()).unwrap())
            .unwrap();
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[0.5]);
        set_grad(&mut s, &[1.0]);
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        // m_hat = 1, v_hat = 1 => delta = -lr / (1 + eps)
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((s.value("w").unwrap().item() - expected).abs() < 1e-15);
        assert_eq!(s.get("w").unwrap().step, 1);
        assert_eq!(s.grad("w").unwrap().item(), 0.0);
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let mut s = store(&[0.25, -1.0]);
        set_grad(&mut s, &[0.0, 0.0]);
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        assert_eq!(s.value("w").unwrap().data(), &[0.25, -1.0]);
    }

    #[test]
    fn constant_gradient_keeps_step_size() {
        let mut s = store(&[0.0]);
        let cfg = AdamConfig::default();
        set_grad(&mut s, &[0.3]);
        adam_step(&mut s, &cfg).unwrap();
        let d1 = s.value("w").unwrap().item();
        set_grad(&mut s, &[0.3]);
        adam_step(&mut s, &cfg).unwrap();
        let d2 = s.value("w").unwrap().item() - d1;
        // Hand-computed: both bias-corrected ratios equal g/|g|, so |d2| == |d1|
        // up to the eps term.
        assert!(((d2.abs() - d1.abs()) / d1.abs()).abs() < 0.01);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut s = store(&[1.0]);
        assert!(adam_step(&mut s, &AdamConfig::default()).is_err());
    }
}
