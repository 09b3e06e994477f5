use serde::{Deserialize, Serialize};

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam step; `t` is the 1-based step number.
///
/// Where `mask` is given, masked-out positions receive a zero gradient.
pub fn adam_update<T: Real>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    mask: Option<&[u8]>,
    t: u64,
    cfg: &AdamConfig,
) {
    assert!(t >= 1, "adam step numbers start at 1");
    assert!(params.len() == grads.len() && m.len() == params.len() && v.len() == params.len());
    let (b1, b2) = (T::cast(cfg.beta1), T::cast(cfg.beta2));
    let lr = T::cast(cfg.lr);
    let eps = T::cast(cfg.eps);
    let c1 = T::cast(1.0 - cfg.beta1.powf(t as f64));
    let c2 = T::cast(1.0 - cfg.beta2.powf(t as f64));
    let one = T::one();
    for i in 0..params.len() {
        let g = match mask {
            Some(mk) if mk[i] == 0 => T::zero(),
            _ => grads[i],
        };
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
