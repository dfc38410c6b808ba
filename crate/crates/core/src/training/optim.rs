use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParameterSet;
use crate::tensor::Tensor;

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
        }
    }
}

/// First and second moment estimates plus the number of updates applied.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update.
///
/// Parameters without an entry in `grads` see a zero gradient (their
/// moments still decay). A gradient for an unknown parameter or with the
/// wrong shape is rejected before anything is modified.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| TrainError::UnknownParameter(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(TrainError::ShapeMismatch {
                name: name.clone(),
                expected: p.shape(),
                found: g.shape(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let (rows, cols) = p.shape();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(rows, cols));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(rows, cols));
        let g = grads.get(name);
        for k in 0..p.len() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            let mk = cfg.beta1 * m.data()[k] + (1.0 - cfg.beta1) * gk;
            let vk = cfg.beta2 * v.data()[k] + (1.0 - cfg.beta2) * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let m_hat = mk / c1;
            let v_hat = vk / c2;
            p.data_mut()[k] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Linear warmup over the first `warmup_frac` of `total` steps to `peak`,
/// then linear decay towards zero at step `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub total: usize,
    pub warmup: usize,
}

impl LinearSchedule {
    pub const DEFAULT_WARMUP_FRAC: f64 = 0.06;

    pub fn new(peak: f64, total: usize, warmup_frac: f64) -> Self {
        Self {
            peak,
            total,
            warmup: (warmup_frac * total as f64).round() as usize,
        }
    }

    /// Learning rate for the zero-based `step`.
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.peak * (step + 1) as f64 / self.warmup as f64
        } else {
            let remaining = self.total.saturating_sub(step) as f64;
            self.peak * remaining / (self.total - self.warmup).max(1) as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar(1.5);
        let mut s = AdamState::default();
        for _ in 0..3 {
            adam_step(&mut p, &grad(0.0), &mut s, 0.1, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.get("w").unwrap().get(0, 0), 1.5);
    }

    #[test]
    fn two_hand_computed_steps() {
        let cfg = AdamConfig::default();
        let (lr, g1, g2) = (0.01, 0.5, -0.2);
        let mut p = scalar(1.0);
        let mut s = AdamState::default();
        adam_step(&mut p, &grad(g1), &mut s, lr, &cfg).unwrap();
        adam_step(&mut p, &grad(g2), &mut s, lr, &cfg).unwrap();

        let m1 = 0.1 * g1;
        let v1 = 0.02 * g1 * g1;
        let x1 = 1.0 - lr * (m1 / 0.1) / ((v1 / 0.02).sqrt() + 1e-6);
        let m2 = 0.9 * m1 + 0.1 * g2;
        let v2 = 0.98 * v1 + 0.02 * g2 * g2;
        let x2 = x1 - lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.98 * 0.98)).sqrt() + 1e-6);
        assert!((p.get("w").unwrap().get(0, 0) - x2).abs() < 1e-15);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn first_step_is_lr_times_sign_for_any_betas() {
        for (b1, b2) in [(0.9, 0.98), (0.5, 0.5), (0.0, 0.999)] {
            let cfg = AdamConfig { beta1: b1, beta2: b2, eps: 0.0 };
            let mut p = scalar(0.0);
            adam_step(&mut p, &grad(-3.7), &mut AdamState::default(), 0.25, &cfg).unwrap();
            assert!((p.get("w").unwrap().get(0, 0) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_and_name_errors() {
        let mut p = scalar(0.0);
        let mut s = AdamState::default();
        let bad = BTreeMap::from([("w".to_string(), Tensor::zeros(2, 1))]);
        assert!(matches!(
            adam_step(&mut p, &bad, &mut s, 0.1, &AdamConfig::default()),
            Err(TrainError::ShapeMismatch { .. })
        ));
        let unknown = BTreeMap::from([("u".to_string(), Tensor::scalar(1.0))]);
        assert!(matches!(
            adam_step(&mut p, &unknown, &mut s, 0.1, &AdamConfig::default()),
            Err(TrainError::UnknownParameter(_))
        ));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LinearSchedule::new(1.0, 100, 0.06);
        assert_eq!(s.warmup, 6);
        assert!((s.at(0) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(s.at(5), 1.0);
        assert_eq!(s.at(6), 1.0);
        assert!((s.at(99) - 1.0 / 94.0).abs() < 1e-15);
        assert!((1..100).all(|k| k < 6 || s.at(k) <= s.at(k - 1)));
        let flat = LinearSchedule::new(0.5, 1, 0.06);
        assert_eq!(flat.at(0), 0.5);
    }
}
