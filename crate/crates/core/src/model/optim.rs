//! AdamW with decoupled weight decay and the cosine warm-restart schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One AdamW update. Parameters without a gradient entry are treated as
/// having a zero gradient (they still decay).
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let n = p.len();
        let g = grads.get(name).map(Tensor::data);
        if let Some(g) = g {
            if g.len() != n {
                return Err(Error::Shape(format!("gradient for `{name}` has {} of {n} entries", g.len())));
            }
        }
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let data = p.data_mut();
        for i in 0..n {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * weight_decay * data[i];
            data[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

/// Cosine annealing with warm restarts; the cycle length is
/// `epochs / cycles` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineWarmRestarts {
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: f64,
    pub cycles: u32,
}

impl CosineWarmRestarts {
    pub fn new(lr_max: f64, lr_min: f64, epochs: f64, cycles: u32) -> Result<Self> {
        if cycles == 0 || epochs <= 0.0 || lr_max <= 0.0 || lr_min < 0.0 {
            return Err(Error::Config(format!(
                "schedule lr_max={lr_max} lr_min={lr_min} epochs={epochs} cycles={cycles}"
            )));
        }
        Ok(Self {
            lr_max,
            lr_min,
            epochs,
            cycles,
        })
    }

    pub fn cycle_length(&self) -> f64 {
        self.epochs / self.cycles as f64
    }

    /// Learning rate at (possibly fractional) epoch `t`.
    pub fn lr(&self, t: f64) -> f64 {
        let period = self.cycle_length();
        let tc = t.rem_euclid(period);
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * tc / period).cos())
    }
}

/// Free-function form of [`CosineWarmRestarts::lr`].
pub fn cosine_warm_restart_lr(t: f64, schedule: &CosineWarmRestarts) -> f64 {
    schedule.lr(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![value])).unwrap();
        s
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = single(1.5);
        let mut st = AdamState::default();
        for _ in 0..3 {
            adamw_step(&mut p, &BTreeMap::new(), &mut st, 0.1, 0.0).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn zero_gradient_with_decay_is_pure_shrink() {
        let mut p = single(2.0);
        let mut st = AdamState::default();
        adamw_step(&mut p, &BTreeMap::new(), &mut st, 0.1, 0.5).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 2.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.0);
        let mut st = AdamState::default();
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::vector(vec![1.0]));
        adamw_step(&mut p, &g, &mut st, 1e-3, 0.0).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + ε)
        let expect = -1e-3 / (1.0 + EPSILON);
        assert!((p.get("w").unwrap().item() - expect).abs() < 1e-18);
    }

    #[test]
    fn schedule_landmarks() {
        let s = CosineWarmRestarts::new(1e-5, 0.0, 1024.0, 16).unwrap();
        let t = s.cycle_length();
        assert_eq!(t, 64.0);
        assert_eq!(s.lr(0.0), 1e-5);
        assert!((s.lr(t / 2.0) - 0.5e-5).abs() < 1e-20);
        assert!(s.lr(t * (1.0 - 1e-12)) < 1e-20);
        assert_eq!(s.lr(t), 1e-5);
        for k in 0..40 {
            let x = k as f64 * 1.625;
            assert_eq!(s.lr(x + t), s.lr(x));
        }
    }
}
