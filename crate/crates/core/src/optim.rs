//! Adam with optional decoupled weight decay, and the one-cycle schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::GradMap;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// `p <- p - lr * wd * p` before the Adam step; otherwise `wd * p` is
    /// added to the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decoupled: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every trainable tensor that has a gradient. Tensors
    /// without a gradient this step are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradMap<T>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGrad(name.clone()));
            }
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2, eps) = (T::from_f64(c.beta1), T::from_f64(c.beta2), T::from_f64(c.eps));
        let (lr_t, wd) = (T::from_f64(lr), T::from_f64(c.weight_decay));
        let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
        let mut updates = Vec::new();
        for (name, g) in grads {
            let Some(p) = store.entry(name) else {
                return Err(Error::MissingParam(name.clone()));
            };
            if !p.trainable {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adam_step", format!("{name}: {:?} vs {:?}", g.shape(), p.value.shape())));
            }
            let n = g.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let mut out = p.value.to_vec();
            for (((x, &gi), mi), vi) in out.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let mut gi = gi;
                if c.decoupled {
                    *x -= lr_t * wd * *x;
                } else {
                    gi += wd * *x;
                }
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
            if out.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGrad(name.clone()));
            }
            updates.push((name.clone(), Tensor::new(p.value.shape().to_vec(), out)?));
        }
        store.apply_updates(updates)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OneCycle {
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        OneCycle {
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

fn cos_interp(from: f64, to: f64, frac: f64) -> f64 {
    to + (from - to) * (1.0 + (PI * frac).cos()) / 2.0
}

/// Cosine warm-up from `max_lr / div` to `max_lr` over the first
/// `pct_start` of the steps, then cosine annealing to `max_lr / final_div`.
pub fn onecycle_lr(step: usize, total_steps: usize, max_lr: f64, sched: OneCycle) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Invalid("one-cycle schedule needs total_steps > 0".into()));
    }
    if step > total_steps {
        return Err(Error::Invalid(format!("step {step} beyond total {total_steps}")));
    }
    let start = max_lr / sched.div_factor;
    let end = max_lr / sched.final_div_factor;
    let peak = sched.pct_start * total_steps as f64;
    let s = step as f64;
    Ok(if s <= peak {
        if peak == 0.0 {
            max_lr
        } else {
            cos_interp(start, max_lr, s / peak)
        }
    } else {
        cos_interp(max_lr, end, (s - peak) / (total_steps as f64 - peak))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = OneCycle::default();
        assert!((onecycle_lr(0, 100, 1.0, s).unwrap() - 0.04).abs() < 1e-15);
        assert!((onecycle_lr(30, 100, 1.0, s).unwrap() - 1.0).abs() < 1e-15);
        assert!((onecycle_lr(100, 100, 1.0, s).unwrap() - 1e-4).abs() < 1e-15);
        assert!(onecycle_lr(0, 0, 1.0, s).is_err());
        assert!(onecycle_lr(101, 100, 1.0, s).is_err());
    }

    #[test]
    fn first_step_is_minus_lr() {
        let mut store = ParamStore::<f64>::new();
        store.insert("p", Tensor::scalar(0.0), true);
        let mut grads = GradMap::new();
        grads.insert("p".to_string(), Tensor::scalar(1.0));
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        adam.step(&mut store, &grads, 0.1).unwrap();
        assert!((store.get("p").unwrap().item().unwrap() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::<f64>::new();
        store.insert("layer.w", Tensor::scalar(0.0), true);
        let mut grads = GradMap::new();
        grads.insert("layer.w".to_string(), Tensor::scalar(f64::NAN));
        let err = Adam::new(AdamConfig::default()).step(&mut store, &grads, 0.1).unwrap_err();
        assert!(err.to_string().contains("layer.w"));
    }
}
