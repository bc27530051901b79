//! Adam with bias correction and inverse-time step-size decay.

use super::nn::{ParamGrads, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    /// Initial step size.
    pub lr: f64,
    /// Decay horizon in steps; `f64::INFINITY` disables decay.
    pub tau: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            tau: 2e4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Step size after `t` completed steps: `lr / (1 + t / tau)`.
    pub fn step_size(&self, t: u64) -> f64 {
        self.lr / (1.0 + t as f64 / self.tau)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |e: &super::nn::ParamEntry| Tensor::zeros(e.value.rows(), e.value.cols());
        Self {
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
            t: 0,
        }
    }

    /// One update of every trainable parameter that has a gradient, followed
    /// by projection onto the parameter constraints.
    pub fn step(&mut self, cfg: &AdamConfig, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            if let Some(g) = grads.get(id) {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter {}", store.name(id))));
                }
            }
        }
        let alpha = cfg.step_size(self.t);
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powf(self.t as f64);
        let bc2 = 1.0 - cfg.beta2.powf(self.t as f64);
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let p = store.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= alpha * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        store.project();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(value: f64) -> (ParamStore, super::super::nn::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::filled(2, 2, value));
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut store, id) = setup(0.7);
        let mut st = AdamState::new(&store);
        let mut g = ParamGrads::zeros_like(&store);
        g.set(id, Tensor::zeros(2, 2));
        st.step(&AdamConfig::default(), &mut store, &g).unwrap();
        assert_eq!(store.get(id).data(), &[0.7; 4]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = setup(0.0);
        let cfg = AdamConfig {
            lr: 0.01,
            tau: f64::INFINITY,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&store);
        let mut g = ParamGrads::zeros_like(&store);
        g.set(id, Tensor::filled(2, 2, -3.0));
        st.step(&cfg, &mut store, &g).unwrap();
        for &p in store.get(id).data() {
            assert!((p - 0.01).abs() < 1e-9, "{p}");
        }
    }

    #[test]
    fn decay_shrinks_identical_steps() {
        let (mut store, id) = setup(0.0);
        let cfg = AdamConfig {
            lr: 0.01,
            tau: 10.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&store);
        let mut g = ParamGrads::zeros_like(&store);
        g.set(id, Tensor::filled(2, 2, 1.0));
        st.step(&cfg, &mut store, &g).unwrap();
        let first = store.get(id).data()[0].abs();
        st.step(&cfg, &mut store, &g).unwrap();
        let second = store.get(id).data()[0].abs() - first;
        assert!(second < first, "{second} !< {first}");
        assert!((cfg.step_size(1) - 0.01 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut store, id) = setup(0.0);
        let mut st = AdamState::new(&store);
        let mut g = ParamGrads::zeros_like(&store);
        g.set(id, Tensor::filled(2, 2, f64::NAN));
        let msg = st.step(&AdamConfig::default(), &mut store, &g).unwrap_err().to_string();
        assert!(msg.contains("w"), "{msg}");
    }
}
