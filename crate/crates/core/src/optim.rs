//! Adam with exponentially decayed learning rate, and Polyak (EMA) parameter
//! averaging.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

/// Continuous exponential decay: `base_lr · decay_factor^(t / decay_horizon)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_horizon: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 5e-3,
            decay_factor: 0.1,
            decay_horizon: 9e4,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, t: u64) -> f64 {
        self.base_lr * self.decay_factor.powf(t as f64 / self.decay_horizon)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            v.push(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            v.push(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if !(self.decay_horizon > 0.0 && self.decay_horizon.is_finite()) {
            v.push(format!("decay_horizon must be positive, got {}", self.decay_horizon));
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moments for a list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        let zeros: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update of every tensor in `params`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam_step",
                shape: vec![params.len(), grads.len()],
                reason: format!("optimizer tracks {} tensors", self.m.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            p.expect_same_shape(g, "adam_step")?;
            m.expect_same_shape(g, "adam_step")?;
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j].as_f64();
                let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * gj;
                let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * gj * gj;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + epsilon);
                *w = T::from_f64(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Adam over the trainable parameters of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub ids: Vec<ParamId>,
    pub state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        let shapes: Vec<&[usize]> = ids.iter().map(|&id| store.get(id).shape()).collect();
        Adam {
            state: AdamState::new(config, &shapes),
            ids,
        }
    }

    /// `grads[i]` belongs to `self.ids[i]`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        let mut params: Vec<Tensor<T>> = self.ids.iter().map(|&id| store.get(id).clone()).collect();
        {
            let mut refs: Vec<&mut Tensor<T>> = params.iter_mut().collect();
            let grefs: Vec<&Tensor<T>> = grads.iter().collect();
            self.state.step(&mut refs, &grefs, lr)?;
        }
        for (&id, p) in self.ids.iter().zip(params) {
            *store.get_mut(id) = p;
        }
        Ok(())
    }
}

/// Exponential moving average of every parameter, buffers included.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyakState<T> {
    pub decay: f64,
    pub shadow: Vec<Tensor<T>>,
}

impl<T: Real> PolyakState<T> {
    pub fn new(store: &ParamStore<T>, decay: f64) -> Self {
        PolyakState {
            decay,
            shadow: store.iter().map(|(_, p)| p.value.clone()).collect(),
        }
    }

    /// `shadow ← decay·shadow + (1 − decay)·params`.
    pub fn update(&mut self, store: &ParamStore<T>) {
        let d = self.decay;
        for (s, (_, p)) in self.shadow.iter_mut().zip(store.iter()) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.value.data()) {
                *a = T::from_f64(d * a.as_f64() + (1.0 - d) * b.as_f64());
            }
        }
    }

    /// A copy of `store` with averaged trainable values. Buffers keep their
    /// current values.
    pub fn averaged(&self, store: &ParamStore<T>) -> ParamStore<T> {
        let mut out = store.clone();
        for ((id, p), s) in store.iter().zip(&self.shadow) {
            if p.kind == ParamKind::Trainable {
                *out.get_mut(id) = s.clone();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 5e-3);
        assert!((s.lr_at(90_000) - 5e-4).abs() <= 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut w = Tensor::<f64>::scalar(1.0);
        let g = Tensor::<f64>::scalar(1.0);
        let mut st = AdamState::new(AdamConfig::default(), &[&[]]);
        st.step(&mut [&mut w], &[&g], 0.1).unwrap();
        assert!((w.item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut w = Tensor::<f64>::zeros(&[2]);
        let g = Tensor::<f64>::zeros(&[3]);
        let mut st = AdamState::new(AdamConfig::default(), &[&[2]]);
        assert!(st.step(&mut [&mut w], &[&g], 0.1).is_err());
    }
}
