use super::params::{ParamId, ParamStore};
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed subset of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    params: Vec<ParamId>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new<T: Real>(config: AdamConfig, store: &ParamStore<T>, params: Vec<ParamId>) -> Self {
        let params: Vec<ParamId> = params
            .into_iter()
            .filter(|p| store.is_trainable(*p))
            .collect();
        let m = params
            .iter()
            .map(|p| vec![0.0; store.value(*p).len()])
            .collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
            params,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    pub fn set_moments(&mut self, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<()> {
        let fits = |s: &[Vec<f32>]| {
            s.len() == self.m.len() && s.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
        };
        if !fits(&m) || !fits(&v) {
            return Err(Error::Format(
                "optimizer state does not match the parameter layout".into(),
            ));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update from the gradients currently held by `store`. Parameters
    /// without a gradient are left untouched.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, &id) in self.params.iter().enumerate() {
            let Some(g) = store.grad(id).map(|g| g.to_vec()) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = store.value_mut(id);
            for (((p, &gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi.f64();
                let mn = c.beta1 * *mi as f64 + (1.0 - c.beta1) * gi;
                let vn = c.beta2 * *vi as f64 + (1.0 - c.beta2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = c.lr * (mn / bc1) / ((vn / bc2).sqrt() + c.eps);
                *p = T::of(p.f64() - update);
            }
        }
    }
}
