use serde::{Deserialize, Serialize};

use super::real::Real;
use super::unet::UNet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, net: &mut UNet<T>) {
        let params = net.params_mut().into_iter().filter_map(|p| p.grad.map(|g| (p.value.as_mut_slice(), g.as_mut_slice())));
        self.step_params(params);
    }

    /// Same update over plain `(value, grad)` slices, in a fixed order across calls.
    pub fn step_params<'a>(&mut self, params: impl IntoIterator<Item = (&'a mut [T], &'a mut [T])>)
    where
        T: 'a,
    {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = T::of(c.lr * bc2.sqrt() / bc1);
        let eps = T::of(c.eps * bc2.sqrt());
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (o1, o2) = (T::one() - b1, T::one() - b2);
        for (k, (value, g)) in params.into_iter().enumerate() {
            if self.m.len() <= k {
                self.m.push(vec![T::zero(); g.len()]);
                self.v.push(vec![T::zero(); g.len()]);
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + o1 * gi;
                v[i] = b2 * v[i] + o2 * gi * gi;
                value[i] -= step * m[i] / (v[i].sqrt() + eps);
                g[i] = T::zero();
            }
        }
    }
}
