//! Adam with per-group learning rates, exponential decay and gradient
//! conditioning (norm clip for cameras, norm scaling for the networks).

use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::{c, Real};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn network(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Camera optimizer runs with beta1 = 0.2 to smooth out pose noise.
    pub fn camera(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.2, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state for the parameters of a single group.
pub struct Adam<T> {
    pub config: AdamConfig,
    pub group: ParamGroup,
    pub step: usize,
    pub moments1: Vec<Tensor<T>>,
    pub moments2: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, group: ParamGroup, store: &ParamStore<T>) -> Self {
        let moments1 = store
            .ids()
            .map(|id| {
                let (r, cl) = store.get(id).shape();
                Tensor::zeros(r, cl)
            })
            .collect::<Vec<_>>();
        let moments2 = moments1.clone();
        Adam { config, group, step: 0, moments1, moments2 }
    }

    /// One Adam step over the group's unfrozen parameters.
    /// `grads[i]` corresponds to `ParamId(i)`; missing entries are zero
    /// gradients (moments still decay).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = c::<T>(self.config.beta1);
        let b2 = c::<T>(self.config.beta2);
        let eps = c::<T>(self.config.eps);
        let lr = c::<T>(lr);
        let bias1 = T::one() - b1.powi(t);
        let bias2 = T::one() - b2.powi(t);
        for id in store.ids() {
            if store.group(id) != self.group || store.is_frozen(id) {
                continue;
            }
            let i = id.0;
            let zero = T::zero();
            let m1 = &mut self.moments1[i];
            let m2 = &mut self.moments2[i];
            let p = store.get_mut(id);
            for j in 0..p.len() {
                let g = grads[i].as_ref().map_or(zero, |g| g.data()[j]);
                let m = b1 * m1.data()[j] + (T::one() - b1) * g;
                let v = b2 * m2.data()[j] + (T::one() - b2) * g * g;
                m1.data_mut()[j] = m;
                m2.data_mut()[j] = v;
                let mhat = m / bias1;
                let vhat = v / bias2;
                p.data_mut()[j] = p.data()[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Global-norm clip: rescale so the combined norm does not exceed `max_norm`.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Tensor<T>>], ids: &[ParamId], max_norm: f64) {
    let mut sq = T::zero();
    for id in ids {
        if let Some(g) = &grads[id.0] {
            sq += g.squared_norm();
        }
    }
    let norm = sq.sqrt();
    let maxn = c::<T>(max_norm);
    if norm > maxn && norm > T::zero() {
        let s = maxn / norm;
        for id in ids {
            if let Some(g) = &mut grads[id.0] {
                g.scale_assign(s);
            }
        }
    }
}
