//! AdamW with global gradient-norm clipping, and parameter EMA.

use super::ParamStore;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm the gradient is clipped to before each step.
    pub clip_norm: Option<f64>,
    /// Reject non-finite gradients instead of applying them.
    pub strict: bool,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        AdamW {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            clip_norm: Some(1.0),
            strict: true,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Clips `grads` in place and applies one update. Returns the gradient
    /// norm measured before clipping.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &mut [Tensor<T>]) -> Result<f64> {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        let norm = clip_grad_norm(grads, self.clip_norm);
        if !norm.is_finite() {
            if self.strict {
                return Err(Error::NonFinite("gradient"));
            }
            return Ok(norm);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let decay = T::of(1.0 - self.lr * self.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gk), mk), vk) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mk = b1 * *mk + (T::one() - b1) * gk;
                *vk = b2 * *vk + (T::one() - b2) * gk * gk;
                let mhat = mk.f64() / bc1;
                let vhat = vk.f64() / bc2;
                *w = *w * decay - T::of(self.lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
        Ok(norm)
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before scaling.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: Option<f64>) -> f64 {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if let Some(max) = max_norm {
        if norm.is_finite() && norm > max {
            let s = T::of(max / norm);
            for g in grads.iter_mut() {
                g.scale_assign(s);
            }
        }
    }
    norm
}

/// `shadow <- decay * shadow + (1 - decay) * value` for every parameter.
pub fn ema_update<T: Real>(params: &mut ParamStore<T>, decay: f64) {
    let (d, rest) = (T::of(decay), T::of(1.0 - decay));
    for p in params.iter_mut() {
        for (s, &w) in p.ema.data_mut().iter_mut().zip(p.value.data()) {
            *s = d * *s + rest * w;
        }
    }
}
