//! Noise schedule, training objective and deterministic probability-flow
//! sampling for per-token position distributions.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::model::{coords_tensor, Bound, Quetzal};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub sigma_data: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub n_diff: usize,
    /// Mean and standard deviation of `ln t` during training.
    pub log_t_mean: f64,
    pub log_t_std: f64,
    pub timesteps_per_token: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            sigma_data: 1.4,
            sigma_min: 1e-4,
            sigma_max: 80.0,
            rho: 7.0,
            n_diff: 60,
            log_t_mean: -1.2,
            log_t_std: 1.2,
            timesteps_per_token: 4,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return bad("need 0 < sigma_min < sigma_max");
        }
        if !(self.rho > 0.0) {
            return bad("rho must be positive");
        }
        if !(self.sigma_data > 0.0) {
            return bad("sigma_data must be positive");
        }
        if self.n_diff < 2 {
            return bad("n_diff must be at least 2");
        }
        if !(self.log_t_std > 0.0) || !self.log_t_mean.is_finite() {
            return bad("invalid training noise distribution");
        }
        if self.timesteps_per_token == 0 {
            return bad("timesteps_per_token must be positive");
        }
        Ok(())
    }
}

/// Descending noise levels `t_0 = sigma_max, ..., t_{n-1} = sigma_min`,
/// evenly spaced in `t^(1/rho)`.
pub fn karras_timesteps(n: usize, cfg: &DiffusionConfig) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 timesteps, got {n}")));
    }
    let inv = 1.0 / cfg.rho;
    let (hi, lo) = (cfg.sigma_max.powf(inv), cfg.sigma_min.powf(inv));
    let mut ts: Vec<f64> = (0..n)
        .map(|i| (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(cfg.rho))
        .collect();
    ts[0] = cfg.sigma_max;
    ts[n - 1] = cfg.sigma_min;
    Ok(ts)
}

/// Training noise level with `ln t ~ N(log_t_mean, log_t_std^2)`.
pub fn sample_train_time(rng: &mut impl Rng, cfg: &DiffusionConfig) -> f64 {
    let n = Normal::new(cfg.log_t_mean, cfg.log_t_std).expect("validated std");
    n.sample(rng).exp()
}

/// `(t^2 + sigma_data^2) / (t sigma_data)^2`.
pub fn loss_weight(t: f64, cfg: &DiffusionConfig) -> f64 {
    let s2 = cfg.sigma_data * cfg.sigma_data;
    (t * t + s2) / (t * t * s2)
}

/// `(D - x) / t^2`.
pub fn tweedie_score(d: &Vec3, t: f64, x: &Vec3) -> Vec3 {
    let t2 = t * t;
    [(d[0] - x[0]) / t2, (d[1] - x[1]) / t2, (d[2] - x[2]) / t2]
}

/// A batch denoiser: clean-data estimates for points all at noise `t`.
pub trait Denoiser {
    fn denoise(&self, t: f64, x: &[Vec3]) -> Result<Vec<Vec3>>;
}

/// A denoiser that also yields the exact Jacobian `dD/dx` of each point
/// (`jac[i][k][j] = dD_k / dx_j`).
pub trait JacobianDenoiser: Denoiser {
    fn denoise_jacobian(&self, t: f64, x: &[Vec3]) -> Result<(Vec<Vec3>, Vec<[[f64; 3]; 3]>)>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn denoise(&self, t: f64, x: &[Vec3]) -> Result<Vec<Vec3>> {
        (**self).denoise(t, x)
    }
}

impl<D: JacobianDenoiser + ?Sized> JacobianDenoiser for &D {
    fn denoise_jacobian(&self, t: f64, x: &[Vec3]) -> Result<(Vec<Vec3>, Vec<[[f64; 3]; 3]>)> {
        (**self).denoise_jacobian(t, x)
    }
}

/// Optimal denoiser for data distributed as `N(mu, sigma0^2 I)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianDenoiser {
    pub mu: Vec3,
    pub sigma0: f64,
}

impl GaussianDenoiser {
    fn gain(&self, t: f64) -> f64 {
        let s2 = self.sigma0 * self.sigma0;
        s2 / (s2 + t * t)
    }

    /// Log-density of the data distribution.
    pub fn log_density(&self, x: &Vec3) -> f64 {
        gaussian_logpdf(x, &self.mu, self.sigma0 * self.sigma0)
    }
}

impl Denoiser for GaussianDenoiser {
    fn denoise(&self, t: f64, x: &[Vec3]) -> Result<Vec<Vec3>> {
        let a = self.gain(t);
        Ok(x.iter()
            .map(|p| std::array::from_fn(|k| a * p[k] + (1.0 - a) * self.mu[k]))
            .collect())
    }
}

impl JacobianDenoiser for GaussianDenoiser {
    fn denoise_jacobian(&self, t: f64, x: &[Vec3]) -> Result<(Vec<Vec3>, Vec<[[f64; 3]; 3]>)> {
        let a = self.gain(t);
        let j = [[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]];
        Ok((self.denoise(t, x)?, vec![j; x.len()]))
    }
}

/// Isotropic Gaussian log-density with per-axis variance `var`.
pub fn gaussian_logpdf(x: &Vec3, mean: &Vec3, var: f64) -> f64 {
    let r2: f64 = (0..3).map(|k| (x[k] - mean[k]).powi(2)).sum();
    -1.5 * (2.0 * std::f64::consts::PI * var).ln() - r2 / (2.0 * var)
}

fn standard_normal3(rng: &mut impl Rng) -> Vec3 {
    std::array::from_fn(|_| StandardNormal.sample(rng))
}

/// Integrates the probability-flow ODE from `sigma_max` down to zero with
/// Heun steps (Euler on the last step) for a batch of starting points.
pub fn heun_integrate<D: Denoiser + ?Sized>(denoiser: &D, mut x: Vec<Vec3>, ts: &[f64]) -> Result<Vec<Vec3>> {
    for (i, &t) in ts.iter().enumerate() {
        let t_next = ts.get(i + 1).copied().unwrap_or(0.0);
        let h = t_next - t;
        let d = denoiser.denoise(t, &x)?;
        let slope: Vec<Vec3> = x
            .iter()
            .zip(&d)
            .map(|(xi, di)| std::array::from_fn(|k| (xi[k] - di[k]) / t))
            .collect();
        let euler: Vec<Vec3> = x
            .iter()
            .zip(&slope)
            .map(|(xi, si)| std::array::from_fn(|k| xi[k] + h * si[k]))
            .collect();
        if t_next > 0.0 {
            let d2 = denoiser.denoise(t_next, &euler)?;
            for (((xi, si), ei), di) in x.iter_mut().zip(&slope).zip(&euler).zip(&d2) {
                for k in 0..3 {
                    let s2 = (ei[k] - di[k]) / t_next;
                    xi[k] += 0.5 * h * (si[k] + s2);
                }
            }
        } else {
            x = euler;
        }
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("probability-flow sampler"));
        }
    }
    Ok(x)
}

/// Draws `n` points from the distribution represented by `denoiser`.
pub fn heun_sample_batch<D: Denoiser + ?Sized>(
    denoiser: &D,
    n: usize,
    cfg: &DiffusionConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Vec3>> {
    let ts = karras_timesteps(cfg.n_diff, cfg)?;
    let x = (0..n)
        .map(|_| {
            let e = standard_normal3(rng);
            e.map(|v| v * cfg.sigma_max)
        })
        .collect();
    heun_integrate(denoiser, x, &ts)
}

/// Draws a single point.
pub fn heun_sample<D: Denoiser + ?Sized>(denoiser: &D, cfg: &DiffusionConfig, rng: &mut impl Rng) -> Result<Vec3> {
    Ok(heun_sample_batch(denoiser, 1, cfg, rng)?[0])
}

/// Summed weighted denoising loss over `timesteps_per_token` independent
/// draws per target, together with the number of draws. `cond` holds the
/// projected conditioning rows, one per target.
pub fn diffusion_loss<'p, T: Real>(
    model: &'p Quetzal<T>,
    g: &mut Graph<'p, T>,
    b: &Bound,
    cond: Var,
    targets: &[Vec3],
    cfg: &DiffusionConfig,
    rng: &mut impl Rng,
) -> Result<(Var, usize)> {
    let reps = cfg.timesteps_per_token;
    let n = targets.len() * reps;
    let mut rows = Vec::with_capacity(n);
    let mut ts = Vec::with_capacity(n);
    let mut noisy = Vec::with_capacity(n);
    let mut clean = Vec::with_capacity(n);
    for (i, x) in targets.iter().enumerate() {
        for _ in 0..reps {
            let t = sample_train_time(rng, cfg);
            let e = standard_normal3(rng);
            rows.push(i);
            ts.push(t);
            noisy.push(std::array::from_fn(|k| x[k] + t * e[k]));
            clean.push(*x);
        }
    }
    let c = g.gather_rows(cond, rows)?;
    let xn = g.constant(coords_tensor(&noisy));
    let d = model.denoise(g, b, &ts, xn, c, cfg.sigma_data)?;
    let err = g.square_error(d, &coords_tensor(&clean))?;
    let weights = ts.iter().map(|&t| T::of(loss_weight(t, cfg))).collect();
    let err = g.scale_rows(err, weights)?;
    Ok((g.sum(err), n))
}
