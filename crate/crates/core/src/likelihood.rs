//! Exact log-densities through the instantaneous change of variables along
//! the probability-flow ODE.
//!
//! With drift `f = (x - D) / t` the density obeys
//! `log p_0(x_0) = log p_T(x_T) + \int_0^T div f dt`, and since positions are
//! three-dimensional the divergence `(3 - tr dD/dx) / t` is computed from
//! the exact Jacobian.

use serde::{Deserialize, Serialize};

use crate::diffusion::{gaussian_logpdf, karras_timesteps, DiffusionConfig, JacobianDenoiser};
use crate::error::{Error, Result};
use crate::geom::{Molecule, Vec3};
use crate::model::{ModelDenoiser, Quetzal};
use crate::real::Real;

/// Density assigned to the end point of the forward integration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalDensity {
    /// A Gaussian matched to the local score and its divergence at
    /// `(T, x_T)`: mean `x_T + (D - x_T) / (1 - j)`, per-axis variance
    /// `T^2 / (1 - j)` with `j = tr(dD/dx) / 3`. Exact whenever `p_T` is
    /// Gaussian.
    #[default]
    Matched,
    /// `N(0, T^2 I)`.
    Isotropic,
}

/// Integrator for the joint position and log-density ODE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    /// Two denoiser evaluations per step.
    Heun,
    /// Classic fourth-order Runge-Kutta, four evaluations per step.
    #[default]
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LikelihoodConfig {
    pub n_like: usize,
    pub terminal: TerminalDensity,
    pub integrator: Integrator,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        LikelihoodConfig {
            n_like: 60,
            terminal: TerminalDensity::Matched,
            integrator: Integrator::Rk4,
        }
    }
}

/// Score `(D - x) / t^2` and its Jacobian `(dD/dx - I) / t^2` for each point.
pub fn score_jacobian<D: JacobianDenoiser + ?Sized>(
    denoiser: &D,
    t: f64,
    x: &[Vec3],
) -> Result<Vec<(Vec3, [[f64; 3]; 3])>> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("noise level must be positive, got {t}")));
    }
    let (d, jac) = denoiser.denoise_jacobian(t, x)?;
    let t2 = t * t;
    let out: Vec<_> = x
        .iter()
        .zip(d.iter().zip(&jac))
        .map(|(xi, (di, ji))| {
            let s = std::array::from_fn(|k| (di[k] - xi[k]) / t2);
            let j = std::array::from_fn(|r| std::array::from_fn(|c| (ji[r][c] - f64::from(u8::from(r == c))) / t2));
            (s, j)
        })
        .collect();
    if out.iter().any(|(s, j)| s.iter().chain(j.iter().flatten()).any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("score jacobian"));
    }
    Ok(out)
}

/// Drift and divergence of the probability-flow ODE at `(t, x)`.
fn flow<D: JacobianDenoiser + ?Sized>(denoiser: &D, t: f64, x: &[Vec3]) -> Result<(Vec<Vec3>, Vec<f64>, Vec<Vec3>, Vec<f64>)> {
    let (d, jac) = denoiser.denoise_jacobian(t, x)?;
    let drift = x
        .iter()
        .zip(&d)
        .map(|(xi, di)| std::array::from_fn(|k| (xi[k] - di[k]) / t))
        .collect();
    let trace: Vec<f64> = jac.iter().map(|j| j[0][0] + j[1][1] + j[2][2]).collect();
    let div = trace.iter().map(|tr| (3.0 - tr) / t).collect();
    Ok((drift, div, d, trace))
}

/// Log-density (nats) of each point under the distribution represented by
/// `denoiser`. Points are integrated independently but batched through
/// the denoiser.
pub fn position_logpdf<D: JacobianDenoiser + ?Sized>(
    denoiser: &D,
    x0: &[Vec3],
    diff: &DiffusionConfig,
    cfg: &LikelihoodConfig,
) -> Result<Vec<f64>> {
    if x0.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("likelihood start point"));
    }
    let mut ts = karras_timesteps(cfg.n_like, diff)?;
    ts.reverse();
    // Steps are taken in u = t^(1/rho), the variable in which the grid is
    // uniform; the integrand picks up dt/du = rho t^((rho-1)/rho).
    let rho = diff.rho;
    let field = |u: f64, x: &[Vec3]| -> Result<(Vec<Vec3>, Vec<f64>)> {
        let t = u.powf(rho);
        let speed = rho * t / u;
        let (f, div, _, _) = flow(denoiser, t, x)?;
        Ok((
            f.iter().map(|v| v.map(|c| c * speed)).collect(),
            div.iter().map(|v| v * speed).collect(),
        ))
    };
    let offset = |x: &[Vec3], k: &[Vec3], h: f64| -> Vec<Vec3> {
        x.iter()
            .zip(k)
            .map(|(xi, ki)| std::array::from_fn(|c| xi[c] + h * ki[c]))
            .collect()
    };
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut acc = vec![0.0; n];
    for w in ts.windows(2) {
        let (u, u_next) = (w[0].powf(1.0 / rho), w[1].powf(1.0 / rho));
        let h = u_next - u;
        // Stage derivatives and their quadrature weights.
        let stages: Vec<(Vec<Vec3>, Vec<f64>)>;
        let weights: &[f64];
        match cfg.integrator {
            Integrator::Heun => {
                let k1 = field(u, &x)?;
                let k2 = field(u_next, &offset(&x, &k1.0, h))?;
                stages = vec![k1, k2];
                weights = &[0.5, 0.5];
            }
            Integrator::Rk4 => {
                let k1 = field(u, &x)?;
                let k2 = field(u + 0.5 * h, &offset(&x, &k1.0, 0.5 * h))?;
                let k3 = field(u + 0.5 * h, &offset(&x, &k2.0, 0.5 * h))?;
                let k4 = field(u_next, &offset(&x, &k3.0, h))?;
                stages = vec![k1, k2, k3, k4];
                weights = &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0];
            }
        }
        for ((kx, kd), wt) in stages.iter().zip(weights) {
            for i in 0..n {
                for c in 0..3 {
                    x[i][c] += h * wt * kx[i][c];
                }
                acc[i] += h * wt * kd[i];
            }
        }
        if x.iter().flatten().chain(&acc).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("likelihood integration"));
        }
    }
    let t_end = *ts.last().expect("at least two levels");
    let terminal: Vec<f64> = match cfg.terminal {
        TerminalDensity::Isotropic => x
            .iter()
            .map(|xi| gaussian_logpdf(xi, &[0.0; 3], t_end * t_end))
            .collect(),
        TerminalDensity::Matched => {
            let (_, _, d, trace) = flow(denoiser, t_end, &x)?;
            x.iter()
                .zip(d.iter().zip(&trace))
                .map(|(xi, (di, tr))| {
                    let keep = (1.0 - tr / 3.0).max(f64::EPSILON);
                    let mean = std::array::from_fn(|k| xi[k] + (di[k] - xi[k]) / keep);
                    gaussian_logpdf(xi, &mean, t_end * t_end / keep)
                })
                .collect()
        }
    };
    Ok(terminal.iter().zip(&acc).map(|(a, b)| a + b).collect())
}

/// Decomposition of a molecule's negative log-likelihood (nats).
#[derive(Clone, Debug, PartialEq)]
pub struct MoleculeNll {
    pub types: f64,
    pub positions: f64,
}

impl MoleculeNll {
    pub fn total(&self) -> f64 {
        self.types + self.positions
    }
}

/// Quantities a molecule likelihood needs from a model.
pub trait LikelihoodModel {
    type Denoiser<'a>: JacobianDenoiser
    where
        Self: 'a;

    /// Teacher-forced log-probabilities of every atom type followed by
    /// STOP, and a denoiser whose row `i` is conditioned for atom `i`.
    fn teacher_forced<'a>(&'a self, mol: &Molecule) -> Result<(Vec<f64>, Self::Denoiser<'a>)>;
}

/// A model evaluated with its live or EMA weights.
pub struct WithWeights<'m, T> {
    pub model: &'m Quetzal<T>,
    pub use_ema: bool,
    pub sigma_data: f64,
}

impl<T: Real> LikelihoodModel for WithWeights<'_, T> {
    type Denoiser<'a>
        = ModelDenoiser<'a, T>
    where
        Self: 'a;

    fn teacher_forced<'a>(&'a self, mol: &Molecule) -> Result<(Vec<f64>, ModelDenoiser<'a, T>)> {
        let tf = self.model.teacher_forced(mol, self.use_ema)?;
        let lp = tf
            .type_log_probs
            .iter()
            .zip(&tf.targets)
            .map(|(row, &t)| row[t])
            .collect();
        Ok((lp, ModelDenoiser::new(self.model, self.use_ema, tf.cond, self.sigma_data)))
    }
}

/// `-sum log p(type) - log p(STOP) - sum log p(position)`.
pub fn molecule_nll<M: LikelihoodModel + ?Sized>(
    model: &M,
    mol: &Molecule,
    diff: &DiffusionConfig,
    cfg: &LikelihoodConfig,
) -> Result<MoleculeNll> {
    let (type_lp, denoiser) = model.teacher_forced(mol)?;
    let pos = position_logpdf(&denoiser, &mol.coords, diff, cfg)?;
    let nll = MoleculeNll {
        types: -type_lp.iter().sum::<f64>(),
        positions: -pos.iter().sum::<f64>(),
    };
    if !nll.total().is_finite() {
        return Err(Error::NonFinite("molecule likelihood"));
    }
    Ok(nll)
}
