use std::f64::consts::{PI, SQRT_2};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::real::Real;

/// Magnitude-preserving random Fourier features:
/// `x -> sqrt(2) cos(2 pi (b f_i x + phi_i))` with fixed `f_i ~ N(0, 1)`
/// and `phi_i ~ U[0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierEncoder {
    pub freqs: Vec<f64>,
    pub phases: Vec<f64>,
    pub bandwidth: f64,
}

impl FourierEncoder {
    pub fn new(channels: usize, bandwidth: f64, rng: &mut impl Rng) -> Self {
        let unit = Uniform::new(0.0, 1.0).expect("valid range");
        let freqs = (0..channels).map(|_| StandardNormal.sample(rng)).collect();
        let phases = (0..channels).map(|_| unit.sample(rng)).collect();
        FourierEncoder {
            freqs,
            phases,
            bandwidth,
        }
    }

    pub fn channels(&self) -> usize {
        self.freqs.len()
    }

    #[inline]
    fn angle(&self, i: usize, x: f64) -> f64 {
        2.0 * PI * (self.bandwidth * self.freqs[i] * x + self.phases[i])
    }

    /// The phase is reduced to under one turn in `f64` before the cosine is
    /// taken in `T`, which keeps `f32` features accurate at high bandwidth.
    pub fn encode_into<T: Real>(&self, x: f64, out: &mut Vec<T>) {
        let (two_pi, root2) = (T::of(2.0 * PI), T::of(SQRT_2));
        out.extend(self.freqs.iter().zip(&self.phases).map(|(f, p)| {
            let turns = self.bandwidth * f * x + p;
            root2 * (two_pi * T::of(turns - (turns as i64) as f64)).cos()
        }));
    }

    pub fn encode(&self, x: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.channels());
        self.encode_into(x, &mut out);
        out
    }

    /// `sum_i g_i * d/dx encode(x)_i`.
    pub fn derivative_dot<T: Real>(&self, x: f64, g: &[T]) -> f64 {
        g.iter()
            .enumerate()
            .map(|(i, gi)| {
                -gi.f64() * SQRT_2 * self.angle(i, x).sin() * 2.0 * PI * self.bandwidth * self.freqs[i]
            })
            .sum()
    }
}
