use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{center_molecule, Element, Molecule};
use crate::error::{Error, Result};

/// Rigid small molecules used to build synthetic training sets. Heavy atom
/// first, hydrogens after, matching the usual QM9 ordering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyTemplate {
    Methane,
    Water,
    Ammonia,
}

impl ToyTemplate {
    pub fn molecule(self) -> Molecule {
        let (heavy, hydrogens) = match self {
            ToyTemplate::Methane => {
                let a = 1.09 / 3f64.sqrt();
                (
                    Element::C,
                    vec![[a, a, a], [a, -a, -a], [-a, a, -a], [-a, -a, a]],
                )
            }
            ToyTemplate::Water => {
                let (r, half) = (0.9572, 104.52f64.to_radians() / 2.0);
                (
                    Element::O,
                    vec![
                        [r * half.sin(), r * half.cos(), 0.0],
                        [-r * half.sin(), r * half.cos(), 0.0],
                    ],
                )
            }
            ToyTemplate::Ammonia => {
                let r = 1.012;
                let cos_hnh = 106.67f64.to_radians().cos();
                let sin_polar = ((1.0 - cos_hnh) / 1.5).sqrt();
                let cos_polar = (1.0 - sin_polar * sin_polar).sqrt();
                let hs = (0..3)
                    .map(|k| {
                        let phi = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                        [
                            r * sin_polar * phi.cos(),
                            r * sin_polar * phi.sin(),
                            -r * cos_polar,
                        ]
                    })
                    .collect();
                (Element::N, hs)
            }
        };
        let mut mol = Molecule::default();
        mol.push(heavy, [0.0; 3]);
        for h in hydrogens {
            mol.push(Element::H, h);
        }
        center_molecule(&mol).expect("template is non-empty")
    }
}

impl FromStr for ToyTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "methane" | "ch4" => Ok(ToyTemplate::Methane),
            "water" | "h2o" => Ok(ToyTemplate::Water),
            "ammonia" | "nh3" => Ok(ToyTemplate::Ammonia),
            other => Err(Error::InvalidArgument(format!("unknown toy molecule {other:?}"))),
        }
    }
}

/// `count` centered copies of each template with i.i.d. Gaussian
/// coordinate jitter of standard deviation `jitter` Å.
pub fn toy_corpus(
    templates: &[ToyTemplate],
    count: usize,
    jitter: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Molecule>> {
    let noise = Normal::new(0.0, jitter)
        .map_err(|_| Error::InvalidArgument(format!("bad jitter {jitter}")))?;
    let mut out = Vec::with_capacity(templates.len() * count);
    for _ in 0..count {
        for t in templates {
            let mut m = t.molecule();
            for c in m.coords.iter_mut().flatten() {
                *c += noise.sample(rng);
            }
            out.push(center_molecule(&m)?);
        }
    }
    Ok(out)
}
