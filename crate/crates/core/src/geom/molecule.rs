use rand::Rng;
use rand_distr::{Distribution, StandardNormal, UnitBall};

use super::Element;
use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Maximum translation applied by [`augment`], in Å.
pub const MAX_TRANSLATION: f64 = 3.0;

/// An ordered sequence of atoms. Order is part of the data: the model
/// generates atoms in exactly this order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Molecule {
    pub elements: Vec<Element>,
    pub coords: Vec<Vec3>,
}

impl Molecule {
    pub fn new(elements: Vec<Element>, coords: Vec<Vec3>) -> Result<Self> {
        if elements.len() != coords.len() {
            return Err(Error::InvalidArgument(format!(
                "{} elements but {} coordinates",
                elements.len(),
                coords.len()
            )));
        }
        if coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("molecule coordinates"));
        }
        Ok(Molecule { elements, coords })
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn push(&mut self, element: Element, coord: Vec3) {
        self.elements.push(element);
        self.coords.push(coord);
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.is_empty() {
            return None;
        }
        let n = self.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.coords {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        Some(c.map(|v| v / n))
    }

    /// Heavy atoms only, in their original order.
    pub fn without_hydrogens(&self) -> Molecule {
        let (elements, coords) = self
            .elements
            .iter()
            .zip(&self.coords)
            .filter(|(e, _)| !e.is_hydrogen())
            .map(|(&e, &c)| (e, c))
            .unzip();
        Molecule { elements, coords }
    }

    pub fn hydrogen_coords(&self) -> Vec<Vec3> {
        self.elements
            .iter()
            .zip(&self.coords)
            .filter(|(e, _)| e.is_hydrogen())
            .map(|(_, &c)| c)
            .collect()
    }

    pub fn transformed(&self, rotation: &[[f64; 3]; 3], translation: Vec3) -> Molecule {
        let coords = self
            .coords
            .iter()
            .map(|p| {
                let r = mat_vec(rotation, p);
                [r[0] + translation[0], r[1] + translation[1], r[2] + translation[2]]
            })
            .collect();
        Molecule {
            elements: self.elements.clone(),
            coords,
        }
    }

    /// Molecular formula in Hill order, e.g. `CH4`.
    pub fn formula(&self) -> String {
        use std::collections::BTreeMap;
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &self.elements {
            *counts.entry(e.symbol()).or_default() += 1;
        }
        let mut out = String::new();
        let mut emit = |sym: &str, n: usize| {
            out.push_str(sym);
            if n > 1 {
                out.push_str(&n.to_string());
            }
        };
        if let Some(c) = counts.remove("C") {
            emit("C", c);
            if let Some(h) = counts.remove("H") {
                emit("H", h);
            }
        }
        for (sym, n) in counts {
            emit(sym, n);
        }
        out
    }
}

pub fn distance(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn mat_vec(m: &[[f64; 3]; 3], v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Translate so the unweighted centroid of atom positions is the origin.
pub fn center_molecule(mol: &Molecule) -> Result<Molecule> {
    let c = mol.centroid().ok_or(Error::EmptyMolecule)?;
    Ok(mol.transformed(&IDENTITY, [-c[0], -c[1], -c[2]]))
}

pub const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Uniformly distributed rotation from a uniform unit quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return quaternion_to_matrix(q.map(|v| v / norm));
        }
    }
}

fn quaternion_to_matrix([w, x, y, z]: [f64; 4]) -> [[f64; 3]; 3] {
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Translation drawn uniformly from the solid ball of radius
/// [`MAX_TRANSLATION`].
pub fn random_translation(rng: &mut impl Rng) -> Vec3 {
    let u: [f64; 3] = UnitBall.sample(rng);
    u.map(|v| v * MAX_TRANSLATION)
}

/// Random rigid motion used as training augmentation. Expects a centered
/// molecule.
pub fn augment(mol: &Molecule, rng: &mut impl Rng) -> Molecule {
    let rotation = random_rotation(rng);
    let translation = random_translation(rng);
    mol.transformed(&rotation, translation)
}
