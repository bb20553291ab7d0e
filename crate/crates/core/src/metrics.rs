//! Bond inference from a length lookup table, valency-based stability,
//! lookup validity and uniqueness through a canonical graph hash.

use std::collections::{HashMap, HashSet};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::{distance, Element, Molecule};
use crate::parallel::map_range;

const BONDS: &str = include_str!("../data/bonds.txt");
const VALENCIES: &str = include_str!("../data/valency.txt");

/// Per element pair, the maximum length (angstrom) of single, double and
/// triple bonds, and per element the allowed valencies.
#[derive(Clone, Debug, PartialEq)]
pub struct BondTable {
    lengths: HashMap<(Element, Element), [Option<f64>; 3]>,
    valencies: HashMap<Element, Vec<u32>>,
}

fn pair(a: Element, b: Element) -> (Element, Element) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

impl BondTable {
    /// The shipped table.
    pub fn standard() -> Self {
        Self::parse(BONDS, VALENCIES).expect("shipped tables parse")
    }

    /// Parses `elem1 elem2 order max_len` rows and `elem v1,v2,...` rows.
    pub fn parse(bonds: &str, valencies: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse { line, message };
        let mut lengths: HashMap<(Element, Element), [Option<f64>; 3]> = HashMap::new();
        for (line, text) in data_lines(bonds) {
            let f: Vec<&str> = text.split_whitespace().collect();
            if f.len() != 4 {
                return Err(err(line, format!("expected 4 fields, found {}", f.len())));
            }
            let a: Element = f[0].parse()?;
            let b: Element = f[1].parse()?;
            let order: usize = f[2].parse().map_err(|_| err(line, format!("bad bond order {:?}", f[2])))?;
            let len: f64 = f[3].parse().map_err(|_| err(line, format!("bad length {:?}", f[3])))?;
            if !(1..=3).contains(&order) || !(len > 0.0) {
                return Err(err(line, "order must be 1-3 and length positive".into()));
            }
            lengths.entry(pair(a, b)).or_default()[order - 1] = Some(len);
        }
        let mut vals = HashMap::new();
        for (line, text) in data_lines(valencies) {
            let (e, v) = text
                .split_once(char::is_whitespace)
                .ok_or_else(|| err(line, "expected element and valencies".into()))?;
            let e: Element = e.parse()?;
            let v = v
                .trim()
                .split(',')
                .map(|s| s.trim().parse::<u32>().map_err(|_| err(line, format!("bad valency {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            vals.insert(e, v);
        }
        Ok(BondTable {
            lengths,
            valencies: vals,
        })
    }

    /// Bond order for two atoms at distance `d`: the highest order whose
    /// threshold exceeds `d`, considering higher orders only while the
    /// lower ones hold. `None` when the pair is not tabulated.
    pub fn bond_order(&self, a: Element, b: Element, d: f64) -> Option<u8> {
        let t = self.lengths.get(&pair(a, b))?;
        let mut order = 0;
        for (k, th) in t.iter().enumerate() {
            match th {
                Some(th) if d < *th => order = k as u8 + 1,
                _ => break,
            }
        }
        Some(order)
    }

    pub fn allowed_valencies(&self, e: Element) -> Option<&[u32]> {
        self.valencies.get(&e).map(Vec::as_slice)
    }
}

/// Atoms with integer-order bonds between them.
#[derive(Clone, Debug, PartialEq)]
pub struct BondGraph {
    pub elements: Vec<Element>,
    /// `(i, j, order)` with `i < j`.
    pub edges: Vec<(usize, usize, u8)>,
    /// Atom pairs whose elements are absent from the table.
    pub untabulated_pairs: usize,
}

impl BondGraph {
    pub fn valencies(&self) -> Vec<u32> {
        let mut v = vec![0; self.elements.len()];
        for &(i, j, o) in &self.edges {
            v[i] += o as u32;
            v[j] += o as u32;
        }
        v
    }

    pub fn neighbors(&self) -> Vec<Vec<(usize, u8)>> {
        let mut adj = vec![Vec::new(); self.elements.len()];
        for &(i, j, o) in &self.edges {
            adj[i].push((j, o));
            adj[j].push((i, o));
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        let n = self.elements.len();
        if n == 0 {
            return false;
        }
        let adj = self.neighbors();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &(j, _) in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.iter().all(|&s| s)
    }
}

pub fn infer_bonds(mol: &Molecule, table: &BondTable) -> BondGraph {
    let n = mol.len();
    let mut edges = Vec::new();
    let mut untabulated = 0;
    for i in 0..n {
        for j in i + 1..n {
            let d = distance(&mol.coords[i], &mol.coords[j]);
            match table.bond_order(mol.elements[i], mol.elements[j], d) {
                Some(0) => {}
                Some(o) => edges.push((i, j, o)),
                None => untabulated += 1,
            }
        }
    }
    BondGraph {
        elements: mol.elements.clone(),
        edges,
        untabulated_pairs: untabulated,
    }
}

/// Per-atom stability: the valency is one of the element's allowed values.
pub fn atom_stability(graph: &BondGraph, table: &BondTable) -> Vec<bool> {
    graph
        .valencies()
        .iter()
        .zip(&graph.elements)
        .map(|(v, e)| table.allowed_valencies(*e).is_some_and(|a| a.contains(v)))
        .collect()
}

fn digest(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// Permutation-invariant hash of a bond graph by iterated neighbourhood
/// refinement over element labels and bond orders. Distinct graphs may
/// collide (as for any refinement-based key, e.g. some regular graphs).
pub fn canonical_hash(graph: &BondGraph) -> u64 {
    let n = graph.elements.len();
    let adj = graph.neighbors();
    let mut labels: Vec<u64> = graph
        .elements
        .iter()
        .map(|e| digest(&[&[e.atomic_number()]]))
        .collect();
    let classes = |l: &[u64]| l.iter().collect::<HashSet<_>>().len();
    let mut count = classes(&labels);
    for _ in 0..n.max(1) {
        let next: Vec<u64> = (0..n)
            .map(|i| {
                let mut env: Vec<(u8, u64)> = adj[i].iter().map(|&(j, o)| (o, labels[j])).collect();
                env.sort_unstable();
                let bytes: Vec<u8> = env
                    .iter()
                    .flat_map(|(o, l)| std::iter::once(*o).chain(l.to_le_bytes()))
                    .collect();
                digest(&[&labels[i].to_le_bytes(), &bytes])
            })
            .collect();
        labels = next;
        let c = classes(&labels);
        if c == count {
            break;
        }
        count = c;
    }
    labels.sort_unstable();
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    digest(&[&(n as u64).to_le_bytes(), &bytes])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricOptions {
    /// Count multi-fragment molecules as invalid.
    pub require_connected: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            require_connected: true,
        }
    }
}

/// Per-molecule evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MoleculeMetrics {
    pub atoms: usize,
    pub stable_atoms: usize,
    pub valid: bool,
    pub hash: u64,
    pub untabulated_pairs: usize,
}

impl MoleculeMetrics {
    pub fn stable(&self) -> bool {
        self.atoms > 0 && self.stable_atoms == self.atoms
    }
}

pub fn evaluate_molecule(mol: &Molecule, table: &BondTable, opts: &MetricOptions) -> MoleculeMetrics {
    let graph = infer_bonds(mol, table);
    let stable = atom_stability(&graph, table);
    let stable_atoms = stable.iter().filter(|&&s| s).count();
    let valid = !mol.is_empty() && stable_atoms == mol.len() && (!opts.require_connected || graph.is_connected());
    MoleculeMetrics {
        atoms: mol.len(),
        stable_atoms,
        valid,
        hash: canonical_hash(&graph),
        untabulated_pairs: graph.untabulated_pairs,
    }
}

/// Percentages over a set of molecules; `None` for an empty set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub n_molecules: usize,
    pub atom_stable: Option<f64>,
    pub mol_stable: Option<f64>,
    pub valid: Option<f64>,
    pub valid_unique: Option<f64>,
    pub untabulated_pairs: usize,
}

pub const REPORT_COLUMNS: [&str; 5] = [
    "n_molecules",
    "atom_stable",
    "mol_stable",
    "valid_lookup",
    "valid_x_unique_lookup",
];

impl MetricReport {
    pub fn from_metrics(ms: &[MoleculeMetrics]) -> Self {
        let n = ms.len();
        let atoms: usize = ms.iter().map(|m| m.atoms).sum();
        let pct = |num: usize, den: usize| (den > 0).then(|| 100.0 * num as f64 / den as f64);
        let unique: HashSet<u64> = ms.iter().filter(|m| m.valid).map(|m| m.hash).collect();
        MetricReport {
            n_molecules: n,
            atom_stable: pct(ms.iter().map(|m| m.stable_atoms).sum(), atoms),
            mol_stable: pct(ms.iter().filter(|m| m.stable()).count(), n),
            valid: pct(ms.iter().filter(|m| m.valid).count(), n),
            valid_unique: pct(unique.len(), n),
            untabulated_pairs: ms.iter().map(|m| m.untabulated_pairs).sum(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.2}"));
        format!(
            "{}\n{}\t{}\t{}\t{}\t{}\n",
            REPORT_COLUMNS.join("\t"),
            self.n_molecules,
            f(self.atom_stable),
            f(self.mol_stable),
            f(self.valid),
            f(self.valid_unique)
        )
    }
}

pub fn evaluate(mols: &[Molecule], table: &BondTable, opts: &MetricOptions) -> MetricReport {
    let ms = map_range(mols.len(), |i| evaluate_molecule(&mols[i], table, opts));
    MetricReport::from_metrics(&ms)
}
