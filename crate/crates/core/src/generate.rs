//! The generation loop and the prefix-conditioned tasks built on it:
//! unconditional sampling, hydrogen decoration and scaffold completion.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::Distribution;

use crate::assignment::hungarian_rmsd;
use crate::diffusion::{heun_sample, Denoiser, DiffusionConfig};
use crate::error::{Error, Result};
use crate::geom::{Molecule, TokenId, Vec3};
use crate::model::Autoregressor;
use crate::parallel::{stream_rng, try_map};

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub max_atoms: usize,
    /// Softmax temperature for atom types; zero picks the most likely type.
    pub temperature: f64,
    pub diffusion: DiffusionConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            max_atoms: 32,
            temperature: 1.0,
            diffusion: DiffusionConfig::default(),
        }
    }
}

/// A generated molecule. `truncated` is set when the atom limit was hit
/// before STOP was sampled.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub molecule: Molecule,
    pub truncated: bool,
}

struct Pending<'a, A>(&'a A);

impl<A: Autoregressor> Denoiser for Pending<'_, A> {
    fn denoise(&self, t: f64, x: &[Vec3]) -> Result<Vec<Vec3>> {
        self.0.denoise_next(t, x)
    }
}

fn sample_type(logits: &[f64], banned: TokenId, temperature: f64, rng: &mut impl Rng) -> Result<TokenId> {
    if !(temperature >= 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be non-negative, got {temperature}")));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("type logits"));
    }
    let allowed = |i: usize| i != banned;
    let best = (0..logits.len())
        .filter(|&i| allowed(i))
        .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
        .ok_or_else(|| Error::InvalidArgument("empty vocabulary".into()))?;
    if temperature == 0.0 {
        return Ok(best);
    }
    let weights: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| if allowed(i) { ((l - logits[best]) / temperature).exp() } else { 0.0 })
        .collect();
    let dist = WeightedIndex::new(&weights).map_err(|_| Error::NonFinite("type probabilities"))?;
    Ok(dist.sample(rng))
}

/// Continues `prefix` until STOP or `max_atoms` atoms in total.
pub fn generate<A: Autoregressor>(
    ar: &mut A,
    prefix: &Molecule,
    cfg: &GenerateConfig,
    rng: &mut impl Rng,
) -> Result<Generated> {
    let limit = cfg.max_atoms.min(ar.max_atoms());
    if prefix.len() > limit {
        return Err(Error::InvalidArgument(format!(
            "prefix has {} atoms, limit is {limit}",
            prefix.len()
        )));
    }
    ar.reset()?;
    ar.feed(prefix)?;
    let (bos, stop) = (ar.vocab().bos(), ar.vocab().stop());
    let mut mol = prefix.clone();
    loop {
        let logits = ar.type_logits()?;
        let token = sample_type(&logits, bos, cfg.temperature, rng)?;
        if token == stop || mol.len() >= limit {
            return Ok(Generated {
                truncated: token != stop,
                molecule: mol,
            });
        }
        ar.commit_type(token)?;
        let x = heun_sample(&Pending(&*ar), &cfg.diffusion, rng)?;
        ar.commit_position(x)?;
        let element = ar.vocab().element(token).expect("atom token");
        mol.push(element, x);
    }
}

/// `n` independent samples; sample `i` uses random stream `i` of `seed`.
pub fn sample_many<A, F>(factory: F, prefix: &Molecule, n: usize, cfg: &GenerateConfig, seed: u64) -> Result<Vec<Generated>>
where
    A: Autoregressor,
    F: Fn() -> Result<A> + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    try_map(&idx, |_, &i| {
        let mut ar = factory()?;
        generate(&mut ar, prefix, cfg, &mut stream_rng(seed, i as u64))
    })
}

/// Hydrogens appended to a heavy-atom prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoration {
    pub molecule: Molecule,
    pub truncated: bool,
    /// Non-hydrogen atoms generated after the prefix.
    pub non_hydrogen_added: usize,
    pub hydrogens_added: usize,
}

pub fn decorate_hydrogens<A: Autoregressor>(
    ar: &mut A,
    heavy: &Molecule,
    cfg: &GenerateConfig,
    rng: &mut impl Rng,
) -> Result<Decoration> {
    if heavy.elements.iter().any(|e| e.is_hydrogen()) {
        return Err(Error::InvalidArgument("decoration prefix already contains hydrogen".into()));
    }
    let out = generate(ar, heavy, cfg, rng)?;
    let suffix = &out.molecule.elements[heavy.len()..];
    let hydrogens_added = suffix.iter().filter(|e| e.is_hydrogen()).count();
    Ok(Decoration {
        non_hydrogen_added: suffix.len() - hydrogens_added,
        hydrogens_added,
        truncated: out.truncated,
        molecule: out.molecule,
    })
}

/// `n_samples` completions of a fixed scaffold.
pub fn complete_scaffold<A, F>(
    factory: F,
    scaffold: &Molecule,
    n_samples: usize,
    cfg: &GenerateConfig,
    seed: u64,
) -> Result<Vec<Generated>>
where
    A: Autoregressor,
    F: Fn() -> Result<A> + Sync + Send,
{
    sample_many(factory, scaffold, n_samples, cfg, seed)
}

/// Outcome of decorating one molecule.
#[derive(Clone, Debug, PartialEq)]
pub struct DecorationScore {
    pub correct_count: bool,
    /// Matched RMSD of the generated hydrogens, infinite when counts differ
    /// or other atoms were generated.
    pub rmsd: f64,
    pub non_hydrogen_added: usize,
}

pub fn score_decoration(decoration: &Decoration, truth: &Molecule) -> DecorationScore {
    let generated: Vec<Vec3> = decoration.molecule.hydrogen_coords();
    let expected = truth.hydrogen_coords();
    let clean = decoration.non_hydrogen_added == 0;
    let correct_count = clean && generated.len() == expected.len();
    DecorationScore {
        correct_count,
        rmsd: if clean { hungarian_rmsd(&generated, &expected) } else { f64::INFINITY },
        non_hydrogen_added: decoration.non_hydrogen_added,
    }
}

pub const RMSD_THRESHOLDS: [f64; 3] = [0.5, 0.1, 0.05];

/// Percentages over a test set: correct hydrogen count and RMSD below each
/// of [`RMSD_THRESHOLDS`].
#[derive(Clone, Debug, PartialEq)]
pub struct DecorationReport {
    pub n: usize,
    pub correct_h: f64,
    pub rmsd_below: [f64; 3],
    pub non_hydrogen_added: usize,
}

impl DecorationReport {
    pub fn from_scores(scores: &[DecorationScore]) -> Self {
        let n = scores.len();
        let pct = |k: usize| if n == 0 { f64::NAN } else { 100.0 * k as f64 / n as f64 };
        DecorationReport {
            n,
            correct_h: pct(scores.iter().filter(|s| s.correct_count).count()),
            rmsd_below: RMSD_THRESHOLDS.map(|th| pct(scores.iter().filter(|s| s.rmsd < th).count())),
            non_hydrogen_added: scores.iter().map(|s| s.non_hydrogen_added).sum(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let f = |v: f64| if v.is_nan() { "n/a".to_string() } else { format!("{v:.2}") };
        format!(
            "n\tcorrect_h\trmsd_lt_0.5\trmsd_lt_0.1\trmsd_lt_0.05\tnon_h_added\n{}\t{}\t{}\t{}\t{}\t{}\n",
            self.n,
            f(self.correct_h),
            f(self.rmsd_below[0]),
            f(self.rmsd_below[1]),
            f(self.rmsd_below[2]),
            self.non_hydrogen_added
        )
    }
}

/// Strips hydrogens from each test molecule (heavy-atom order kept),
/// decorates the heavy skeleton and scores the result. Molecule `i` uses
/// random stream `i` of `seed`.
pub fn evaluate_decoration<A, F>(
    factory: F,
    tests: &[Molecule],
    cfg: &GenerateConfig,
    seed: u64,
) -> Result<(DecorationReport, Vec<DecorationScore>)>
where
    A: Autoregressor,
    F: Fn() -> Result<A> + Sync + Send,
{
    let scores = try_map(tests, |i, truth| {
        let mut ar = factory()?;
        let heavy = truth.without_hydrogens();
        let dec = decorate_hydrogens(&mut ar, &heavy, cfg, &mut stream_rng(seed, i as u64))?;
        Ok(score_decoration(&dec, truth))
    })?;
    Ok((DecorationReport::from_scores(&scores), scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Element, ToyTemplate, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Vocabulary ids: C = 0, H = 1, O = 2.
    /// Emits a scripted sequence of types and places atom `i` at the
    /// denoiser's fixed point `(i, 0, 0)`.
    struct Scripted {
        vocab: Vocabulary,
        script: Vec<TokenId>,
        atoms: usize,
        pending: Option<TokenId>,
    }

    impl Scripted {
        fn new(script: Vec<TokenId>) -> Self {
            Scripted {
                vocab: Vocabulary::new([Element::H, Element::C, Element::O]),
                script,
                atoms: 0,
                pending: None,
            }
        }
    }

    impl Autoregressor for Scripted {
        fn vocab(&self) -> &Vocabulary {
            &self.vocab
        }
        fn reset(&mut self) -> Result<()> {
            self.atoms = 0;
            Ok(())
        }
        fn num_atoms(&self) -> usize {
            self.atoms
        }
        fn max_atoms(&self) -> usize {
            100
        }
        fn type_logits(&mut self) -> Result<Vec<f64>> {
            let want = self.script.get(self.atoms).copied().unwrap_or(self.vocab.stop());
            Ok((0..self.vocab.len()).map(|i| if i == want { 0.0 } else { -1e9 }).collect())
        }
        fn commit_type(&mut self, token: TokenId) -> Result<()> {
            self.pending = Some(token);
            Ok(())
        }
        fn denoise_next(&self, _t: f64, x: &[Vec3]) -> Result<Vec<Vec3>> {
            Ok(vec![[self.atoms as f64, 0.0, 0.0]; x.len()])
        }
        fn commit_position(&mut self, _x: Vec3) -> Result<()> {
            self.pending.take().expect("pending");
            self.atoms += 1;
            Ok(())
        }
    }

    fn cfg() -> GenerateConfig {
        GenerateConfig {
            max_atoms: 10,
            ..Default::default()
        }
    }

    #[test]
    fn always_stop_returns_prefix() {
        let prefix = ToyTemplate::Water.molecule();
        let mut ar = Scripted::new(vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = generate(&mut ar, &prefix, &cfg(), &mut rng).unwrap();
        assert_eq!(out.molecule, prefix);
        assert!(!out.truncated);
        let empty = Molecule::default();
        assert!(generate(&mut ar, &empty, &cfg(), &mut rng).unwrap().molecule.is_empty());
    }

    #[test]
    fn truncates_at_limit_and_never_emits_bos() {
        let mut ar = Scripted::new(vec![1; 50]);
        let out = generate(&mut ar, &Molecule::default(), &cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(out.truncated);
        assert_eq!(out.molecule.len(), 10);
        assert!(out.molecule.elements.iter().all(|e| *e == Element::H));
        for (i, x) in out.molecule.coords.iter().enumerate() {
            assert!((x[0] - i as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn prefix_longer_than_limit_is_rejected() {
        let mut ar = Scripted::new(vec![]);
        let big = Molecule::new(vec![Element::C; 11], vec![[0.0; 3]; 11]).unwrap();
        assert!(generate(&mut ar, &big, &cfg(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn decoration_counts_non_hydrogens() {
        let heavy = Molecule::new(vec![Element::C], vec![[0.0; 3]]).unwrap();
        let mut ar = Scripted::new(vec![0, 1, 0, 1]);
        let d = decorate_hydrogens(&mut ar, &heavy, &cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d.molecule.elements[0], Element::C);
        assert_eq!(d.molecule.coords[0], [0.0; 3]);
        assert_eq!((d.hydrogens_added, d.non_hydrogen_added), (2, 1));
        let with_h = ToyTemplate::Methane.molecule();
        assert!(decorate_hydrogens(&mut ar, &with_h, &cfg(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn perfect_decorations_score_full_marks() {
        let truth = ToyTemplate::Methane.molecule();
        let dec = Decoration {
            molecule: truth.clone(),
            truncated: false,
            non_hydrogen_added: 0,
            hydrogens_added: 4,
        };
        let scores = vec![score_decoration(&dec, &truth); 7];
        let r = DecorationReport::from_scores(&scores);
        assert_eq!((r.correct_h, r.rmsd_below), (100.0, [100.0; 3]));
        assert!(DecorationReport::from_scores(&[]).to_tsv().contains("n/a"));
    }

    #[test]
    fn type_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = [0.0, 1.0, 50.0, 0.0];
        assert_eq!(sample_type(&logits, 2, 0.0, &mut rng).unwrap(), 1);
        assert!((0..100).all(|_| sample_type(&logits, 2, 1.0, &mut rng).unwrap() != 2));
        assert!(sample_type(&logits, 1, -1.0, &mut rng).is_err());
        let counts = (0..4000).fold([0usize; 2], |mut c, _| {
            c[sample_type(&[0.0, 2f64.ln()], 9, 1.0, &mut rng).unwrap()] += 1;
            c
        });
        assert!((counts[1] as f64 / 4000.0 - 2.0 / 3.0).abs() < 0.03);
    }
}
