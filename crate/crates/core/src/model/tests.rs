use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffusion::Denoiser;
use crate::geom::{Element, Molecule, ToyTemplate};

fn vocab() -> Vocabulary {
    Vocabulary::new([Element::H, Element::C, Element::N, Element::O])
}

/// A tiny model with every parameter (including zero-initialized ones)
/// randomized so no path is trivially dead.
pub(crate) fn random_model<T: Real>(seed: u64) -> Quetzal<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = vocab();
    let mut m = Quetzal::<T>::new(ModelConfig::tiny(v.len()), v, &mut rng).unwrap();
    for p in m.params.iter_mut() {
        let noise = Tensor::<T>::randn(p.value.shape().to_vec(), 0.3, &mut rng);
        p.value.add_assign(&noise);
        p.ema = p.value.clone();
    }
    m
}

fn molecules() -> Vec<Molecule> {
    let mut a = ToyTemplate::Methane.molecule();
    a.coords[2][1] += 0.3;
    let b = ToyTemplate::Water.molecule();
    let c = ToyTemplate::Ammonia.molecule();
    vec![a, b, c]
}

struct Outputs {
    logits: Tensor<f64>,
    z: Tensor<f64>,
    d: Tensor<f64>,
}

fn run(m: &Quetzal<f64>, mols: &[&Molecule]) -> Outputs {
    let batch = PackedBatch::from_molecules(mols, &m.vocab, 128).unwrap();
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let h = m.encode_prefix(&mut g, &b, &batch).unwrap();
    let logits = m.type_logits(&mut g, &b, h).unwrap();
    let z = m.conditioning(&mut g, &b, h, &batch.next_types, &batch.doc_ids).unwrap();
    let c = m.project_conditioning(&mut g, &b, z).unwrap();
    let n = batch.len();
    let t: Vec<f64> = (0..n).map(|i| 0.05 + 0.3 * i as f64).collect();
    let x = g.constant(coords_tensor(&vec![[0.3, -0.2, 0.9]; n]));
    let d = m.denoise(&mut g, &b, &t, x, c, 1.4).unwrap();
    Outputs {
        logits: g.value(logits).clone(),
        z: g.value(z).clone(),
        d: g.value(d).clone(),
    }
}

fn rel_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        if x == y {
            continue;
        }
        assert!((x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0), "{x} vs {y}");
    }
}

#[test]
fn parameter_count_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for cfg in [ModelConfig::tiny(6), ModelConfig::desk(6)] {
        let m = Quetzal::<f32>::new(cfg.clone(), vocab(), &mut rng).unwrap();
        assert_eq!(m.num_params(), cfg.param_count());
    }
}

#[test]
fn vocabulary_size_must_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = Quetzal::<f32>::new(ModelConfig::tiny(9), vocab(), &mut rng).unwrap_err();
    assert!(matches!(err, Error::VocabularyMismatch(_)));
}

#[test]
fn preconditioning_at_sigma_data() {
    let s = 1.4;
    let (skip, out, inp) = precond(s, s);
    assert!((skip - 0.5).abs() < 1e-15);
    assert!((out - s / 2f64.sqrt()).abs() < 1e-15);
    assert!((inp - 1.0 / (s * 2f64.sqrt())).abs() < 1e-15);
}

#[test]
fn fresh_network_skips_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = Quetzal::<f64>::new(ModelConfig::tiny(6), vocab(), &mut rng).unwrap();
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let x = [[0.5, -1.0, 2.0], [3.0, 0.1, -0.2]];
    let xv = g.constant(coords_tensor(&x));
    let cond = g.constant(Tensor::randn([2, m.config.diff_width], 1.0, &mut rng));
    let raw = m.diffmlp_raw(&mut g, &b, xv, &[0.1, -0.3], cond).unwrap();
    assert!(g.value(raw).data().iter().all(|&v| v == 0.0));
    let t = [0.7, 12.0];
    let d = m.denoise(&mut g, &b, &t, xv, cond, 1.4).unwrap();
    for i in 0..2 {
        let (skip, _, _) = precond(t[i], 1.4);
        for k in 0..3 {
            assert!((g.value(d).row(i)[k] - skip * x[i][k]).abs() < 1e-14);
        }
    }
    assert!(m.denoise(&mut g, &b, &[0.0, 1.0], xv, cond, 1.4).is_err());
}

#[test]
fn packed_equals_separate() {
    let m = random_model::<f64>(1);
    let mols = molecules();
    let refs: Vec<&Molecule> = mols.iter().collect();
    let packed = run(&m, &refs);
    let mut row = 0;
    for mol in &mols {
        let single = run(&m, &[mol]);
        let n = single.logits.rows();
        for (full, part) in [(&packed.logits, &single.logits), (&packed.z, &single.z)] {
            let c = full.cols();
            rel_close(&full.data()[row * c..(row + n) * c], part.data(), 1e-5);
        }
        row += n;
    }
}

#[test]
fn later_tokens_do_not_affect_earlier_outputs() {
    let m = random_model::<f64>(2);
    let mol = ToyTemplate::Methane.molecule();
    let mut other = mol.clone();
    other.coords[3] = [5.0, 5.0, 5.0];
    other.elements[4] = Element::O;
    let a = run(&m, &[&mol]);
    let b = run(&m, &[&other]);
    // Row 4 is the first to read a changed coordinate and the first whose
    // next type changed.
    let w = a.logits.cols();
    assert_eq!(&a.logits.data()[..4 * w], &b.logits.data()[..4 * w]);
    let w = a.z.cols();
    assert_eq!(&a.z.data()[..4 * w], &b.z.data()[..4 * w]);
    assert_eq!(&a.d.data()[..12], &b.d.data()[..12]);
    assert_ne!(&a.logits.data()[4 * a.logits.cols()..], &b.logits.data()[4 * a.logits.cols()..]);
}

#[test]
fn position_limit_is_enforced() {
    let m = random_model::<f64>(3);
    let n = m.config.max_positions;
    let mol = Molecule::new(vec![Element::C; n], vec![[0.0; 3]; n]).unwrap();
    let batch = PackedBatch::from_molecules(&[&mol], &m.vocab, 1024).unwrap();
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let err = m.encode_prefix(&mut g, &b, &batch).unwrap_err();
    assert!(matches!(err, Error::PositionOverflow { .. }));
}

#[test]
fn cached_session_matches_recompute() {
    let m = random_model::<f64>(5);
    let mol = ToyTemplate::Ammonia.molecule();
    let mut cached = Session::new(&m, false, 1.4).unwrap();
    let mut full = Recompute::new(&m, false, 1.4);
    let probe = [[0.2, 0.1, -0.3], [2.0, -1.0, 0.5]];
    for (e, x) in mol.elements.iter().zip(&mol.coords) {
        rel_close(&cached.type_logits().unwrap(), &full.type_logits().unwrap(), 1e-9);
        let id = m.vocab.id(*e).unwrap();
        cached.commit_type(id).unwrap();
        full.commit_type(id).unwrap();
        for t in [0.01, 1.0, 50.0] {
            let a = cached.denoise_next(t, &probe).unwrap();
            let b = full.denoise_next(t, &probe).unwrap();
            rel_close(a.as_flattened(), b.as_flattened(), 1e-9);
        }
        cached.commit_position(*x).unwrap();
        full.commit_position(*x).unwrap();
    }
    rel_close(&cached.type_logits().unwrap(), &full.type_logits().unwrap(), 1e-9);
    assert_eq!(cached.num_atoms(), 4);
    cached.reset().unwrap();
    assert_eq!(cached.num_atoms(), 0);
    rel_close(&cached.type_logits().unwrap(), &Recompute::new(&m, false, 1.4).type_logits().unwrap(), 1e-9);
}

#[test]
fn session_rejects_bos_and_orphan_positions() {
    let m = random_model::<f64>(6);
    let mut s = Session::new(&m, false, 1.4).unwrap();
    assert!(s.commit_type(m.vocab.bos()).is_err());
    assert!(s.commit_position([0.0; 3]).is_err());
    s.commit_type(m.vocab.stop()).unwrap();
    assert!(s.commit_position([0.0; 3]).is_err());
}

#[test]
fn teacher_forced_matches_session() {
    let m = random_model::<f64>(7);
    let mol = ToyTemplate::Water.molecule();
    let tf = m.teacher_forced(&mol, false).unwrap();
    assert_eq!(tf.type_log_probs.len(), mol.len() + 1);
    let mut s = Session::new(&m, false, 1.4).unwrap();
    for (i, (e, x)) in mol.elements.iter().zip(&mol.coords).enumerate() {
        let lp = log_softmax(&s.type_logits().unwrap(), &[m.vocab.bos()]);
        rel_close(&lp[..m.vocab.emittable()], &tf.type_log_probs[i][..m.vocab.emittable()], 1e-9);
        s.commit_type(m.vocab.id(*e).unwrap()).unwrap();
        let row = Tensor::new([1, tf.cond.cols()], tf.cond.row(i).to_vec()).unwrap();
        let d = ModelDenoiser::new(&m, false, row, 1.4);
        let probe = [[0.4, 0.4, -0.1]];
        rel_close(
            d.denoise(0.3, &probe).unwrap().as_flattened(),
            s.denoise_next(0.3, &probe).unwrap().as_flattened(),
            1e-9,
        );
        s.commit_position(*x).unwrap();
    }
    let total: f64 = tf.type_log_probs[mol.len()].iter().filter(|v| v.is_finite()).map(|v| v.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert_eq!(tf.type_log_probs[0][m.vocab.bos()], f64::NEG_INFINITY);
}

#[test]
fn jacobian_matches_finite_differences() {
    use crate::diffusion::JacobianDenoiser;
    let m = random_model::<f64>(8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cond = Tensor::randn([2, m.config.diff_width], 1.0, &mut rng);
    let d = ModelDenoiser::new(&m, false, cond, 1.4);
    let x = [[0.3, -0.7, 1.1], [-2.0, 0.5, 0.25]];
    for t in [0.01, 0.5, 5.0] {
        let (_, jac) = d.denoise_jacobian(t, &x).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut plus = x;
            let mut minus = x;
            for i in 0..2 {
                plus[i][j] += h;
                minus[i][j] -= h;
            }
            let dp = d.denoise(t, &plus).unwrap();
            let dm = d.denoise(t, &minus).unwrap();
            for i in 0..2 {
                for k in 0..3 {
                    let fd = (dp[i][k] - dm[i][k]) / (2.0 * h);
                    let an = jac[i][k][j];
                    assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3), "t={t} {fd} {an}");
                }
            }
        }
    }
}
