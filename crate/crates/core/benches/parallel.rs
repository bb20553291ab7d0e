//! Sequential loops against the library's data-parallel maps on the same
//! work. Build with `--no-default-features` to make the library maps
//! sequential as well; on a single core the two should tie.

use criterion::{criterion_group, criterion_main, Criterion};
use quetzal::diffusion::DiffusionConfig;
use quetzal::generate::{generate, sample_many, GenerateConfig};
use quetzal::geom::{toy_corpus, Molecule, ToyTemplate, Vocabulary};
use quetzal::metrics::{evaluate, evaluate_molecule, BondTable, MetricOptions, MetricReport};
use quetzal::model::{ModelConfig, Quetzal, Session};
use quetzal::parallel::{is_parallel, stream_rng};
use quetzal::train::{batch_loss, loss_and_grads, pack_molecules};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(n: usize) -> Vec<Molecule> {
    let templates = [ToyTemplate::Methane, ToyTemplate::Water, ToyTemplate::Ammonia];
    toy_corpus(&templates, n, 0.05, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

fn label(name: &str) -> String {
    format!("{name}/{}", if is_parallel() { "rayon" } else { "no-rayon build" })
}

fn metrics(c: &mut Criterion) {
    let mols = corpus(2000);
    let table = BondTable::standard();
    let opts = MetricOptions::default();
    let mut g = c.benchmark_group(label("metrics"));
    g.bench_function("sequential", |b| {
        b.iter(|| {
            let ms: Vec<_> = mols.iter().map(|m| evaluate_molecule(m, &table, &opts)).collect();
            MetricReport::from_metrics(&ms)
        })
    });
    g.bench_function("parallel", |b| b.iter(|| evaluate(&mols, &table, &opts)));
    g.finish();
}

fn training(c: &mut Criterion) {
    let mols = corpus(48);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vocab = Vocabulary::build(&mols);
    let model = Quetzal::<f32>::new(ModelConfig::tiny(vocab.len()), vocab, &mut rng).unwrap();
    let refs: Vec<&Molecule> = mols.iter().collect();
    let packs = pack_molecules(&refs, &model.vocab, 32, 6).unwrap();
    let diff = DiffusionConfig::default();
    let mut g = c.benchmark_group(label("training step"));
    g.sample_size(20);
    g.bench_function("sequential", |b| {
        b.iter(|| {
            for (k, pack) in packs.iter().enumerate() {
                loss_and_grads(&model, std::slice::from_ref(pack), &diff, k as u64).unwrap();
            }
        })
    });
    g.bench_function("parallel", |b| b.iter(|| loss_and_grads(&model, &packs, &diff, 0).unwrap()));
    g.bench_function("forward only", |b| b.iter(|| batch_loss(&model, &packs, &diff, 0).unwrap()));
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let mols = corpus(3);
    let vocab = Vocabulary::build(&mols);
    let model = Quetzal::<f32>::new(ModelConfig::tiny(vocab.len()), vocab, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let cfg = GenerateConfig {
        max_atoms: 6,
        diffusion: DiffusionConfig {
            n_diff: 20,
            ..Default::default()
        },
        ..Default::default()
    };
    let sd = cfg.diffusion.sigma_data;
    let empty = Molecule::default();
    let mut g = c.benchmark_group(label("sampling"));
    g.sample_size(10);
    g.bench_function("sequential", |b| {
        b.iter(|| {
            for i in 0..16 {
                let mut s = Session::new(&model, true, sd).unwrap();
                generate(&mut s, &empty, &cfg, &mut stream_rng(3, i)).unwrap();
            }
        })
    });
    g.bench_function("parallel", |b| {
        b.iter(|| sample_many(|| Session::new(&model, true, sd), &empty, 16, &cfg, 3).unwrap())
    });
    g.finish();
}

criterion_group!(benches, metrics, training, sampling);
criterion_main!(benches);
