//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use log::{info, warn};
use quetzal::checkpoint::{self, Checkpoint, TrainState};
use quetzal::config::RunConfig;
use quetzal::diffusion::{karras_timesteps, DiffusionConfig};
use quetzal::error::{Error, Result as QResult};
use quetzal::generate::{decorate_hydrogens, sample_many, score_decoration, DecorationReport, GenerateConfig, Generated};
use quetzal::geom::{center_molecule, pack_sequences, parse_xyz, toy_corpus, write_frame, Molecule, ToyTemplate, Vocabulary};
use quetzal::likelihood::{molecule_nll, LikelihoodConfig, WithWeights};
use quetzal::metrics::{evaluate, BondTable, MetricOptions};
use quetzal::model::{Quetzal, Session};
use quetzal::parallel::{stream_rng, try_map};
use quetzal::train::{Trainer, LOG_HEADER};

use crate::failure::{usage, Result};
use crate::ModelFlags;

/// Random stream for parameter initialization, apart from the data streams.
const INIT_STREAM: u64 = 1 << 60;

fn read_text(path: &Path) -> QResult<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Every frame of an `.xyz` file, or of all `.xyz` files of a directory in
/// name order.
fn read_molecules(path: &Path) -> QResult<Vec<Molecule>> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if !path.is_dir() {
        return parse_xyz(&read_text(path)?);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(io)?;
    files.retain(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("xyz")));
    files.sort();
    let mut mols = Vec::new();
    for f in files {
        mols.extend(parse_xyz(&read_text(&f)?).map_err(|e| match e {
            Error::Parse { line, message } => Error::Parse {
                line,
                message: format!("{}: {message}", f.display()),
            },
            other => other,
        })?);
    }
    Ok(mols)
}

/// Writes to `path` atomically, or to stdout when no path is given.
fn emit(path: Option<&Path>, text: &str) -> Result {
    match path {
        Some(p) => Ok(checkpoint::write_atomic(p, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn check_vocabulary(vocab: &Vocabulary, mols: &[Molecule]) -> QResult<()> {
    for (i, m) in mols.iter().enumerate() {
        if let Some(e) = m.elements.iter().find(|e| vocab.id(**e).is_err()) {
            return Err(Error::VocabularyMismatch(format!(
                "molecule {i} contains {e}, which the checkpoint's vocabulary lacks"
            )));
        }
    }
    Ok(())
}

fn load_model(path: &Path) -> QResult<Checkpoint<f32>> {
    checkpoint::load::<f32>(path)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training molecules (`.xyz` file or directory).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, the loss log and the config used.
    #[arg(long)]
    out: PathBuf,
    /// Flat TOML configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
}

pub fn train(a: TrainArgs) -> Result {
    let raw = read_molecules(&a.data)?;
    if raw.is_empty() {
        return Err(Error::EmptyMolecule.into());
    }
    let data = raw.iter().map(center_molecule).collect::<QResult<Vec<_>>>()?;
    let resumed = a.resume.as_deref().map(load_model).transpose()?;
    let mut cfg = match (&resumed, &a.config) {
        (Some(_), Some(_)) => return Err(usage("--config and --resume are exclusive; use --set to change keys")),
        (Some(ck), None) => RunConfig {
            model: ck.model.config.clone(),
            diffusion: ck.diffusion.clone(),
            train: ck.train.as_ref().map(|t| t.config.clone()).unwrap_or_default(),
        },
        (None, Some(p)) => RunConfig::load(p)?,
        (None, None) => RunConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;

    let mut trainer = match resumed {
        Some(ck) => {
            check_vocabulary(&ck.model.vocab, &data)?;
            if cfg.model_for(ck.model.vocab.len()) != ck.model.config {
                return Err(usage("architecture keys cannot change when resuming"));
            }
            let state = ck
                .train
                .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
            let mut t = Trainer::new(ck.model, cfg.train.clone(), cfg.diffusion.clone(), data)?;
            let clip = t.opt.clip_norm;
            t.opt = state.opt;
            t.opt.clip_norm = clip;
            (t.opt.beta1, t.opt.beta2, t.opt.weight_decay) = (cfg.train.beta1, cfg.train.beta2, cfg.train.weight_decay);
            t.resume(state.step, state.cursor)?;
            info!("resuming at step {}", t.step);
            t
        }
        None => {
            let vocab = Vocabulary::build(&data);
            let model = Quetzal::new(cfg.model_for(vocab.len()), vocab, &mut stream_rng(cfg.train.seed, INIT_STREAM))?;
            info!("{} parameters", model.num_params());
            Trainer::new(model, cfg.train.clone(), cfg.diffusion.clone(), data)?
        }
    };

    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    checkpoint::write_atomic(&a.out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let log_path = a.out.join("loss.tsv");
    let fresh_log = trainer.step == 0 || !log_path.exists();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh_log)
        .truncate(fresh_log)
        .open(&log_path)
        .map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
    let log_err = |e| Error::Io {
        path: log_path.clone(),
        source: e,
    };
    if fresh_log {
        writeln!(log, "{LOG_HEADER}").map_err(log_err)?;
    }
    let ckpt = a.out.join("checkpoint.qz");
    let save = |t: &Trainer| -> QResult<()> {
        let state = TrainState {
            config: t.cfg.clone(),
            step: t.step,
            cursor: t.cursor,
            opt: t.opt.clone(),
            data_max_atoms: t.data_max_atoms(),
        };
        checkpoint::save(&ckpt, &t.model, &t.diffusion, Some(&state))
    };
    while trainer.step < cfg.train.steps {
        let row = trainer.step()?;
        let last = trainer.step == cfg.train.steps;
        if row.step % cfg.train.log_every.max(1) == 0 || last {
            writeln!(log, "{}", row.to_tsv()).map_err(log_err)?;
            info!(
                "step {} type {:.4} diff {:.4} acc {:.3}",
                row.step, row.type_loss, row.diff_loss, row.type_accuracy
            );
        }
        if (cfg.train.checkpoint_every > 0 && row.step % cfg.train.checkpoint_every == 0) || last {
            save(&trainer)?;
        }
    }
    if !ckpt.exists() {
        save(&trainer)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenFlags {
    /// Maximum atoms per molecule (default: largest training molecule + 5).
    #[arg(long)]
    max_atoms: Option<usize>,
    /// Softmax temperature for atom types; 0 picks the most likely type.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
}

fn generate_config(ck: &Checkpoint<f32>, m: &ModelFlags, g: &GenFlags) -> Result<GenerateConfig> {
    if m.n_diff < 2 {
        return Err(usage("--n-diff must be at least 2"));
    }
    if !(g.temperature >= 0.0) {
        return Err(usage("--temperature must be non-negative"));
    }
    let limit = ck.model.config.max_positions - 1;
    let default = ck.train.as_ref().map_or(limit, |t| t.data_max_atoms + 5);
    Ok(GenerateConfig {
        max_atoms: g.max_atoms.unwrap_or(default).min(limit),
        temperature: g.temperature,
        diffusion: DiffusionConfig {
            n_diff: m.n_diff,
            ..ck.diffusion.clone()
        },
    })
}

fn frames(out: &[Generated], label: &str) -> String {
    let mut text = String::new();
    for (i, g) in out.iter().enumerate() {
        write_frame(&mut text, &g.molecule, &format!("{label}={i} truncated={}", g.truncated));
    }
    text
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    gen: GenFlags,
    /// Number of molecules.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Output `.xyz` file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn sample(a: SampleArgs) -> Result {
    let ck = load_model(&a.model.checkpoint)?;
    let cfg = generate_config(&ck, &a.model, &a.gen)?;
    let (model, ema, sd) = (&ck.model, a.model.use_ema(), ck.diffusion.sigma_data);
    let out = sample_many(|| Session::new(model, ema, sd), &Molecule::default(), a.n, &cfg, a.model.seed)?;
    let truncated = out.iter().filter(|g| g.truncated).count();
    if truncated > 0 {
        warn!("{truncated} of {} samples hit the atom limit", out.len());
    }
    emit(a.out.as_deref(), &frames(&out, "sample"))
}

#[derive(Args, Debug)]
pub struct NllArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// Molecules to score (`.xyz` file or directory); centered before scoring.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn nll(a: NllArgs) -> Result {
    let ck = load_model(&a.model.checkpoint)?;
    let mols = read_molecules(&a.data)?
        .iter()
        .map(center_molecule)
        .collect::<QResult<Vec<_>>>()?;
    check_vocabulary(&ck.model.vocab, &mols)?;
    if a.model.n_diff < 2 {
        return Err(usage("--n-diff must be at least 2"));
    }
    // Likelihood Jacobians are evaluated in double precision.
    let model = ck.model.cast::<f64>();
    let scorer = WithWeights {
        model: &model,
        use_ema: a.model.use_ema(),
        sigma_data: ck.diffusion.sigma_data,
    };
    let lcfg = LikelihoodConfig {
        n_like: a.model.n_diff,
        ..Default::default()
    };
    let rows = try_map(&mols, |_, m| molecule_nll(&scorer, m, &ck.diffusion, &lcfg))?;
    let mut text = String::from("index\tn_atoms\ttype_nll\tposition_nll\tnll\n");
    for (i, (m, r)) in mols.iter().zip(&rows).enumerate() {
        let _ = writeln!(text, "{i}\t{}\t{:.6}\t{:.6}\t{:.6}", m.len(), r.types, r.positions, r.total());
    }
    let n = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&quetzal::likelihood::MoleculeNll) -> f64| {
        if rows.is_empty() {
            "n/a".to_string()
        } else {
            format!("{:.6}", rows.iter().map(f).sum::<f64>() / n)
        }
    };
    let atoms = if mols.is_empty() {
        "n/a".to_string()
    } else {
        format!("{:.3}", mols.iter().map(Molecule::len).sum::<usize>() as f64 / n)
    };
    let _ = writeln!(
        text,
        "mean\t{atoms}\t{}\t{}\t{}",
        mean(&|r| r.types),
        mean(&|r| r.positions),
        mean(&|r| r.total())
    );
    emit(a.out.as_deref(), &text)
}

#[derive(Args, Debug)]
pub struct DecorateArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    gen: GenFlags,
    /// Reference molecules; their hydrogens are removed and regenerated.
    #[arg(long)]
    data: PathBuf,
    /// Decorated molecules as `.xyz`.
    #[arg(long)]
    out: PathBuf,
    /// Score table (default: stdout).
    #[arg(long)]
    report: Option<PathBuf>,
}

pub fn decorate(a: DecorateArgs) -> Result {
    let ck = load_model(&a.model.checkpoint)?;
    let cfg = generate_config(&ck, &a.model, &a.gen)?;
    let truths = read_molecules(&a.data)?;
    check_vocabulary(&ck.model.vocab, &truths)?;
    let (model, ema, sd) = (&ck.model, a.model.use_ema(), ck.diffusion.sigma_data);
    let results = try_map(&truths, |i, truth| {
        let mut session = Session::new(model, ema, sd)?;
        let dec = decorate_hydrogens(
            &mut session,
            &truth.without_hydrogens(),
            &cfg,
            &mut stream_rng(a.model.seed, i as u64),
        )?;
        let score = score_decoration(&dec, truth);
        Ok((dec, score))
    })?;
    let mut text = String::new();
    for (i, (d, s)) in results.iter().enumerate() {
        let comment = format!(
            "decorated={i} hydrogens={} non_hydrogen_added={} rmsd={:.4} truncated={}",
            d.hydrogens_added, d.non_hydrogen_added, s.rmsd, d.truncated
        );
        write_frame(&mut text, &d.molecule, &comment);
    }
    checkpoint::write_atomic(&a.out, text.as_bytes())?;
    let scores: Vec<_> = results.into_iter().map(|(_, s)| s).collect();
    emit(a.report.as_deref(), &DecorationReport::from_scores(&scores).to_tsv())
}

#[derive(Args, Debug)]
pub struct ScaffoldArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    gen: GenFlags,
    /// Scaffold `.xyz`; its first frame is the fixed prefix, used as given.
    #[arg(long)]
    scaffold: PathBuf,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn scaffold(a: ScaffoldArgs) -> Result {
    let ck = load_model(&a.model.checkpoint)?;
    let cfg = generate_config(&ck, &a.model, &a.gen)?;
    let scaffold = read_molecules(&a.scaffold)?.into_iter().next().unwrap_or_default();
    check_vocabulary(&ck.model.vocab, std::slice::from_ref(&scaffold))?;
    let (model, ema, sd) = (&ck.model, a.model.use_ema(), ck.diffusion.sigma_data);
    let out = quetzal::generate::complete_scaffold(|| Session::new(model, ema, sd), &scaffold, a.n, &cfg, a.model.seed)?;
    emit(a.out.as_deref(), &frames(&out, "completion"))
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// `.xyz` file or directory of `.xyz` files.
    #[arg(long)]
    input: PathBuf,
    /// Count multi-fragment molecules as valid.
    #[arg(long)]
    allow_fragments: bool,
    /// Bond length table replacing the shipped one (needs `--valency`).
    #[arg(long, requires = "valency")]
    bonds: Option<PathBuf>,
    /// Allowed valencies replacing the shipped ones (needs `--bonds`).
    #[arg(long, requires = "bonds")]
    valency: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval(a: EvalArgs) -> Result {
    let table = match (&a.bonds, &a.valency) {
        (Some(b), Some(v)) => BondTable::parse(&read_text(b)?, &read_text(v)?)?,
        _ => BondTable::standard(),
    };
    let mols = read_molecules(&a.input)?;
    let opts = MetricOptions {
        require_connected: !a.allow_fragments,
    };
    let report = evaluate(&mols, &table, &opts);
    if report.untabulated_pairs > 0 {
        warn!("{} atom pairs had no bond table entry and were left unbonded", report.untabulated_pairs);
    }
    emit(a.out.as_deref(), &report.to_tsv())
}

#[derive(Args, Debug)]
pub struct PackStatsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 128)]
    capacity: usize,
    #[arg(long, default_value_t = 6)]
    max_per_pack: usize,
}

pub fn pack_stats(a: PackStatsArgs) -> Result {
    let mols = read_molecules(&a.data)?;
    // Each document carries a BOS token.
    let lengths: Vec<usize> = mols.iter().map(|m| m.len() + 1).collect();
    let packs = pack_sequences(&lengths, a.capacity, a.max_per_pack)?;
    let tokens: usize = lengths.iter().sum();
    let fill = if packs.is_empty() {
        "n/a".to_string()
    } else {
        format!("{:.4}", tokens as f64 / (packs.len() * a.capacity) as f64)
    };
    let max_docs = packs.iter().map(Vec::len).max().unwrap_or(0);
    let max_len = lengths.iter().max().copied().unwrap_or(0);
    print!(
        "molecules\ttokens\tpacks\tfill\tmax_docs_per_pack\tmax_length\n{}\t{tokens}\t{}\t{fill}\t{max_docs}\t{max_len}\n",
        mols.len(),
        packs.len()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 60)]
    n_diff: usize,
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
}

pub fn schedule_dump(a: ScheduleArgs) -> Result {
    let mut cfg = DiffusionConfig::default();
    cfg.sigma_min = a.sigma_min.unwrap_or(cfg.sigma_min);
    cfg.sigma_max = a.sigma_max.unwrap_or(cfg.sigma_max);
    cfg.rho = a.rho.unwrap_or(cfg.rho);
    cfg.n_diff = a.n_diff;
    cfg.validate()?;
    let ts = karras_timesteps(a.n_diff, &cfg)?;
    let line: Vec<String> = ts.iter().map(f64::to_string).collect();
    println!("{}", line.join(" "));
    Ok(())
}

#[derive(Args, Debug)]
pub struct MakeToyArgs {
    /// Comma-separated templates: methane, water, ammonia.
    #[arg(long, value_delimiter = ',', default_value = "methane")]
    molecules: Vec<ToyTemplate>,
    /// Copies of each template.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Standard deviation of the coordinate jitter in angstrom.
    #[arg(long, default_value_t = 0.02)]
    jitter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn make_toy(a: MakeToyArgs) -> Result {
    if !(a.jitter >= 0.0) {
        return Err(usage("--jitter must be non-negative"));
    }
    let mols = toy_corpus(&a.molecules, a.count, a.jitter, &mut stream_rng(a.seed, 0))?;
    let mut text = String::new();
    for (i, m) in mols.iter().enumerate() {
        write_frame(&mut text, m, &format!("toy={i}"));
    }
    checkpoint::write_atomic(&a.out, text.as_bytes())?;
    Ok(())
}
