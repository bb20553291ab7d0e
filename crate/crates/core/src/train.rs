//! The combined training objective over packed batches and the training
//! loop state: data order, augmentation, AdamW, EMA and the loss log.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ema_update, AdamW, Graph};
use crate::diffusion::{diffusion_loss, DiffusionConfig};
use crate::error::{Error, Result};
use crate::geom::{augment, pack_sequences, Molecule, PackedBatch};
use crate::model::Quetzal;
use crate::parallel::{stream_rng, try_map};
use crate::real::Real;
use crate::tensor::Tensor;

/// Optimizer and data-pipeline hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    /// Global gradient norm clip; zero disables clipping.
    pub clip_norm: f64,
    /// Linear learning-rate warmup length in steps; zero disables it.
    pub warmup_steps: u64,
    pub pack_capacity: usize,
    pub max_per_pack: usize,
    pub packs_per_batch: usize,
    pub steps: u64,
    /// Random rotation and translation of every example.
    pub augment: bool,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 1e-5,
            ema_decay: 0.999,
            clip_norm: 1.0,
            warmup_steps: 0,
            pack_capacity: 128,
            max_per_pack: 6,
            packs_per_batch: 180,
            steps: 1000,
            augment: true,
            seed: 0,
            log_every: 10,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("lr must be positive and betas in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return fail("ema_decay must be in [0, 1], weight_decay and clip_norm non-negative");
        }
        if self.pack_capacity == 0 || self.max_per_pack == 0 || self.packs_per_batch == 0 {
            return fail("pack_capacity, max_per_pack and packs_per_batch must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Sums over a set of packs. Losses are per prediction averages over the
/// whole batch: type cross-entropy per type target and weighted denoising
/// error per (target, timestep) draw.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub type_loss: f64,
    pub diff_loss: f64,
    pub type_targets: usize,
    pub type_correct: usize,
    pub diff_draws: usize,
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        self.type_loss + self.diff_loss
    }

    pub fn type_accuracy(&self) -> f64 {
        self.type_correct as f64 / self.type_targets.max(1) as f64
    }
}

struct PackResult<T> {
    type_sum: f64,
    diff_sum: f64,
    correct: usize,
    grads: Option<Vec<Tensor<T>>>,
}

fn diffusion_draws(batch: &PackedBatch, diff: &DiffusionConfig) -> usize {
    batch.position_targets().0.len() * diff.timesteps_per_token
}

fn pack_forward<T: Real>(
    model: &Quetzal<T>,
    batch: &PackedBatch,
    diff: &DiffusionConfig,
    norm: (f64, f64),
    rng: &mut impl Rng,
    with_grads: bool,
) -> Result<PackResult<T>> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let h = model.encode_prefix(&mut g, &b, batch)?;
    let logits = model.type_logits(&mut g, &b, h)?;
    let banned = model.banned_tokens();
    let ce = g.cross_entropy(logits, &batch.next_types, &banned)?;
    let correct = {
        let lv = g.value(logits);
        (0..lv.rows())
            .filter(|&r| {
                let row = lv.row(r);
                let best = (0..row.len())
                    .filter(|c| !banned.contains(c))
                    .max_by(|&a, &c| row[a].f64().total_cmp(&row[c].f64()))
                    .expect("vocabulary has emittable tokens");
                best == batch.next_types[r]
            })
            .count()
    };
    let z = model.conditioning(&mut g, &b, h, &batch.next_types, &batch.doc_ids)?;
    let c = model.project_conditioning(&mut g, &b, z)?;
    let (rows, targets) = batch.position_targets();
    let (type_sum, mut total) = (g.value(ce).data()[0].f64(), g.scale(ce, T::of(1.0 / norm.0)));
    let mut diff_sum = 0.0;
    if !rows.is_empty() {
        let cz = g.gather_rows(c, rows)?;
        let (d, _) = diffusion_loss(model, &mut g, &b, cz, &targets, diff, rng)?;
        diff_sum = g.value(d).data()[0].f64();
        let d = g.scale(d, T::of(1.0 / norm.1));
        total = g.add(total, d)?;
    }
    if !type_sum.is_finite() || !diff_sum.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let grads = with_grads.then(|| {
        let mut gr = g.backward(total);
        model.params.collect_grads(b.vars(), &mut gr)
    });
    Ok(PackResult {
        type_sum,
        diff_sum,
        correct,
        grads,
    })
}

fn batch_pass<T: Real>(
    model: &Quetzal<T>,
    packs: &[PackedBatch],
    diff: &DiffusionConfig,
    seed: u64,
    with_grads: bool,
) -> Result<(StepLoss, Option<Vec<Tensor<T>>>)> {
    let n_types: usize = packs.iter().map(PackedBatch::len).sum();
    let n_draws: usize = packs.iter().map(|p| diffusion_draws(p, diff)).sum();
    let norm = (n_types.max(1) as f64, n_draws.max(1) as f64);
    let results = try_map(packs, |k, pack| {
        pack_forward(model, pack, diff, norm, &mut stream_rng(seed, k as u64), with_grads)
    })?;
    let mut loss = StepLoss {
        type_targets: n_types,
        diff_draws: n_draws,
        ..Default::default()
    };
    let mut grads: Option<Vec<Tensor<T>>> = None;
    // Fixed summation order keeps results independent of scheduling.
    for r in results {
        loss.type_loss += r.type_sum / norm.0;
        loss.diff_loss += r.diff_sum / norm.1;
        loss.type_correct += r.correct;
        if let Some(gs) = r.grads {
            match grads.as_mut() {
                None => grads = Some(gs),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&gs) {
                        a.add_assign(g);
                    }
                }
            }
        }
    }
    Ok((loss, grads))
}

/// Batch loss and its gradient with respect to every parameter (in store
/// order). Pack `k` draws its diffusion noise from stream `k` of `seed`,
/// so the value is a deterministic function of the parameters.
pub fn loss_and_grads<T: Real>(
    model: &Quetzal<T>,
    packs: &[PackedBatch],
    diff: &DiffusionConfig,
    seed: u64,
) -> Result<(StepLoss, Vec<Tensor<T>>)> {
    let (loss, grads) = batch_pass(model, packs, diff, seed, true)?;
    let grads = grads.unwrap_or_else(|| model.params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect());
    Ok((loss, grads))
}

pub fn batch_loss<T: Real>(model: &Quetzal<T>, packs: &[PackedBatch], diff: &DiffusionConfig, seed: u64) -> Result<StepLoss> {
    Ok(batch_pass(model, packs, diff, seed, false)?.0)
}

/// Groups molecules into packed batches with the histogram packer.
pub fn pack_molecules(mols: &[&Molecule], model_vocab: &crate::geom::Vocabulary, capacity: usize, max_per_pack: usize) -> Result<Vec<PackedBatch>> {
    let lengths: Vec<usize> = mols.iter().map(|m| m.len() + 1).collect();
    pack_sequences(&lengths, capacity, max_per_pack)?
        .iter()
        .map(|pack| {
            let docs: Vec<&Molecule> = pack.iter().map(|&i| mols[i]).collect();
            PackedBatch::from_molecules(&docs, model_vocab, capacity)
        })
        .collect()
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub type_loss: f64,
    pub diff_loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub type_accuracy: f64,
}

pub const LOG_HEADER: &str = "step\ttype_loss\tdiff_loss\tgrad_norm\tlr";

impl LogRow {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.3e}",
            self.step, self.type_loss, self.diff_loss, self.grad_norm, self.lr
        )
    }
}

/// Position in the data stream, saved with checkpoints so a resumed run
/// continues the same example order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataCursor {
    pub epoch: u64,
    /// Packs of the current epoch already consumed.
    pub pack: usize,
}

/// Training state for an `f32` model.
pub struct Trainer {
    pub model: Quetzal<f32>,
    pub opt: AdamW<f32>,
    pub cfg: TrainConfig,
    pub diffusion: DiffusionConfig,
    pub step: u64,
    pub cursor: DataCursor,
    data: Vec<Molecule>,
    epoch_order: Vec<Vec<usize>>,
}

const DATA_STREAM: u64 = 1 << 62;
const AUG_STREAM: u64 = 1 << 61;

impl Trainer {
    /// `data` must already be centered.
    pub fn new(model: Quetzal<f32>, cfg: TrainConfig, diffusion: DiffusionConfig, data: Vec<Molecule>) -> Result<Self> {
        cfg.validate()?;
        diffusion.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        if let Some(big) = data.iter().find(|m| m.len() + 1 > cfg.pack_capacity.min(model.config.max_positions)) {
            return Err(Error::InvalidArgument(format!(
                "a training molecule has {} atoms; capacity {} and max_positions {} leave room for {}",
                big.len(),
                cfg.pack_capacity,
                model.config.max_positions,
                cfg.pack_capacity.min(model.config.max_positions) - 1
            )));
        }
        for m in &data {
            model.vocab.encode(m)?;
        }
        let mut opt = AdamW::new(&model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
        opt.clip_norm = (cfg.clip_norm > 0.0).then_some(cfg.clip_norm);
        let mut t = Trainer {
            model,
            opt,
            cfg,
            diffusion,
            step: 0,
            cursor: DataCursor::default(),
            data,
            epoch_order: Vec::new(),
        };
        t.epoch_order = t.plan_epoch(0)?;
        Ok(t)
    }

    /// Restores progress after loading model and optimizer state.
    pub fn resume(&mut self, step: u64, cursor: DataCursor) -> Result<()> {
        self.epoch_order = self.plan_epoch(cursor.epoch)?;
        if cursor.pack > self.epoch_order.len() {
            return Err(Error::Checkpoint("data cursor is past the end of its epoch".into()));
        }
        self.step = step;
        self.cursor = cursor;
        Ok(())
    }

    fn plan_epoch(&self, epoch: u64) -> Result<Vec<Vec<usize>>> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, DATA_STREAM + epoch));
        let lengths: Vec<usize> = order.iter().map(|&i| self.data[i].len() + 1).collect();
        let packs = pack_sequences(&lengths, self.cfg.pack_capacity, self.cfg.max_per_pack)?;
        let mut packs: Vec<Vec<usize>> = packs.into_iter().map(|p| p.into_iter().map(|k| order[k]).collect()).collect();
        // The packer emits packs in fill order; shuffle so each batch mixes.
        packs.shuffle(&mut stream_rng(self.cfg.seed, DATA_STREAM + epoch));
        Ok(packs)
    }

    fn next_packs(&mut self) -> Result<Vec<PackedBatch>> {
        let mut out = Vec::with_capacity(self.cfg.packs_per_batch);
        let mut aug = stream_rng(self.cfg.seed, AUG_STREAM + self.step);
        while out.len() < self.cfg.packs_per_batch {
            if self.cursor.pack == self.epoch_order.len() {
                self.cursor = DataCursor {
                    epoch: self.cursor.epoch + 1,
                    pack: 0,
                };
                self.epoch_order = self.plan_epoch(self.cursor.epoch)?;
            }
            let docs: Vec<Molecule> = self.epoch_order[self.cursor.pack]
                .iter()
                .map(|&i| {
                    if self.cfg.augment {
                        augment(&self.data[i], &mut aug)
                    } else {
                        self.data[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&Molecule> = docs.iter().collect();
            out.push(PackedBatch::from_molecules(&refs, &self.model.vocab, self.cfg.pack_capacity)?);
            self.cursor.pack += 1;
        }
        Ok(out)
    }

    pub fn data_max_atoms(&self) -> usize {
        self.data.iter().map(Molecule::len).max().unwrap_or(0)
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self) -> Result<LogRow> {
        let packs = self.next_packs()?;
        let seed = self.cfg.seed ^ self.step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let (loss, mut grads) = loss_and_grads(&self.model, &packs, &self.diffusion, seed)?;
        let lr = self.cfg.lr_at(self.step);
        self.opt.lr = lr;
        let grad_norm = self.opt.step(&mut self.model.params, &mut grads)?;
        ema_update(&mut self.model.params, self.cfg.ema_decay);
        self.step += 1;
        Ok(LogRow {
            step: self.step,
            type_loss: loss.type_loss,
            diff_loss: loss.diff_loss,
            grad_norm,
            lr,
            type_accuracy: loss.type_accuracy(),
        })
    }
}
