//! Incremental inference: a key/value cached session, a full-recompute
//! reference with the same interface, and the per-atom position denoiser.

use super::{coords_tensor, AttnMode, Quetzal};
use crate::autodiff::Graph;
use crate::diffusion::{Denoiser, JacobianDenoiser};
use crate::error::{Error, Result};
use crate::geom::{Molecule, PackedBatch, TokenId, Vec3, Vocabulary};
use crate::real::Real;
use crate::tensor::Tensor;

/// Cached normalized keys and values of one transformer block, `[n, width]`
/// flattened.
#[derive(Clone, Debug, Default)]
pub struct LayerCache<T> {
    pub(crate) keys: Vec<T>,
    pub(crate) values: Vec<T>,
}

/// Step-by-step access to an autoregressive model.
///
/// The protocol per atom is `type_logits`, `commit_type`, then (unless the
/// type was STOP) `denoise_next` queries followed by `commit_position`.
pub trait Autoregressor {
    fn vocab(&self) -> &Vocabulary;

    /// Returns to the state right after BOS.
    fn reset(&mut self) -> Result<()>;

    /// Atoms committed so far.
    fn num_atoms(&self) -> usize;

    /// Largest number of atoms the model can hold.
    fn max_atoms(&self) -> usize;

    /// Unnormalized next-type scores over the whole vocabulary.
    fn type_logits(&mut self) -> Result<Vec<f64>>;

    fn commit_type(&mut self, token: TokenId) -> Result<()>;

    /// Denoiser of the pending atom's position, evaluated for a batch of
    /// candidate points sharing the same conditioning.
    fn denoise_next(&self, t: f64, x: &[Vec3]) -> Result<Vec<Vec3>>;

    fn commit_position(&mut self, x: Vec3) -> Result<()>;

    /// Feeds a known prefix of atoms.
    fn feed(&mut self, mol: &Molecule) -> Result<()> {
        for (e, x) in mol.elements.iter().zip(&mol.coords) {
            let id = self.vocab().id(*e)?;
            self.type_logits()?;
            self.commit_type(id)?;
            self.commit_position(*x)?;
        }
        Ok(())
    }
}

/// Position denoiser backed by the DiffMLP. `cond` holds projected
/// conditioning rows: either one row shared by every query point or one
/// row per point.
pub struct ModelDenoiser<'m, T> {
    model: &'m Quetzal<T>,
    use_ema: bool,
    cond: Tensor<T>,
    sigma_data: f64,
}

impl<'m, T: Real> ModelDenoiser<'m, T> {
    pub fn new(model: &'m Quetzal<T>, use_ema: bool, cond: Tensor<T>, sigma_data: f64) -> Self {
        ModelDenoiser {
            model,
            use_ema,
            cond,
            sigma_data,
        }
    }

    fn cond_for(&self, n: usize) -> Result<Tensor<T>> {
        let rows = self.cond.rows();
        if rows == n {
            return Ok(self.cond.clone());
        }
        if rows != 1 {
            return Err(Error::shape("denoise", format!("{rows} conditioning rows for {n} points")));
        }
        let data = self.cond.data().repeat(n);
        Tensor::new([n, self.cond.cols()], data)
    }

    fn run(&self, t: f64, x: &[Vec3], jacobian: bool) -> Result<(Vec<Vec3>, Vec<[[f64; 3]; 3]>)> {
        let n = x.len();
        let mut g = Graph::new();
        let b = self.model.bind_frozen(&mut g, self.use_ema);
        let xv = if jacobian {
            g.input(coords_tensor(x))
        } else {
            g.constant(coords_tensor(x))
        };
        let c = g.constant(self.cond_for(n)?);
        let d = self.model.denoise(&mut g, &b, &vec![t; n], xv, c, self.sigma_data)?;
        let dv = g.value(d);
        let out: Vec<Vec3> = (0..n)
            .map(|i| {
                let r = dv.row(i);
                [r[0].f64(), r[1].f64(), r[2].f64()]
            })
            .collect();
        let mut jac = Vec::new();
        if jacobian {
            jac = vec![[[0.0; 3]; 3]; n];
            for k in 0..3 {
                let mut seed = Tensor::zeros([n, 3]);
                for i in 0..n {
                    seed.row_mut(i)[k] = T::one();
                }
                let grads = g.backward_with(d, seed);
                let gx = grads.get(xv).ok_or(Error::NonFinite("denoiser jacobian"))?;
                for (i, row) in jac.iter_mut().enumerate() {
                    let r = gx.row(i);
                    row[k] = [r[0].f64(), r[1].f64(), r[2].f64()];
                }
            }
        }
        Ok((out, jac))
    }
}

impl<T: Real> Denoiser for ModelDenoiser<'_, T> {
    fn denoise(&self, t: f64, x: &[Vec3]) -> Result<Vec<Vec3>> {
        Ok(self.run(t, x, false)?.0)
    }
}

impl<T: Real> JacobianDenoiser for ModelDenoiser<'_, T> {
    fn denoise_jacobian(&self, t: f64, x: &[Vec3]) -> Result<(Vec<Vec3>, Vec<[[f64; 3]; 3]>)> {
        self.run(t, x, true)
    }
}

/// Key/value cached inference. Each new token costs one pass over a single
/// row per stack.
pub struct Session<'m, T> {
    model: &'m Quetzal<T>,
    use_ema: bool,
    sigma_data: f64,
    cache1: Vec<LayerCache<T>>,
    cache2: Vec<LayerCache<T>>,
    /// Document position of the latest token (0 is BOS).
    position: usize,
    h: Tensor<T>,
    pending: Option<TokenId>,
    cond: Option<Tensor<T>>,
}

impl<'m, T: Real> Session<'m, T> {
    pub fn new(model: &'m Quetzal<T>, use_ema: bool, sigma_data: f64) -> Result<Self> {
        let mut s = Session {
            model,
            use_ema,
            sigma_data,
            cache1: Vec::new(),
            cache2: Vec::new(),
            position: 0,
            h: Tensor::zeros([1, model.config.width]),
            pending: None,
            cond: None,
        };
        s.reset()?;
        Ok(s)
    }

    fn push_token(&mut self, token: TokenId, x: Vec3, position: usize) -> Result<()> {
        let m = self.model;
        let mut g = Graph::new();
        let b = m.bind_frozen(&mut g, self.use_ema);
        let mut v = m.embed_tokens(&mut g, &b, &[token], &[x], &[position])?;
        for (ids, cache) in m.layout.stack1.iter().zip(&mut self.cache1) {
            v = m.block(&mut g, &b, ids, v, AttnMode::Cached(cache))?;
        }
        self.h = g.value(v).clone();
        self.position = position;
        Ok(())
    }
}

impl<T: Real> Autoregressor for Session<'_, T> {
    fn vocab(&self) -> &Vocabulary {
        &self.model.vocab
    }

    fn reset(&mut self) -> Result<()> {
        let blocks = self.model.config.blocks_per_stack();
        self.cache1 = vec![LayerCache::default(); blocks];
        self.cache2 = vec![LayerCache::default(); blocks];
        self.pending = None;
        self.cond = None;
        self.push_token(self.model.vocab.bos(), [0.0; 3], 0)
    }

    fn num_atoms(&self) -> usize {
        self.position
    }

    fn max_atoms(&self) -> usize {
        self.model.config.max_positions - 1
    }

    fn type_logits(&mut self) -> Result<Vec<f64>> {
        let m = self.model;
        let mut g = Graph::new();
        let b = m.bind_frozen(&mut g, self.use_ema);
        let h = g.constant(self.h.clone());
        let l = m.type_logits(&mut g, &b, h)?;
        Ok(g.value(l).data().iter().map(|v| v.f64()).collect())
    }

    fn commit_type(&mut self, token: TokenId) -> Result<()> {
        let m = self.model;
        if token >= m.vocab.len() || token == m.vocab.bos() {
            return Err(Error::InvalidArgument(format!("cannot emit token {token}")));
        }
        self.pending = Some(token);
        self.cond = None;
        if token == m.vocab.stop() {
            return Ok(());
        }
        let mut g = Graph::new();
        let b = m.bind_frozen(&mut g, self.use_ema);
        let e = g.embedding(b.get(m.layout.tok), &[token])?;
        let h = g.constant(self.h.clone());
        let mut v = g.add(e, h)?;
        for (ids, cache) in m.layout.stack2.iter().zip(&mut self.cache2) {
            v = m.block(&mut g, &b, ids, v, AttnMode::Cached(cache))?;
        }
        let c = m.project_conditioning(&mut g, &b, v)?;
        self.cond = Some(g.value(c).clone());
        Ok(())
    }

    fn denoise_next(&self, t: f64, x: &[Vec3]) -> Result<Vec<Vec3>> {
        let cond = self
            .cond
            .clone()
            .ok_or_else(|| Error::InvalidArgument("no atom type pending".into()))?;
        ModelDenoiser::new(self.model, self.use_ema, cond, self.sigma_data).denoise(t, x)
    }

    fn commit_position(&mut self, x: Vec3) -> Result<()> {
        let token = match self.pending.take() {
            Some(t) if t != self.model.vocab.stop() => t,
            _ => return Err(Error::InvalidArgument("no atom type pending".into())),
        };
        self.cond = None;
        let position = self.position + 1;
        if position >= self.model.config.max_positions {
            return Err(Error::PositionOverflow {
                position,
                max: self.model.config.max_positions,
            });
        }
        self.push_token(token, x, position)
    }
}

/// Reference implementation that recomputes the whole prefix at each step.
pub struct Recompute<'m, T> {
    model: &'m Quetzal<T>,
    use_ema: bool,
    sigma_data: f64,
    tokens: Vec<TokenId>,
    coords: Vec<Vec3>,
    pending: Option<TokenId>,
}

impl<'m, T: Real> Recompute<'m, T> {
    pub fn new(model: &'m Quetzal<T>, use_ema: bool, sigma_data: f64) -> Self {
        Recompute {
            model,
            use_ema,
            sigma_data,
            tokens: vec![model.vocab.bos()],
            coords: vec![[0.0; 3]],
            pending: None,
        }
    }

    fn batch(&self, next_types: Vec<TokenId>) -> PackedBatch {
        let n = self.tokens.len();
        PackedBatch {
            tokens: self.tokens.clone(),
            coords: self.coords.clone(),
            doc_ids: vec![0; n],
            positions: (0..n).collect(),
            boundaries: vec![0, n],
            next_types,
            capacity: n,
        }
    }

    fn cond(&self) -> Result<Tensor<T>> {
        let token = match self.pending {
            Some(t) if t != self.model.vocab.stop() => t,
            _ => return Err(Error::InvalidArgument("no atom type pending".into())),
        };
        let mut next: Vec<TokenId> = self.tokens[1..].to_vec();
        next.push(token);
        let batch = self.batch(next);
        let m = self.model;
        let mut g = Graph::new();
        let b = m.bind_frozen(&mut g, self.use_ema);
        let h = m.encode_prefix(&mut g, &b, &batch)?;
        let z = m.conditioning(&mut g, &b, h, &batch.next_types, &batch.doc_ids)?;
        let last = g.gather_rows(z, vec![batch.len() - 1])?;
        let c = m.project_conditioning(&mut g, &b, last)?;
        Ok(g.value(c).clone())
    }
}

impl<T: Real> Autoregressor for Recompute<'_, T> {
    fn vocab(&self) -> &Vocabulary {
        &self.model.vocab
    }

    fn reset(&mut self) -> Result<()> {
        self.tokens.truncate(1);
        self.coords.truncate(1);
        self.pending = None;
        Ok(())
    }

    fn num_atoms(&self) -> usize {
        self.tokens.len() - 1
    }

    fn max_atoms(&self) -> usize {
        self.model.config.max_positions - 1
    }

    fn type_logits(&mut self) -> Result<Vec<f64>> {
        let batch = self.batch(vec![0; self.tokens.len()]);
        let m = self.model;
        let mut g = Graph::new();
        let b = m.bind_frozen(&mut g, self.use_ema);
        let h = m.encode_prefix(&mut g, &b, &batch)?;
        let last = g.gather_rows(h, vec![batch.len() - 1])?;
        let l = m.type_logits(&mut g, &b, last)?;
        Ok(g.value(l).data().iter().map(|v| v.f64()).collect())
    }

    fn commit_type(&mut self, token: TokenId) -> Result<()> {
        if token >= self.model.vocab.len() || token == self.model.vocab.bos() {
            return Err(Error::InvalidArgument(format!("cannot emit token {token}")));
        }
        self.pending = Some(token);
        Ok(())
    }

    fn denoise_next(&self, t: f64, x: &[Vec3]) -> Result<Vec<Vec3>> {
        ModelDenoiser::new(self.model, self.use_ema, self.cond()?, self.sigma_data).denoise(t, x)
    }

    fn commit_position(&mut self, x: Vec3) -> Result<()> {
        let token = match self.pending.take() {
            Some(t) if t != self.model.vocab.stop() => t,
            _ => return Err(Error::InvalidArgument("no atom type pending".into())),
        };
        if self.tokens.len() >= self.model.config.max_positions {
            return Err(Error::PositionOverflow {
                position: self.tokens.len(),
                max: self.model.config.max_positions,
            });
        }
        self.tokens.push(token);
        self.coords.push(x);
        Ok(())
    }
}

/// Teacher-forced quantities of one molecule: next-type log-probabilities
/// at every position (BOS excluded from the support) and the projected
/// conditioning row of every atom.
pub struct TeacherForced<T> {
    pub type_log_probs: Vec<Vec<f64>>,
    pub targets: Vec<TokenId>,
    pub cond: Tensor<T>,
}

impl<T: Real> Quetzal<T> {
    pub fn teacher_forced(&self, mol: &Molecule, use_ema: bool) -> Result<TeacherForced<T>> {
        if mol.is_empty() {
            return Err(Error::EmptyMolecule);
        }
        let batch = PackedBatch::from_molecules(&[mol], &self.vocab, self.config.max_positions)?;
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g, use_ema);
        let h = self.encode_prefix(&mut g, &b, &batch)?;
        let logits = self.type_logits(&mut g, &b, h)?;
        let z = self.conditioning(&mut g, &b, h, &batch.next_types, &batch.doc_ids)?;
        let (rows, _) = batch.position_targets();
        let z = g.gather_rows(z, rows)?;
        let c = self.project_conditioning(&mut g, &b, z)?;
        let lv = g.value(logits);
        let banned = self.banned_tokens();
        let type_log_probs = (0..lv.rows())
            .map(|i| {
                let row: Vec<f64> = lv.row(i).iter().map(|v| v.f64()).collect();
                log_softmax(&row, &banned)
            })
            .collect();
        Ok(TeacherForced {
            type_log_probs,
            targets: batch.next_types.clone(),
            cond: g.value(c).clone(),
        })
    }
}

/// Log-softmax with `banned` entries set to negative infinity.
pub fn log_softmax(logits: &[f64], banned: &[TokenId]) -> Vec<f64> {
    let allowed = |i: usize| !banned.contains(&i);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .enumerate()
            .filter(|(i, _)| allowed(*i))
            .map(|(_, &v)| (v - max).exp())
            .sum::<f64>()
            .ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if allowed(i) { v - lse } else { f64::NEG_INFINITY })
        .collect()
}
