//! The two-stack causal transformer and the preconditioned Diffusion MLP.
//!
//! Stack one reads the prefix (type embedding + linear and Fourier
//! coordinate features + per-document positional embedding) and yields a
//! prefix embedding `h` per position; a small MLP maps `h` to next-type
//! logits. Stack two reads `Emb(next type) + h` and yields the
//! conditioning vector `z` for the next atom's position, which the
//! DiffMLP denoises.

mod config;
mod fourier;
mod session;

use rand::Rng;

pub use config::ModelConfig;
pub use fourier::FourierEncoder;
pub use session::{log_softmax, Autoregressor, LayerCache, ModelDenoiser, Recompute, Session, TeacherForced};

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::geom::{PackedBatch, TokenId, Vec3, Vocabulary};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct BlockIds {
    ln1: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    q_norm: ParamId,
    k_norm: ParamId,
    wo: ParamId,
    ln2: ParamId,
    fc: ParamId,
    proj: ParamId,
}

#[derive(Clone, Debug)]
struct DiffBlockIds {
    ada: ParamId,
    fc1: ParamId,
    fc2: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    tok: ParamId,
    pos: ParamId,
    coord: ParamId,
    coord_fourier: ParamId,
    stack1: Vec<BlockIds>,
    stack2: Vec<BlockIds>,
    type_fc: ParamId,
    type_out: ParamId,
    diff_coord: ParamId,
    diff_fourier: ParamId,
    diff_cond: ParamId,
    diff_blocks: Vec<DiffBlockIds>,
    final_ada: ParamId,
    final_out: ParamId,
}

/// Parameters bound into one graph.
pub struct Bound(Vec<Var>);

impl Bound {
    fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// How a transformer block sees earlier positions.
pub(crate) enum AttnMode<'a, T> {
    /// Whole packed sequence at once under block-causal masking.
    Full(&'a [usize]),
    /// A single new position against cached keys and values.
    Cached(&'a mut LayerCache<T>),
}

/// Karras preconditioning coefficients `(c_skip, c_out, c_in)`.
pub fn precond(t: f64, sigma_data: f64) -> (f64, f64, f64) {
    let s2 = sigma_data * sigma_data;
    let denom = t * t + s2;
    (s2 / denom, t * sigma_data / denom.sqrt(), 1.0 / denom.sqrt())
}

/// The full generative model.
#[derive(Clone, Debug)]
pub struct Quetzal<T> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<T>,
    pub fourier_coord: FourierEncoder,
    pub fourier_diff: FourierEncoder,
    pub fourier_time: FourierEncoder,
    layout: Layout,
}

impl<T: Real> Quetzal<T> {
    pub fn new(config: ModelConfig, vocab: Vocabulary, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::VocabularyMismatch(format!(
                "config expects {} tokens, vocabulary has {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let fourier_coord = FourierEncoder::new(config.n_fourier_coord, config.fourier_bandwidth_coord, rng);
        let fourier_diff = FourierEncoder::new(config.n_fourier_diff, config.fourier_bandwidth_diff, rng);
        let fourier_time = FourierEncoder::new(config.diff_width, config.fourier_bandwidth_time, rng);

        let mut p = ParamStore::new();
        let (w, v, dw) = (config.width, config.vocab_size, config.diff_width);
        let hidden = config.mlp_ratio * w;
        let std = Init::Normal(config.init_std);
        let tok = p.add("embed.tok", &[v, w], std, rng);
        let pos = p.add("embed.pos", &[config.max_positions, w], std, rng);
        let coord = p.add("embed.coord", &[3, w], std, rng);
        let coord_fourier = p.add("embed.coord_fourier", &[3 * config.n_fourier_coord, w], std, rng);
        let mut stack = |p: &mut ParamStore<T>, name: &str| -> Vec<BlockIds> {
            (0..config.blocks_per_stack())
                .map(|i| {
                    let pre = format!("{name}.block{i}");
                    BlockIds {
                        ln1: p.add(format!("{pre}.ln1.w"), &[w], Init::Ones, rng),
                        wq: p.add(format!("{pre}.attn.wq"), &[w, w], std, rng),
                        wk: p.add(format!("{pre}.attn.wk"), &[w, w], std, rng),
                        wv: p.add(format!("{pre}.attn.wv"), &[w, w], std, rng),
                        q_norm: p.add(format!("{pre}.attn.q_norm.w"), &[config.head_dim()], Init::Ones, rng),
                        k_norm: p.add(format!("{pre}.attn.k_norm.w"), &[config.head_dim()], Init::Ones, rng),
                        wo: p.add(format!("{pre}.attn.wo"), &[w, w], std, rng),
                        ln2: p.add(format!("{pre}.ln2.w"), &[w], Init::Ones, rng),
                        fc: p.add(format!("{pre}.mlp.fc"), &[w, hidden], std, rng),
                        proj: p.add(format!("{pre}.mlp.proj"), &[hidden, w], std, rng),
                    }
                })
                .collect()
        };
        let stack1 = stack(&mut p, "stack1");
        let stack2 = stack(&mut p, "stack2");
        let type_fc = p.add("type_head.fc", &[w, w], std, rng);
        let type_out = p.add("type_head.out", &[w, v], std, rng);
        let diff_coord = p.add("diff.in.coord", &[3, dw], std, rng);
        let diff_fourier = p.add("diff.in.fourier", &[3 * config.n_fourier_diff, dw], std, rng);
        let diff_cond = p.add("diff.in.cond", &[w, dw], std, rng);
        let diff_blocks = (0..config.diff_blocks)
            .map(|i| DiffBlockIds {
                ada: p.add(format!("diff.block{i}.ada"), &[dw, 3 * dw], Init::Zeros, rng),
                fc1: p.add(format!("diff.block{i}.fc1"), &[dw, dw], std, rng),
                fc2: p.add(format!("diff.block{i}.fc2"), &[dw, dw], std, rng),
            })
            .collect();
        let final_ada = p.add("diff.final.ada", &[dw, 2 * dw], Init::Zeros, rng);
        let final_out = p.add("diff.final.out", &[dw, 3], Init::Zeros, rng);

        Ok(Quetzal {
            layout: Layout {
                tok,
                pos,
                coord,
                coord_fourier,
                stack1,
                stack2,
                type_fc,
                type_out,
                diff_coord,
                diff_fourier,
                diff_cond,
                diff_blocks,
                final_ada,
                final_out,
            },
            config,
            vocab,
            params: p,
            fourier_coord,
            fourier_diff,
            fourier_time,
        })
    }

    pub fn cast<U: Real>(&self) -> Quetzal<U> {
        Quetzal {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            fourier_coord: self.fourier_coord.clone(),
            fourier_diff: self.fourier_diff.clone(),
            fourier_time: self.fourier_time.clone(),
            layout: self.layout.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>, use_ema: bool) -> Bound {
        Bound(self.params.bind(g, use_ema))
    }

    /// Binds parameters as constants for inference.
    pub fn bind_frozen<'p>(&'p self, g: &mut Graph<'p, T>, use_ema: bool) -> Bound {
        Bound(self.params.bind_frozen(g, use_ema))
    }

    fn linear<'p>(&self, g: &mut Graph<'p, T>, b: &Bound, x: Var, w: ParamId) -> Result<Var> {
        g.matmul(x, b.get(w))
    }

    /// `Emb(a) + Lin(x) + Lin(Fourier(x)) + PosEmb`.
    fn embed_tokens<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        b: &Bound,
        tokens: &[TokenId],
        coords: &[Vec3],
        positions: &[usize],
    ) -> Result<Var> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_positions) {
            return Err(Error::PositionOverflow {
                position: p,
                max: self.config.max_positions,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::UnknownType(format!("token id {t}")));
        }
        let l = &self.layout;
        let tok = g.embedding(b.get(l.tok), tokens)?;
        let pos = g.embedding(b.get(l.pos), positions)?;
        let x = g.constant(coords_tensor(coords));
        let lin = self.linear(g, b, x, l.coord)?;
        let four = g.fourier(x, &self.fourier_coord);
        let four = self.linear(g, b, four, l.coord_fourier)?;
        g.add_all(&[tok, lin, four, pos])
    }

    fn block<'p>(
        &self,
        g: &mut Graph<'p, T>,
        b: &Bound,
        ids: &BlockIds,
        x: Var,
        mode: AttnMode<'_, T>,
    ) -> Result<Var> {
        let (w, heads, dh) = (self.config.width, self.config.n_heads, self.config.head_dim());
        let a = g.layer_norm(x, Some(b.get(ids.ln1)))?;
        let q = self.linear(g, b, a, ids.wq)?;
        let k = self.linear(g, b, a, ids.wk)?;
        let v = self.linear(g, b, a, ids.wv)?;
        let t = g.value(x).rows();
        let q = head_norm(g, q, b.get(ids.q_norm), t, w, dh)?;
        let k = head_norm(g, k, b.get(ids.k_norm), t, w, dh)?;
        let att = match mode {
            AttnMode::Full(doc_ids) => g.attention(q, k, v, doc_ids, heads)?,
            AttnMode::Cached(cache) => {
                cache.keys.extend_from_slice(g.value(k).data());
                cache.values.extend_from_slice(g.value(v).data());
                let n = cache.keys.len() / w;
                let out = crate::autodiff::attention::attend_cached(
                    g.value(q).data(),
                    &cache.keys,
                    &cache.values,
                    n,
                    w,
                    heads,
                );
                g.constant(Tensor::new([1, w], out)?)
            }
        };
        let att = self.linear(g, b, att, ids.wo)?;
        let x = g.add(x, att)?;
        let m = g.layer_norm(x, Some(b.get(ids.ln2)))?;
        let m = self.linear(g, b, m, ids.fc)?;
        let m = g.gelu(m);
        let m = self.linear(g, b, m, ids.proj)?;
        g.add(x, m)
    }

    /// Prefix embeddings `h`, one row per position of the batch.
    pub fn encode_prefix<'p>(&'p self, g: &mut Graph<'p, T>, b: &Bound, batch: &PackedBatch) -> Result<Var> {
        let mut x = self.embed_tokens(g, b, &batch.tokens, &batch.coords, &batch.positions)?;
        for ids in &self.layout.stack1 {
            x = self.block(g, b, ids, x, AttnMode::Full(&batch.doc_ids))?;
        }
        Ok(x)
    }

    /// Next-type logits from prefix embeddings. BOS is never a valid
    /// target; see [`Quetzal::banned_tokens`].
    pub fn type_logits<'p>(&self, g: &mut Graph<'p, T>, b: &Bound, h: Var) -> Result<Var> {
        let x = self.linear(g, b, h, self.layout.type_fc)?;
        let x = g.gelu(x);
        self.linear(g, b, x, self.layout.type_out)
    }

    pub fn banned_tokens(&self) -> [TokenId; 1] {
        [self.vocab.bos()]
    }

    /// Conditioning vectors: position `i` of stack two reads
    /// `Emb(next_types[i]) + h[i]`.
    pub fn conditioning<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        b: &Bound,
        h: Var,
        next_types: &[TokenId],
        doc_ids: &[usize],
    ) -> Result<Var> {
        let e = g.embedding(b.get(self.layout.tok), next_types)?;
        let mut x = g.add(e, h)?;
        for ids in &self.layout.stack2 {
            x = self.block(g, b, ids, x, AttnMode::Full(doc_ids))?;
        }
        Ok(x)
    }

    /// Projection `Lin(z)` of conditioning vectors into the DiffMLP width.
    pub fn project_conditioning<'p>(&self, g: &mut Graph<'p, T>, b: &Bound, z: Var) -> Result<Var> {
        self.linear(g, b, z, self.layout.diff_cond)
    }

    /// The raw network `F(x_in, c_noise, z)`, with `z` already projected by
    /// [`Quetzal::project_conditioning`]. One row per sample.
    pub fn diffmlp_raw<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        b: &Bound,
        x_in: Var,
        c_noise: &[f64],
        cond: Var,
    ) -> Result<Var> {
        let l = &self.layout;
        let dw = self.config.diff_width;
        let mut tf = Vec::with_capacity(c_noise.len() * dw);
        for &c in c_noise {
            self.fourier_time.encode_into(c, &mut tf);
        }
        let time = g.constant(Tensor::new([c_noise.len(), dw], tf)?);
        let lin = self.linear(g, b, x_in, l.diff_coord)?;
        let four = g.fourier(x_in, &self.fourier_diff);
        let four = self.linear(g, b, four, l.diff_fourier)?;
        let s = g.add_all(&[time, lin, four, cond])?;
        let act = g.silu(s);

        let mut x = s;
        for ids in &l.diff_blocks {
            let m = self.linear(g, b, act, ids.ada)?;
            let parts = g.chunk_cols(m, 3)?;
            let h = modulate(g, x, parts[0], parts[1])?;
            let h = self.linear(g, b, h, ids.fc1)?;
            let h = g.silu(h);
            let h = self.linear(g, b, h, ids.fc2)?;
            let h = g.mul(parts[2], h)?;
            x = g.add(x, h)?;
        }
        let m = self.linear(g, b, act, l.final_ada)?;
        let parts = g.chunk_cols(m, 2)?;
        let h = modulate(g, x, parts[0], parts[1])?;
        self.linear(g, b, h, l.final_out)
    }

    /// Preconditioned denoiser
    /// `D = c_skip x + c_out F(c_in x, ln(t) / 4, z)`, row `i` at noise
    /// level `t[i]`.
    pub fn denoise<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        b: &Bound,
        t: &[f64],
        x_noisy: Var,
        cond: Var,
        sigma_data: f64,
    ) -> Result<Var> {
        if let Some(&bad) = t.iter().find(|&&t| !(t > 0.0)) {
            return Err(Error::InvalidArgument(format!("noise level must be positive, got {bad}")));
        }
        let coefs: Vec<(f64, f64, f64)> = t.iter().map(|&t| precond(t, sigma_data)).collect();
        let c_noise: Vec<f64> = t.iter().map(|t| 0.25 * t.ln()).collect();
        let x_in = g.scale_rows(x_noisy, coefs.iter().map(|c| T::of(c.2)).collect())?;
        let f = self.diffmlp_raw(g, b, x_in, &c_noise, cond)?;
        let skip = g.scale_rows(x_noisy, coefs.iter().map(|c| T::of(c.0)).collect())?;
        let out = g.scale_rows(f, coefs.iter().map(|c| T::of(c.1)).collect())?;
        g.add(skip, out)
    }
}

/// Layer norm along each head's slice of the columns.
fn head_norm<T: Real>(g: &mut Graph<'_, T>, x: Var, weight: Var, t: usize, w: usize, dh: usize) -> Result<Var> {
    let heads = w / dh;
    let x = g.reshape(x, [t * heads, dh])?;
    let x = g.layer_norm(x, Some(weight))?;
    g.reshape(x, [t, w])
}

/// `LN(x) * (1 + scale) + shift`.
fn modulate<T: Real>(g: &mut Graph<'_, T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.layer_norm(x, None)?;
    let s = g.add_scalar(scale, T::one());
    let n = g.mul(n, s)?;
    g.add(n, shift)
}

pub(crate) fn coords_tensor<T: Real>(coords: &[Vec3]) -> Tensor<T> {
    let data = coords.iter().flatten().map(|&v| T::of(v)).collect();
    Tensor::new([coords.len(), 3], data).expect("three columns")
}

#[cfg(test)]
mod tests;
