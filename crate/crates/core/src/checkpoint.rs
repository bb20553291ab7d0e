//! Self-describing checkpoint container: magic bytes, a JSON manifest
//! (configuration, vocabulary, tensor directory) and raw little-endian
//! arrays. Live parameters, EMA shadows and optimizer moments live under
//! separate name prefixes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::AdamW;
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::geom::Vocabulary;
use crate::model::{FourierEncoder, ModelConfig, Quetzal};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::train::{DataCursor, TrainConfig};

const MAGIC: &[u8; 8] = b"QUETZAL\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    vocabulary: String,
    diffusion: DiffusionConfig,
    fourier_bandwidths: [f64; 3],
    train: Option<TrainManifest>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainManifest {
    config: TrainConfig,
    step: u64,
    cursor: DataCursor,
    adam_step: u64,
    data_max_atoms: usize,
}

/// Optimizer progress stored alongside the weights.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub step: u64,
    pub cursor: DataCursor,
    pub opt: AdamW<T>,
    /// Largest molecule in the training set.
    pub data_max_atoms: usize,
}

pub struct Checkpoint<T> {
    pub model: Quetzal<T>,
    pub diffusion: DiffusionConfig,
    pub train: Option<TrainState<T>>,
}

struct Writer {
    entries: Vec<TensorEntry>,
    data: Vec<u8>,
}

impl Writer {
    fn put<U: Real>(&mut self, name: String, shape: &[usize], values: &[U]) {
        self.entries.push(TensorEntry {
            name,
            dtype: U::DTYPE.to_string(),
            shape: shape.to_vec(),
            offset: self.data.len(),
        });
        for &v in values {
            v.write_le(&mut self.data);
        }
    }
}

const FOURIER: [&str; 3] = ["coord", "diff", "time"];

fn encoders<T>(model: &Quetzal<T>) -> [&FourierEncoder; 3] {
    [&model.fourier_coord, &model.fourier_diff, &model.fourier_time]
}

/// Serializes a model, its diffusion settings and optional training state.
pub fn to_bytes<T: Real>(
    model: &Quetzal<T>,
    diffusion: &DiffusionConfig,
    train: Option<&TrainState<T>>,
) -> Result<Vec<u8>> {
    let mut w = Writer {
        entries: Vec::new(),
        data: Vec::new(),
    };
    for p in model.params.iter() {
        w.put(format!("params/{}", p.name), p.value.shape(), p.value.data());
    }
    for p in model.params.iter() {
        w.put(format!("ema/{}", p.name), p.ema.shape(), p.ema.data());
    }
    for (name, enc) in FOURIER.iter().zip(encoders(model)) {
        w.put(format!("fourier/{name}.freqs"), &[enc.freqs.len()], &enc.freqs);
        w.put(format!("fourier/{name}.phases"), &[enc.phases.len()], &enc.phases);
    }
    if let Some(t) = train {
        for (p, (m, v)) in model.params.iter().zip(t.opt.m.iter().zip(&t.opt.v)) {
            w.put(format!("adam_m/{}", p.name), m.shape(), m.data());
            w.put(format!("adam_v/{}", p.name), v.shape(), v.data());
        }
    }
    let enc = encoders(model);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        vocabulary: model.vocab.to_text(),
        diffusion: diffusion.clone(),
        fourier_bandwidths: [enc[0].bandwidth, enc[1].bandwidth, enc[2].bandwidth],
        train: train.map(|t| TrainManifest {
            config: t.config.clone(),
            step: t.step,
            cursor: t.cursor,
            adam_step: t.opt.step,
            data_max_atoms: t.data_max_atoms,
        }),
        tensors: w.entries,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + w.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.data);
    Ok(out)
}

struct Reader<'a> {
    entries: Vec<TensorEntry>,
    data: &'a [u8],
}

impl Reader<'_> {
    fn get<U: Real>(&self, name: &str) -> Result<Option<Tensor<U>>> {
        let Some(e) = self.entries.iter().find(|e| e.name == name) else {
            return Ok(None);
        };
        if e.dtype != U::DTYPE {
            return Err(Error::Checkpoint(format!("{name} is {}, expected {}", e.dtype, U::DTYPE)));
        }
        let n: usize = e.shape.iter().product();
        let bytes = e
            .offset
            .checked_add(n * U::BYTES)
            .and_then(|end| self.data.get(e.offset..end))
            .ok_or_else(|| Error::Checkpoint(format!("{name} runs past the end of the file")))?;
        let values = bytes.chunks_exact(U::BYTES).map(U::read_le).collect();
        Tensor::new(e.shape.clone(), values).map(Some)
    }

    fn require<U: Real>(&self, name: &str) -> Result<Tensor<U>> {
        self.get(name)?
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    fn group<U: Real>(&self, prefix: &str) -> Result<Vec<(String, Tensor<U>)>> {
        self.entries
            .iter()
            .filter_map(|e| e.name.strip_prefix(prefix).map(|n| (n.to_string(), e.name.clone())))
            .map(|(short, full)| Ok((short, self.require(&full)?)))
            .collect()
    }
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a quetzal checkpoint"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
    }
    let reader = Reader {
        entries: manifest.tensors,
        data: &bytes[16 + len..],
    };
    let vocab = Vocabulary::from_text(&manifest.vocabulary)?;
    let mut model = Quetzal::<T>::new(manifest.model, vocab, &mut ChaCha8Rng::seed_from_u64(0))?;
    let values = reader.group::<T>("params/")?;
    let ema = reader.group::<T>("ema/")?;
    model.params.load(&values, Some(&ema))?;
    for (i, name) in FOURIER.iter().enumerate() {
        let freqs = reader.require::<f64>(&format!("fourier/{name}.freqs"))?.into_data();
        let phases = reader.require::<f64>(&format!("fourier/{name}.phases"))?.into_data();
        let enc = FourierEncoder {
            freqs,
            phases,
            bandwidth: manifest.fourier_bandwidths[i],
        };
        let slot = match i {
            0 => &mut model.fourier_coord,
            1 => &mut model.fourier_diff,
            _ => &mut model.fourier_time,
        };
        if enc.freqs.len() != slot.freqs.len() || enc.phases.len() != slot.phases.len() {
            return Err(Error::Checkpoint(format!("fourier/{name} does not match the model config")));
        }
        *slot = enc;
    }
    let train = match manifest.train {
        None => None,
        Some(t) => {
            let mut opt = AdamW::new(&model.params, t.config.lr, t.config.beta1, t.config.beta2, t.config.weight_decay);
            opt.clip_norm = (t.config.clip_norm > 0.0).then_some(t.config.clip_norm);
            opt.step = t.adam_step;
            for (i, p) in model.params.iter().enumerate() {
                for (slot, prefix) in [(&mut opt.m[i], "adam_m"), (&mut opt.v[i], "adam_v")] {
                    let v = reader.require::<T>(&format!("{prefix}/{}", p.name))?;
                    if v.shape() != p.value.shape() {
                        return Err(Error::Checkpoint(format!("{prefix}/{} has the wrong shape", p.name)));
                    }
                    *slot = v;
                }
            }
            Some(TrainState {
                config: t.config,
                step: t.step,
                cursor: t.cursor,
                opt,
                data_max_atoms: t.data_max_atoms,
            })
        }
    };
    Ok(Checkpoint {
        model,
        diffusion: manifest.diffusion,
        train,
    })
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn save<T: Real>(
    path: &Path,
    model: &Quetzal<T>,
    diffusion: &DiffusionConfig,
    train: Option<&TrainState<T>>,
) -> Result<()> {
    write_atomic(path, &to_bytes(model, diffusion, train)?)
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
