use rand::Rng;

use super::{Graph, Gradients, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// A named trainable tensor with its exponential-moving-average shadow.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub ema: Tensor<T>,
}

/// Initialization rule for a freshly created parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let value = match init {
            Init::Normal(std) => Tensor::randn(shape.to_vec(), std, rng),
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::ones(shape.to_vec()),
        };
        self.params.push(Parameter {
            name,
            ema: value.clone(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Binds every parameter (live or EMA weights) as a graph leaf.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>, use_ema: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.param(if use_ema { &p.ema } else { &p.value }))
            .collect()
    }

    /// Binds every parameter as a constant, for inference graphs that
    /// never need parameter gradients.
    pub fn bind_frozen<'p>(&'p self, g: &mut Graph<'p, T>, use_ema: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.constant_ref(if use_ema { &p.ema } else { &p.value }))
            .collect()
    }

    /// Gradients of all parameters, zero where a parameter was unused.
    pub fn collect_grads(&self, bound: &[Var], grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(bound)
            .map(|(p, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    ema: p.ema.cast(),
                })
                .collect(),
        }
    }

    /// Replaces values (and optionally EMA shadows) from `(name, tensor)`
    /// pairs; every parameter must be provided with a matching shape.
    pub fn load(&mut self, values: &[(String, Tensor<T>)], ema: Option<&[(String, Tensor<T>)]>) -> Result<()> {
        fn lookup<'a, T>(set: &'a [(String, Tensor<T>)], name: &str) -> Option<&'a Tensor<T>> {
            set.iter().find(|(n, _)| n == name).map(|(_, t)| t)
        }
        for p in &mut self.params {
            let v = lookup(values, &p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v.clone();
            p.ema = match ema {
                Some(set) => lookup(set, &p.name)
                    .filter(|e| e.shape() == p.value.shape())
                    .ok_or_else(|| Error::Checkpoint(format!("missing EMA for {}", p.name)))?
                    .clone(),
                None => v.clone(),
            };
        }
        Ok(())
    }
}
