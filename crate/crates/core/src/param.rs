//! Named, trainable parameters.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter was initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean Gaussian with the given standard deviation.
    Normal {
        std: f64,
    },
    /// Explicit values (e.g. the sampling-offset stencil).
    Values(&'static str),
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Init::Zeros => write!(f, "zeros"),
            Init::Ones => write!(f, "ones"),
            Init::Normal { std } => write!(f, "normal(std={std})"),
            Init::Values(what) => write!(f, "values({what})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub init: Init,
    /// Multiplier on the base learning rate.
    pub lr_mult: f64,
}

/// Owns every parameter of a model. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, init: Init, lr_mult: f64) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        if !(lr_mult >= 0.0) {
            return Err(Error::Config(format!(
                "learning-rate multiplier of `{name}` must be >= 0"
            )));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            init,
            lr_mult,
        });
        Ok(id)
    }

    /// Adds a parameter drawn from `init`.
    pub fn init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        lr_mult: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let value = match &init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Normal { std } => {
                let normal = Normal::new(0.0, *std).map_err(|e| Error::Config(e.to_string()))?;
                let n = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())?
            }
            Init::Values(what) => {
                return Err(Error::Config(format!(
                    "explicit initializer `{what}` needs values; use ParamStore::add"
                )))
            }
        };
        self.add(name, value, init, lr_mult)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2]), Init::Zeros, 1.0).unwrap();
        assert!(matches!(
            store.add("w", Tensor::zeros(&[2]), Init::Zeros, 1.0),
            Err(Error::DuplicateParameter(_))
        ));
    }

    #[test]
    fn lr_multiplier_recorded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let id = store
            .init("offsets", &[4, 3], Init::Normal { std: 0.1 }, 0.1, &mut rng)
            .unwrap();
        assert_eq!(store.get(id).lr_mult, 0.1);
        assert!(store.add("bad", Tensor::zeros(&[1]), Init::Zeros, -1.0).is_err());
    }
}
