use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// How a parameter was (or will be) initialised.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform in `±limit`.
    Uniform { limit: f64 },
    Constant(f64),
}

impl Init {
    /// Glorot-style uniform limit `sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(fan_in: usize, fan_out: usize) -> Self {
        Init::Uniform {
            limit: (6.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }

    pub fn sample(&self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        match *self {
            Init::Uniform { limit } => {
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
                Tensor::from_parts(shape.to_vec(), data)
            }
            Init::Constant(c) => Tensor::full(shape, c),
        }
    }
}

/// A named learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub init: Init,
}

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered set of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a freshly sampled parameter. Names must be unique.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let value = init.sample(shape, rng);
        self.insert(Parameter {
            name: name.into(),
            value,
            init,
        })
    }

    pub fn insert(&mut self, p: Parameter) -> Result<ParamId> {
        if self.by_name.contains_key(&p.name) {
            return Err(Error::Config(format!("duplicate parameter name `{}`", p.name)));
        }
        let id = self.params.len();
        self.by_name.insert(p.name.clone(), id);
        self.params.push(p);
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add("w", &[2, 2], Init::glorot(2, 2), &mut rng).unwrap();
        assert!(store.add("w", &[1], Init::Constant(0.0), &mut rng).is_err());
    }

    #[test]
    fn glorot_samples_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = Init::glorot(10, 20);
        let limit = (6.0f64 / 30.0).sqrt();
        let t = init.sample(&[10, 20], &mut rng);
        assert!(t.data().iter().all(|x| x.abs() <= limit));
    }
}
