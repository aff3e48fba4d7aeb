//! Named parameters and the store that owns them.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Index of a parameter inside its [`ParamStore`]. Two call sites holding the
/// same id share the parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub trainable: bool,
    /// Depth index used by layer-wise learning-rate decay.
    pub layer: usize,
    /// Norm gains/offsets and biases skip weight decay.
    pub no_decay: bool,
}

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), fan_in = first extent.
    FanIn,
    Uniform(f64),
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, param: Parameter<F>) -> Result<ParamId> {
        if self.by_name.contains_key(&param.name) {
            return Err(Error::contract(format!("duplicate parameter name {}", param.name)));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<F>> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Trainable parameters sorted by name.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.ids().filter(|&id| self.get(id).trainable).collect();
        ids.sort_by(|a, b| self.get(*a).name.cmp(&self.get(*b).name));
        ids
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                    layer: p.layer,
                    no_decay: p.no_decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Builds parameters deterministically from a seed; each parameter draws
/// from its own name-keyed stream.
pub struct ParamBuilder<'a, F> {
    pub store: &'a mut ParamStore<F>,
    pub seed: u64,
}

impl<'a, F: Real> ParamBuilder<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, seed: u64) -> Self {
        Self { store, seed }
    }

    pub fn add(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        trainable: bool,
        layer: usize,
    ) -> Result<ParamId> {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::FanIn => {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                self.uniform(name, shape, bound)
            }
            Init::Uniform(bound) => self.uniform(name, shape, bound),
        };
        let no_decay = matches!(init, Init::Ones) || shape.len() == 1;
        self.store.insert(Parameter {
            name: name.to_string(),
            value,
            trainable,
            layer,
            no_decay,
        })
    }

    fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Tensor<F> {
        let mut r = rng::stream(self.seed, &format!("init/{name}"));
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Tensor::from_fn(shape, |_| F::lit(dist.sample(&mut r)))
    }
}

/// Overwrites every listed parameter with uniform noise; used to move a
/// zero-initialised model to a generic point for gradient checks.
pub fn randomize<F: Real>(store: &mut ParamStore<F>, ids: &[ParamId], seed: u64, bound: f64) {
    for &id in ids {
        let p = store.get_mut(id);
        let mut r = rng::stream(seed, &format!("perturb/{}", p.name));
        for v in p.value.data_mut() {
            *v = F::lit(r.random_range(-bound..=bound));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut b = ParamBuilder::new(&mut store, 1);
        b.add("a.w", &[2, 2], Init::FanIn, true, 1).unwrap();
        assert!(b.add("a.w", &[2, 2], Init::FanIn, true, 1).is_err());
    }

    #[test]
    fn fan_in_bounds_and_determinism() {
        let mut s1 = ParamStore::<f32>::new();
        let mut s2 = ParamStore::<f32>::new();
        let id1 = ParamBuilder::new(&mut s1, 3).add("w", &[16, 4], Init::FanIn, false, 0).unwrap();
        ParamBuilder::new(&mut s2, 3).add("other", &[3], Init::FanIn, false, 0).unwrap();
        let id2 = ParamBuilder::new(&mut s2, 3).add("w", &[16, 4], Init::FanIn, false, 0).unwrap();
        assert_eq!(s1.get(id1).value, s2.get(id2).value);
        assert!(s1.get(id1).value.data().iter().all(|v| v.abs() <= 0.25));
    }
}
