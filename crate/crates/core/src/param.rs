//! Named parameters, the registry that owns them, and seeded initialization.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    /// Gradient slot; same shape as `value` once populated.
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

/// Owns every parameter of a network, addressable by id or hierarchical name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            trainable: true,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Overwrites values from `other` for every name present in both.
    pub fn cast_from<U: Real>(&mut self, other: &ParamStore<U>) {
        for p in &mut self.params {
            if let Some(src) = other.by_name(&p.name) {
                p.value = src.value.cast();
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Seeded deterministic generator. Identical seed and draw sequence give
/// bit-identical values on every platform.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        Self::ALGORITHM
    }

    /// Position in the keystream; together with the seed this captures the full state.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn restore(seed: u64, word_pos: u128) -> Self {
        let mut s = Self::new(seed);
        s.rng.set_word_pos(word_pos);
        s
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        // Box–Muller; one draw per call keeps the stream position simple.
        let u1 = 1.0 - self.rng.random::<f64>();
        let u2 = self.rng.random::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.rng.random::<bool>()
    }

    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn uniform_tensor<T: Real>(&mut self, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(self.uniform(lo, hi)))
    }
}

/// Creates parameters under a hierarchical name prefix.
pub struct ParamBuilder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut RngState,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut RngState) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, value)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = self.rng.uniform_tensor(shape.to_vec(), -bound, bound);
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::ones(shape.to_vec()))
    }

    pub fn rng(&mut self) -> &mut RngState {
        self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add("a.w", Tensor::zeros(vec![2])).unwrap();
        assert!(s.add("a.w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn rng_restores_from_word_position() {
        let mut a = RngState::new(42);
        for _ in 0..17 {
            a.uniform(0.0, 1.0);
        }
        let mut b = RngState::restore(42, a.word_pos());
        for _ in 0..5 {
            assert_eq!(a.uniform(0.0, 1.0).to_bits(), b.uniform(0.0, 1.0).to_bits());
        }
    }

    #[test]
    fn builder_prefixes_names() {
        let mut s = ParamStore::<f32>::new();
        let mut rng = RngState::new(0);
        let mut b = ParamBuilder::new(&mut s, &mut rng);
        let mut enc = b.sub("enc");
        enc.sub("blk0").zeros("w", &[2]).unwrap();
        assert!(s.by_name("enc.blk0.w").is_some());
    }
}
