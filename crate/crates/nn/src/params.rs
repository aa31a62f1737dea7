use std::collections::HashMap;

use rand::Rng;

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Named parameter tensors plus non-trainable buffers (batch-norm running
/// statistics). Insertion order is stable and defines checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        if let Some(&id) = self.index.get(name) {
            self.entries[id.0] = Entry {
                name: name.to_string(),
                value,
                trainable,
            };
            return id;
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let id = self.id(name)?;
        Ok(self.get_mut(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, bool)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.value, e.trainable))
    }

    /// Total number of trainable scalars.
    pub fn n_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Glorot-uniform `[fan_in, fan_out]` weight and zero bias.
    pub fn init_dense<R: Rng>(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let w = glorot(&[fan_in, fan_out], fan_in, fan_out, rng);
        self.add(&format!("{prefix}.w"), w);
        self.add(&format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    /// Weight without bias, shape `[fan_in, fan_out]`.
    pub fn init_projection<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let w = glorot(&[fan_in, fan_out], fan_in, fan_out, rng);
        self.add(name, w);
    }

    pub fn init_conv1d<R: Rng>(
        &mut self,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) {
        let w = glorot(&[c_out, c_in, kernel], c_in * kernel, c_out * kernel, rng);
        self.add(&format!("{prefix}.w"), w);
        self.add(&format!("{prefix}.b"), Tensor::zeros(&[c_out]));
    }

    pub fn init_batch_norm(&mut self, prefix: &str, features: usize) {
        self.add(&format!("{prefix}.gamma"), Tensor::full(&[features], T::one()));
        self.add(&format!("{prefix}.beta"), Tensor::zeros(&[features]));
        self.add_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[features]));
        self.add_buffer(&format!("{prefix}.running_var"), Tensor::full(&[features], T::one()));
    }

    pub fn init_layer_norm(&mut self, prefix: &str, features: usize) {
        self.add(&format!("{prefix}.gamma"), Tensor::full(&[features], T::one()));
        self.add(&format!("{prefix}.beta"), Tensor::zeros(&[features]));
    }
}

fn glorot<T: Real, R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("glorot shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds_and_determinism() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        a.init_dense("fc", 10, 6, &mut ChaCha8Rng::seed_from_u64(3));
        b.init_dense("fc", 10, 6, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        let limit = (6.0f32 / 16.0).sqrt();
        assert!(a.by_name("fc.w").unwrap().data().iter().all(|v| v.abs() <= limit));
        assert!(a.by_name("fc.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn buffers_are_not_trainable() {
        let mut s = ParamStore::<f64>::new();
        s.init_batch_norm("bn", 3);
        let names: Vec<_> = s
            .trainable_ids()
            .map(|id| s.name(id).to_string())
            .collect();
        assert_eq!(names, ["bn.gamma", "bn.beta"]);
        assert_eq!(s.len(), 4);
        assert!(s.id("bn.nope").is_err());
    }
}
