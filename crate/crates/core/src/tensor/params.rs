use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// How a freshly declared parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum ParamInit {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    Normal { std: f64 },
}

impl ParamInit {
    pub fn sample<R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match *self {
            ParamInit::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            ParamInit::Zeros => vec![0.0; n],
            ParamInit::Ones => vec![1.0; n],
            ParamInit::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        Tensor::new(shape.to_vec(), data).expect("positive extents")
    }
}

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Adds all tensors of `other`, replacing same-named entries.
    pub fn extend(&mut self, other: ParameterSet) {
        self.tensors.extend(other.tensors);
    }

    /// Entries whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParameterSet {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    /// Draws a parameter with `init` and stores it under `name`.
    pub fn declare<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: ParamInit,
        rng: &mut R,
    ) {
        let t = init.sample(shape, rng);
        self.insert(name, t);
    }
}

impl FromIterator<(String, Tensor)> for ParameterSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

impl IntoIterator for ParameterSet {
    type Item = (String, Tensor);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor>;
    fn into_iter(self) -> Self::IntoIter {
        self.tensors.into_iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iteration_is_lexicographic() {
        let mut p = ParameterSet::new();
        p.insert("b.w", Tensor::scalar(1.0));
        p.insert("a.z", Tensor::scalar(1.0));
        p.insert("a.b", Tensor::scalar(1.0));
        let names: Vec<_> = p.names().cloned().collect();
        assert_eq!(names, ["a.b", "a.z", "b.w"]);
    }

    #[test]
    fn xavier_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = ParamInit::Xavier {
            fan_in: 10,
            fan_out: 2,
        }
        .sample(&[2, 10], &mut rng);
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < bound));
    }
}
