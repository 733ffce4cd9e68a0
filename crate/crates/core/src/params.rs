//! Named, checkpointable parameter tensors.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
        ParamId(self.values.len() - 1)
    }

    /// Uniform Glorot initialisation for a `fan_in × fan_out` matrix.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let t = Tensor::new(fan_in, fan_out, data).expect("positive extents");
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    /// Marks every parameter whose name starts with `prefix`; returns how many matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, flag) in self.names.iter().zip(&mut self.trainable) {
            if name.starts_with(prefix) {
                *flag = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn all_trainable_with_prefix(&self, prefix: &str) -> bool {
        self.names
            .iter()
            .zip(&self.trainable)
            .filter(|(n, _)| n.starts_with(prefix))
            .all(|(_, &t)| t)
    }

    pub fn none_trainable_with_prefix(&self, prefix: &str) -> bool {
        self.names
            .iter()
            .zip(&self.trainable)
            .filter(|(n, _)| n.starts_with(prefix))
            .all(|(_, &t)| !t)
    }

    /// Inserts the parameter into `g` once per graph. Frozen parameters enter as
    /// constants and never receive gradients.
    pub fn bind(&self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = g.bound(id.0) {
            return v;
        }
        let value = self.values[id.0].clone();
        let v = if self.trainable[id.0] {
            g.leaf(value)
        } else {
            g.constant(value)
        };
        g.bind(id.0, v);
        v
    }

    /// Gradients gathered from a graph after backward, zero where unused.
    pub fn collect_grads(&self, g: &Graph) -> Vec<Tensor> {
        self.ids()
            .map(|id| {
                g.bound(id.0)
                    .and_then(|v| g.grad(v).cloned())
                    .unwrap_or_else(|| {
                        let t = &self.values[id.0];
                        Tensor::zeros(t.rows(), t.cols())
                    })
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::contract(
                "assign_flat",
                format!("{} values for {} parameters", flat.len(), self.scalar_count()),
            ));
        }
        let mut off = 0;
        for t in &mut self.values {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}
