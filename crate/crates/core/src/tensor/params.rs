use std::collections::HashMap;

use rand::Rng;

use super::{Float, Gradients, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    tensor: Tensor<T>,
    /// Buffers (running statistics) are saved with the model but never optimized.
    buffer: bool,
}

/// Named parameter table shared by every layer of one training run.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, mut tensor: Tensor<T>, buffer: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        tensor.requires_grad = !buffer;
        tensor.grad = None;
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            buffer,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        self.insert(name, tensor, false)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        self.insert(name, tensor, true)
    }

    /// Registers a weight drawn uniformly from `±sqrt(1/fan_in)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::new(shape, data).expect("shape/data agree"))
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

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn is_buffer(&self, id: ParamId) -> bool {
        self.entries[id.0].buffer
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        let e = &self.entries[id.0];
        !e.buffer && e.tensor.requires_grad
    }

    /// Number of trainable scalars (buffers excluded) whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| !e.buffer && e.name.starts_with(prefix))
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Marks every non-buffer entry under `prefix` as trainable or frozen.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            if !e.buffer {
                e.tensor.requires_grad = trainable;
                if !trainable {
                    e.tensor.grad = None;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    /// Adds tape gradients into the parameter `grad` buffers.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            let t = &mut self.entries[id.0].tensor;
            if !t.requires_grad {
                continue;
            }
            match &mut t.grad {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(g.data()) {
                        *a += *v;
                    }
                }
                None => t.grad = Some(g.data().to_vec()),
            }
        }
    }

    /// Overwrites buffers with values queued by a training graph.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, t) in updates {
            self.entries[id.0].tensor.data_mut().copy_from_slice(t.data());
        }
    }

    /// Copies values of equally named, equally shaped entries from `other`.
    /// Returns the number of entries copied.
    pub fn load_matching(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            if let Some(src) = other.find(&e.name) {
                let src = other.get(src);
                if src.shape() != e.tensor.shape() {
                    return Err(Error::dim("load_matching", e.tensor.shape(), src.shape()));
                }
                e.tensor.data_mut().copy_from_slice(src.data());
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Entries whose name starts with `prefix`, in registration order.
    pub fn named(&self, prefix: &str) -> Vec<(&str, &Tensor<T>)> {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| (e.name.as_str(), &e.tensor))
            .collect()
    }

    /// Raw bytes of every entry under `prefix`, for bitwise comparisons.
    pub fn fingerprint(&self, prefix: &str) -> Vec<u64> {
        self.named(prefix)
            .into_iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.as_f64().to_bits()))
            .collect()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    buffer: e.buffer,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
