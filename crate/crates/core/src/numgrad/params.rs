//! Named parameter buffers with gradient storage and trainability flags.

use std::collections::BTreeMap;

/// One named tensor: values, a same-sized gradient accumulator, and a flag
/// deciding whether backward passes and optimizer steps may touch it.
#[derive(Debug, Clone)]
pub struct ParamBuffer {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

impl ParamBuffer {
    pub fn new(shape: Vec<usize>, values: Vec<f64>, trainable: bool) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, values.len(), "shape {shape:?} does not match {} values", values.len());
        let grad = vec![0.0; values.len()];
        Self { shape, values, grad, trainable }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordered collection of parameter buffers. Iteration order is the sorted
/// name order, which keeps optimizer sweeps and serialization deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamBuffer>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>, trainable: bool) {
        let prev = self.entries.insert(name.to_string(), ParamBuffer::new(shape, values, trainable));
        assert!(prev.is_none(), "duplicate parameter '{name}'");
    }

    pub fn get(&self, name: &str) -> &ParamBuffer {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamBuffer {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamBuffer)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamBuffer)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for buf in self.entries.values_mut() {
            buf.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        self.get_mut(name).trainable = trainable;
    }

    /// Marks exactly the buffers whose name starts with one of the prefixes
    /// as trainable and everything else as frozen.
    pub fn set_trainable_prefixes(&mut self, prefixes: &[&str]) {
        for (name, buf) in self.entries.iter_mut() {
            buf.trainable = prefixes.iter().any(|p| name.starts_with(p));
        }
    }

    /// Deep copy with every buffer frozen and gradients cleared.
    pub fn clone_frozen(&self) -> Self {
        let mut out = Self::new();
        for (name, buf) in self.iter() {
            out.insert(name, buf.shape.clone(), buf.values.clone(), false);
        }
        out
    }

    /// Total number of scalar values across trainable buffers.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .values()
            .filter(|b| b.trainable)
            .map(|b| b.len())
            .sum()
    }
}
