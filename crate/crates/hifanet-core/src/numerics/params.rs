//! Named store of trainable parameters. Insertion order is preserved so
//! every iteration (SGD updates, checkpoints, gradient checks) is
//! deterministic.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{NumericsError, Tensor};

#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<(), NumericsError> {
        if self.index.contains_key(name) {
            return Err(NumericsError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn by_index(&self, idx: usize) -> (&str, &Tensor) {
        let (name, t) = &self.entries[idx];
        (name, t)
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total element count over all parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Zero-fills every gradient buffer, creating missing ones.
    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn rejects_duplicate_names() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(vec![2, 2])).unwrap();
        assert!(matches!(
            store.insert("w", Tensor::zeros(vec![2])),
            Err(NumericsError::DuplicateParam(_))
        ));
    }

    #[test]
    fn preserves_insertion_order() {
        let mut store = ParamStore::new();
        store.insert("z", Tensor::zeros(vec![1])).unwrap();
        store.insert("a", Tensor::zeros(vec![1])).unwrap();
        let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["z", "a"]);
    }

    #[test]
    fn counts_elements() {
        let mut store = ParamStore::new();
        assert_eq!(store.param_count(), 0);
        store.insert("w", Tensor::zeros(vec![256, 256])).unwrap();
        store.insert("b", Tensor::zeros(vec![256])).unwrap();
        assert_eq!(store.param_count(), 65_792);
    }
}
