use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A tensor value with gradient storage and a trainable flag.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape(), value.dtype());
        Self {
            value,
            grad,
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape(), self.value.dtype());
    }
}

/// Named parameters addressed by dot-path (`layers.3.attn.q`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Option<Parameter>>,
    names: Vec<String>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("parameter `{name}` already exists")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Some(Parameter::new(value, trainable)));
        self.names.push(name.clone());
        self.index.insert(name, id);
        Ok(id)
    }

    /// Removes a parameter; its id becomes dangling.
    pub fn remove(&mut self, id: ParamId) -> Option<Parameter> {
        let p = self.params.get_mut(id.0)?.take();
        if p.is_some() {
            self.index.remove(&self.names[id.0]);
        }
        p
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        self.params[id.0].as_ref().expect("parameter was removed")
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        self.params[id.0].as_mut().expect("parameter was removed")
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.get(id).value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    /// Live parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Parameter)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (ParamId(i), self.names[i].as_str(), p)))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.iter().map(|(id, _, _)| id).collect()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, _, p)| p.trainable).map(|(id, _, _)| id).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.iter().map(|(_, _, p)| p.value.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.iter().filter(|(_, _, p)| p.trainable).map(|(_, _, p)| p.value.len()).sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.params.iter_mut().flatten() {
            p.trainable = trainable;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut().flatten() {
            p.zero_grad();
        }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    #[test]
    fn insert_lookup_remove() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::ones(&[2], DType::F32), true).unwrap();
        let b = store.insert("b", Tensor::ones(&[3], DType::F32), false).unwrap();
        assert!(store.insert("a", Tensor::ones(&[1], DType::F32), true).is_err());
        assert_eq!(store.id("b"), Some(b));
        assert_eq!(store.num_scalars(), 5);
        assert_eq!(store.num_trainable_scalars(), 2);
        assert_eq!(store.get(a).grad.shape(), &[2]);
        store.remove(a);
        assert_eq!(store.id("a"), None);
        assert_eq!(store.len(), 1);
        assert_eq!(store.ids(), vec![b]);
    }
}
