use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{Scalar, Tensor};

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// Named parameter collection owned by one model component.
///
/// Each store carries a process-unique id so gradients computed on a graph
/// that mixes several stores can be attributed back to their owner.
#[derive(Debug)]
pub struct ParamStore<S> {
    uid: u64,
    params: Vec<Param<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Clone for ParamStore<S> {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count, optionally restricted to trainable parameters.
    pub fn numel(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable_prefix("", false);
    }

    /// Set the trainable flag of every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            n += 1;
        }
        n
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Copy values from `other` for every parameter with a matching name and
    /// shape. Returns the number of parameters copied.
    pub fn load_from(&mut self, other: &ParamStore<S>) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut() {
            if let Some(q) = other.params.iter().find(|q| q.name == p.name) {
                if q.value.shape() == p.value.shape() {
                    p.value = q.value.clone();
                    n += 1;
                }
            }
        }
        n
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_freezing() {
        let mut ps = ParamStore::<f32>::new();
        let a = ps.add("enc.w", Tensor::zeros(&[2]));
        let b = ps.add("dec.w", Tensor::zeros(&[3]));
        assert_eq!(ps.set_trainable_prefix("enc.", false), 1);
        assert!(!ps.is_trainable(a));
        assert!(ps.is_trainable(b));
        assert_eq!(ps.numel(true), 3);
        assert_eq!(ps.numel(false), 5);
    }

    #[test]
    fn clones_get_fresh_uids() {
        let ps = ParamStore::<f32>::new();
        assert_ne!(ps.uid(), ps.clone().uid());
    }
}
