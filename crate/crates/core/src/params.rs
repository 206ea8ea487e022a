//! Named parameter storage and binding of parameters onto a tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Named tensors in deterministic (sorted) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Trainable weights of a model.
pub type ModelParams = ParamStore<f32>;

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Subset whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every tensor of `other` in, replacing same-named entries.
    pub fn extend_from(&mut self, other: &Self) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

impl<T: Real> FromIterator<(String, Tensor<T>)> for ParamStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// How the decoder's hard cluster assignment is produced.
#[derive(Debug, Clone, Default)]
pub enum AssignmentMode<T: Real> {
    /// Argmax of the current logits.
    #[default]
    Compute,
    /// Argmax of the current logits, keeping a copy of each one-hot map.
    Record(Vec<Tensor<T>>),
    /// Reuse previously recorded one-hot maps in order.
    Replay(Vec<Tensor<T>>),
}

/// One forward/backward pass: a tape plus the parameters bound onto it.
pub struct Session<'p, T: Real> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: BTreeMap<String, Var>,
    trainable: Box<dyn Fn(&str) -> bool + 'p>,
    pub assignments: AssignmentMode<T>,
    replay_cursor: usize,
}

impl<'p, T: Real> Session<'p, T> {
    /// Every parameter receives gradients.
    pub fn training(params: &'p ParamStore<T>) -> Self {
        Self::with_filter(params, |_| true)
    }

    /// No parameter receives gradients.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::with_filter(params, |_| false)
    }

    /// Only parameters for which `trainable(name)` holds receive gradients.
    pub fn with_filter(params: &'p ParamStore<T>, trainable: impl Fn(&str) -> bool + 'p) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            trainable: Box::new(trainable),
            assignments: AssignmentMode::Compute,
            replay_cursor: 0,
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    /// Binds (once) and returns the tape handle of parameter `name`.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?
            .clone();
        let v = if (self.trainable)(name) {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Hard one-hot assignment along `axis`, honouring [`AssignmentMode`].
    pub fn hard_assignment(&mut self, logits: Var, axis: usize) -> Result<Var> {
        match &mut self.assignments {
            AssignmentMode::Compute => self.tape.argmax_onehot(logits, axis),
            AssignmentMode::Record(store) => {
                let a = self.tape.argmax_onehot(logits, axis)?;
                store.push(self.tape.value(a).clone());
                Ok(a)
            }
            AssignmentMode::Replay(store) => {
                let t = store.get(self.replay_cursor).cloned().ok_or_else(|| {
                    Error::Contract("assignment replay exhausted".to_string())
                })?;
                if t.shape() != self.tape.shape(logits) {
                    return Err(Error::Contract("replayed assignment has wrong shape".into()));
                }
                self.replay_cursor += 1;
                Ok(self.tape.constant(t))
            }
        }
    }

    /// Runs backward from `loss` and returns gradients by parameter name.
    /// Trainable parameters that did not influence the loss get zeros.
    pub fn gradients(&mut self, loss: Var) -> Result<ParamStore<T>> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = ParamStore::new();
        for (name, &v) in &self.bound {
            if !(self.trainable)(name) {
                continue;
            }
            let g = grads.take(v).unwrap_or_else(|| {
                Tensor::zeros(self.params.get(name).expect("bound param").shape().to_vec())
            });
            out.insert(name.clone(), g);
        }
        self.bound.clear();
        Ok(out)
    }
}
