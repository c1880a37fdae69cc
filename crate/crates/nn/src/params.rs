use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use crate::autograd::{Grads, Var};
use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Named parameters with matching gradient slots. Names are dotted paths
/// (`encoder.conv1.weight`) and double as the checkpoint keys.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        self.grads.insert(name.clone(), Tensor::zeros(value.shape().to_vec()));
        self.params.insert(name, value);
        Ok(())
    }

    /// Overwrite an existing parameter; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(NnError::Shape {
                op: "ParamStore::set",
                detail: format!("`{}`: {:?} vs {:?}", name, slot.shape(), value.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Number of scalar parameters under a name prefix.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let slot = self
                .grads
                .get_mut(name)
                .ok_or_else(|| NnError::MissingParam(name.clone()))?;
            slot.add_assign(g);
        }
        Ok(())
    }

    /// Iterate `(name, value, grad)` mutably, e.g. for an optimizer step.
    pub fn params_and_grads_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &Tensor)> {
        self.params
            .iter_mut()
            .zip(self.grads.values())
            .map(|((k, v), g)| (k.as_str(), v, g))
    }
}

/// Binds store entries to graph leaves for one forward pass. Each name maps
/// to a single leaf, so a parameter reused across steps accumulates its
/// gradient in one place.
pub struct Params<'a> {
    store: &'a ParamStore,
    bound: RefCell<HashMap<String, Var>>,
    track: bool,
}

impl<'a> Params<'a> {
    /// `track = false` gives constants: no graph is recorded for parameters.
    pub fn new(store: &'a ParamStore, track: bool) -> Self {
        Self {
            store,
            bound: RefCell::new(HashMap::new()),
            track,
        }
    }

    pub fn tracking(&self) -> bool {
        self.track
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(v.clone());
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?
            .clone();
        let v = if self.track { Var::leaf(t) } else { Var::constant(t) };
        self.bound.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Gradients of every parameter touched in this pass.
    pub fn collect_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(v)))
            .collect()
    }
}
