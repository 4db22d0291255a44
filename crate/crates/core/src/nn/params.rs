//! Named parameter store and its binding onto an autodiff tape.

use crate::autodiff::{Tape, TensorId, Var};
use ndarray::ArrayD;
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

/// Named f64 tensors, ordered by name so every traversal is deterministic.
#[derive(Clone, Default)]
pub struct Params {
    entries: BTreeMap<String, Rc<ArrayD<f64>>>,
}

impl std::fmt::Debug for Params {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut map = f.debug_map();
        for (name, value) in &self.entries {
            map.entry(name, &value.shape());
        }
        map.finish()
    }
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), Rc::new(value));
        assert!(prev.is_none(), "duplicate parameter name {name:?}");
    }

    /// Replace an existing parameter's value.
    pub fn set(&mut self, name: &str, value: ArrayD<f64>) {
        let slot = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        *slot = Rc::new(value);
    }

    pub fn get(&self, name: &str) -> &Rc<ArrayD<f64>> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Rc<ArrayD<f64>>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Absorb all entries of `other`; duplicate names are a bug.
    pub fn merge(&mut self, other: Params) {
        for (name, value) in other.entries {
            let prev = self.entries.insert(name.clone(), value);
            assert!(prev.is_none(), "duplicate parameter name {name:?}");
        }
    }

    /// Total number of scalar elements across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }
}

/// Lazy binding of a [`Params`] store onto a tape.
///
/// Each parameter becomes one tape node on first use and is reused after
/// that. `trainable = false` binds constants, so backward never descends
/// into a frozen subnetwork.
pub struct TapeParams<'a> {
    tape: &'a Tape,
    params: &'a Params,
    trainable: bool,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'a> TapeParams<'a> {
    pub fn new(tape: &'a Tape, params: &'a Params, trainable: bool) -> Self {
        Self {
            tape,
            params,
            trainable,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    /// Tape variable for the named parameter (bound on first call).
    pub fn var(&self, name: &str) -> Var {
        if let Some(v) = self.vars.borrow().get(name) {
            return *v;
        }
        let value = Rc::clone(self.params.get(name));
        let v = if self.trainable {
            self.tape.leaf_shared(value)
        } else {
            self.tape.constant_shared(value)
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Raw value of a parameter, without touching the tape.
    pub fn raw(&self, name: &str) -> Rc<ArrayD<f64>> {
        Rc::clone(self.params.get(name))
    }

    /// Names and tape ids of every parameter bound so far, in name order.
    pub fn bound(&self) -> Vec<(String, Var)> {
        self.vars
            .borrow()
            .iter()
            .map(|(n, v)| (n.clone(), *v))
            .collect()
    }
}

/// Backward pass mapped back to parameter names.
///
/// Parameters that never influenced the loss get no entry.
pub fn grads_by_name(
    tape: &Tape,
    loss: Var,
    bound: &[(String, Var)],
) -> BTreeMap<String, ArrayD<f64>> {
    let wanted: Vec<Var> = bound.iter().map(|(_, v)| *v).collect();
    let mut by_id: std::collections::HashMap<TensorId, ArrayD<f64>> = tape.backward(loss, &wanted);
    let mut out = BTreeMap::new();
    for (name, var) in bound {
        if let Some(g) = by_id.remove(&var.id) {
            out.insert(name.clone(), g);
        }
    }
    out
}
