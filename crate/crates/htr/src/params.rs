//! Named parameter storage shared by the model modules.
//!
//! Parameters persist across steps as plain buffers; each forward pass
//! binds them onto a fresh tape as leaf tensors. Non-trainable entries
//! (batchnorm running statistics) live in the same namespace so
//! checkpoints capture the full model state.

use std::cell::RefCell;
use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{HtrError, Result};
use crate::tensor::{Element, Tape, Tensor};

#[derive(Clone, Debug)]
pub struct Param<E> {
    pub data: Vec<E>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<E> {
    entries: IndexMap<String, Param<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, data: Vec<E>, shape: Vec<usize>, trainable: bool) {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "param {name}: data does not match shape {shape:?}"
        );
        let prev = self.entries.insert(name.to_string(), Param { data, shape, trainable });
        assert!(prev.is_none(), "param {name} registered twice");
    }

    pub fn get(&self, name: &str) -> &Param<E> {
        self.entries.get(name).unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<E> {
        self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<E>)> {
        self.entries.iter()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    /// Overwrite an entry's values from a checkpoint payload.
    pub fn load_values(&mut self, name: &str, data: Vec<E>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| HtrError::Contract(format!("checkpoint names unknown param {name}")))?;
        if data.len() != p.data.len() {
            return Err(HtrError::Contract(format!(
                "checkpoint param {name} has {} values, expected {}",
                data.len(),
                p.data.len()
            )));
        }
        p.data = data;
        Ok(())
    }

    /// Bind every entry as a leaf on `tape`. Gradients are requested for
    /// trainable entries when `train` is set.
    pub fn bind<'t>(&self, tape: &'t Tape<E>, train: bool) -> Binding<'t, E> {
        let mut map = HashMap::new();
        for (name, p) in &self.entries {
            let t = tape
                .tensor(p.data.clone(), &p.shape, train && p.trainable)
                .expect("stored param is shape-consistent");
            map.insert(name.clone(), t);
        }
        Binding { map, pending: RefCell::new(Vec::new()) }
    }

    /// Apply batchnorm running-stat updates gathered during a train step.
    pub fn apply_pending(&mut self, pending: Vec<(String, Vec<E>)>) {
        for (name, data) in pending {
            let p = self.get_mut(&name);
            debug_assert_eq!(p.data.len(), data.len());
            p.data = data;
        }
    }
}

/// Per-step view of the store: leaf tensors on one tape plus deferred
/// running-stat writes.
pub struct Binding<'t, E: Element> {
    map: HashMap<String, Tensor<'t, E>>,
    pending: RefCell<Vec<(String, Vec<E>)>>,
}

impl<'t, E: Element> Binding<'t, E> {
    pub fn get(&self, name: &str) -> Tensor<'t, E> {
        *self.map.get(name).unwrap_or_else(|| panic!("unbound param {name}"))
    }

    pub fn push_stat(&self, name: &str, data: Vec<E>) {
        self.pending.borrow_mut().push((name.to_string(), data));
    }

    pub fn take_pending(&self) -> Vec<(String, Vec<E>)> {
        self.pending.borrow_mut().drain(..).collect()
    }

    /// Gradient of a bound parameter after backward.
    pub fn grad(&self, name: &str) -> Option<Vec<E>> {
        self.get(name).grad()
    }
}

// ---- initializers ----

pub fn kaiming_uniform<E: Element>(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<E> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| E::from_f64(rng.gen_range(-bound..bound))).collect()
}

pub fn xavier_uniform<E: Element>(
    rng: &mut impl Rng,
    n: usize,
    fan_in: usize,
    fan_out: usize,
) -> Vec<E> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| E::from_f64(rng.gen_range(-bound..bound))).collect()
}

pub fn normal_init<E: Element>(rng: &mut impl Rng, n: usize, std: f64) -> Vec<E> {
    // Box-Muller
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            E::from_f64((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std)
        })
        .collect()
}
