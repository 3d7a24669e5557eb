//! Named parameter storage and initialization.

use std::collections::BTreeMap;
use std::sync::Arc;

use autograd::Tensor;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Learning-rate group a trainable parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Backbone, bottleneck and backbone heads.
    Base,
    /// Calibration transformers and aggregation heads; trained at a scaled rate.
    Tfc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Trainable(ParamGroup),
    /// Non-trainable state such as running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Arc<Tensor>,
    pub kind: ParamKind,
}

/// All model state keyed by dotted module path, in sorted key order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) {
        let name = name.into();
        let prev = self.entries.insert(
            name.clone(),
            ParamEntry {
                value: Arc::new(value),
                kind,
            },
        );
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    /// Shared handle to a value; panics on unknown names since layer code
    /// only asks for names it registered itself.
    pub fn value(&self, name: &str) -> Arc<Tensor> {
        match self.entries.get(name) {
            Some(e) => Arc::clone(&e.value),
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(
            entry.value.shape(),
            value.shape(),
            "shape change for parameter {name}"
        );
        entry.value = Arc::new(value);
    }

    /// Mutable access for in-place updates.
    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        Arc::make_mut(&mut entry.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scalar count of trainable values, optionally restricted to a name prefix.
    pub fn trainable_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, e)| k.starts_with(prefix) && matches!(e.kind, ParamKind::Trainable(_)))
            .map(|(_, e)| e.value.len())
            .sum()
    }
}

/// Weight initializers.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Normal(f64),
    /// Normal resampled until within two standard deviations.
    TruncNormal(f64),
    /// He-normal over the output fan: `std = sqrt(2 / fan_out)`.
    KaimingFanOut(usize),
}

impl Init {
    pub fn tensor(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let dim = IxDyn(shape);
        match self {
            Init::Zeros => ArrayD::zeros(dim),
            Init::Ones => ArrayD::ones(dim),
            Init::Constant(c) => ArrayD::from_elem(dim, c),
            Init::Normal(std) => {
                let n = Normal::new(0.0, std).expect("valid std");
                ArrayD::from_shape_simple_fn(dim, || n.sample(rng))
            }
            Init::TruncNormal(std) => ArrayD::from_shape_simple_fn(dim, || loop {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            }),
            Init::KaimingFanOut(fan_out) => {
                let std = (2.0 / fan_out as f64).sqrt();
                let n = Normal::new(0.0, std).expect("valid std");
                ArrayD::from_shape_simple_fn(dim, || n.sample(rng))
            }
        }
    }
}

/// Registers parameters under a common name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    group: ParamGroup,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, group: ParamGroup) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            group,
        }
    }

    /// Builder for a child module `prefix.name`.
    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = self.path(name);
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
            group: self.group,
        }
    }

    /// Child builder whose parameters land in `group`.
    pub fn sub_group(&mut self, name: &str, group: ParamGroup) -> ParamBuilder<'_> {
        let prefix = self.path(name);
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
            group,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> String {
        let full = self.path(name);
        let value = init.tensor(shape, self.rng);
        self.store
            .insert(full.clone(), value, ParamKind::Trainable(self.group));
        full
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> String {
        let full = self.path(name);
        self.store.insert(full.clone(), value, ParamKind::Buffer);
        full
    }
}
