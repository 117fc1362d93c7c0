//! Named trainable tensors, partitioned by the sub-network they belong to.
//!
//! The partition tag is what makes gradient routing checkable: a
//! single-channel utterance can only ever produce gradients for `ScFe` and
//! `Backend` tensors, a multi-channel one for `McFe` and `Backend`. The
//! trainer asserts this per step.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    ScFe,
    McFe,
    Backend,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::ScFe, Partition::McFe, Partition::Backend];

    pub fn tag(self) -> &'static str {
        match self {
            Partition::ScFe => "sc_fe",
            Partition::McFe => "mc_fe",
            Partition::Backend => "backend",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Partition> {
        match tag {
            "sc_fe" => Some(Partition::ScFe),
            "mc_fe" => Some(Partition::McFe),
            "backend" => Some(Partition::Backend),
            _ => None,
        }
    }
}

/// How a tensor is filled when a model is initialized.
#[derive(Clone, Debug, PartialEq)]
pub enum InitKind {
    /// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
    UniformFanIn(usize),
    Zeros,
    /// Zeros with the forget-gate block (second of four) set to +1.
    LstmBias { hidden: usize },
    /// Super-directive beamformer values; filled by the model assembler,
    /// which knows the array geometry.
    Superdirective,
}

/// Declaration of one tensor: the model's tensor catalog is a list of these,
/// and initialization, counting, and checkpointing all walk the same list.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub partition: Partition,
    pub init: InitKind,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Build a store from a tensor catalog with a deterministic seeded
/// initialization: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for weights,
/// zeros for plain biases, +1 on the forget-gate block of LSTM biases.
/// Superdirective entries are zero-filled here; the model assembler
/// overwrites them with geometry-derived values.
pub fn init_store_from_specs(specs: &[TensorSpec], seed: u64) -> ParameterStore {
    let mut rng = crate::rng::rng_from_seed(seed);
    let mut store = ParameterStore::new();
    for spec in specs {
        let mut tensor = ParamTensor::zeros(spec.shape.clone(), spec.partition);
        match spec.init {
            InitKind::UniformFanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in tensor.data.iter_mut() {
                    *v = crate::rng::uniform(&mut rng, -bound, bound);
                }
            }
            InitKind::Zeros | InitKind::Superdirective => {}
            InitKind::LstmBias { hidden } => {
                for v in tensor.data[hidden..2 * hidden].iter_mut() {
                    *v = 1.0;
                }
            }
        }
        store
            .insert(spec.name.clone(), tensor)
            .expect("catalog has duplicate tensor names");
    }
    store
}

/// One trainable tensor: row-major values plus a shape and a partition tag.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub partition: Partition,
}

impl ParamTensor {
    pub fn zeros(shape: Vec<usize>, partition: Partition) -> Self {
        let len = shape.iter().product();
        ParamTensor {
            shape,
            data: vec![0.0; len],
            partition,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// View a 2-D tensor as a matrix. Panics if the shape is not 2-D; callers
    /// fetch tensors they created themselves, so a mismatch is a bug.
    pub fn as_mat(&self) -> ArrayView2<'_, f64> {
        assert_eq!(self.shape.len(), 2, "tensor is not 2-D: {:?}", self.shape);
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data)
            .expect("shape/data mismatch")
    }
}

/// All trainable tensors of a model, keyed by name. BTreeMap keeps iteration
/// order deterministic for serialization and optimizer updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, ParamTensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ParamTensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate tensor name {name}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamTensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown tensor {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn partitions_present(&self) -> Vec<Partition> {
        let mut present: Vec<Partition> = Vec::new();
        for p in Partition::ALL {
            if self.tensors.values().any(|t| t.partition == p) {
                present.push(p);
            }
        }
        present
    }

    /// Total scalar parameter count per partition.
    pub fn count_by_partition(&self) -> BTreeMap<Partition, usize> {
        let mut counts = BTreeMap::new();
        for t in self.tensors.values() {
            *counts.entry(t.partition).or_insert(0) += t.len();
        }
        counts
    }

    pub fn total_len(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

/// Accumulated gradients, keyed by tensor name. Only tensors touched by the
/// current batch appear here; the optimizer steps exactly this key set.
#[derive(Clone, Debug, Default)]
pub struct GradStore {
    grads: BTreeMap<String, Vec<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Elementwise add into the named gradient, creating it if absent.
    pub fn accumulate(&mut self, name: &str, values: &[f64]) {
        match self.grads.get_mut(name) {
            Some(g) => {
                assert_eq!(g.len(), values.len(), "gradient length mismatch for {name}");
                for (a, b) in g.iter_mut().zip(values) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(name.to_string(), values.to_vec());
            }
        }
    }

    /// Fold another gradient store into this one (fixed key order).
    pub fn merge(&mut self, other: &GradStore) {
        for (name, g) in other.grads.iter() {
            self.accumulate(name, g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.grads.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.grads.keys()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// L2 norm over all gradients belonging to one partition of `store`.
    pub fn partition_norm(&self, store: &ParameterStore, partition: Partition) -> f64 {
        let mut acc = 0.0;
        for (name, g) in self.grads.iter() {
            if let Ok(t) = store.get(name) {
                if t.partition == partition {
                    acc += g.iter().map(|v| v * v).sum::<f64>();
                }
            }
        }
        acc.sqrt()
    }

    /// Partitions that received any gradient.
    pub fn partitions_touched(&self, store: &ParameterStore) -> Vec<Partition> {
        let mut present = Vec::new();
        for p in Partition::ALL {
            let touched = self.grads.keys().any(|name| {
                store
                    .get(name)
                    .map(|t| t.partition == p)
                    .unwrap_or(false)
            });
            if touched {
                present.push(p);
            }
        }
        present
    }
}
