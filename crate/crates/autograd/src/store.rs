use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::TensorData;

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Owns all trainable parameters of a model. Creation order is deterministic
/// for a given model config, which keeps checkpoints stable.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<TensorData>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter with an explicit initial value. Panics on
    /// duplicate names: parameter names double as checkpoint keys.
    pub fn register(&mut self, name: &str, value: TensorData) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// He-style normal init scaled by fan-in, the default for conv weights.
    pub fn register_kaiming<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / fan_in as f32).sqrt();
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| normal_sample(rng) * std);
        self.register(name, value)
    }

    pub fn register_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.register(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn value(&self, id: ParamId) -> &TensorData {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut TensorData {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Standard normal via Box-Muller; avoids pulling rand_distr in.
fn normal_sample<R: Rng>(rng: &mut R) -> f32 {
    loop {
        let u1: f32 = rng.random();
        let u2: f32 = rng.random();
        if u1 > f32::EPSILON {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos();
        }
    }
}
