//! Named parameter storage shared by the networks, optimizer and checkpoints.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Shape, TensorData};

/// Hierarchical name -> tensor map. BTreeMap keeps iteration order stable,
/// which makes optimizer sweeps and checkpoint bytes deterministic.
#[derive(Clone)]
pub struct ParamStore<T: Scalar> {
    entries: BTreeMap<String, TensorData<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: TensorData<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&TensorData<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut TensorData<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorData<T>)> {
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

    /// Total trainable scalars under a name prefix ("" counts everything).
    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Lease parameters into a tape. Names matching `trainable` become
    /// gradient-tracked params; the rest enter as plain leaves.
    pub fn bind(
        &self,
        tape: &mut Tape<T>,
        mut trainable: impl FnMut(&str) -> bool,
    ) -> BTreeMap<String, Var> {
        self.entries
            .iter()
            .map(|(name, value)| {
                let var = if trainable(name) {
                    tape.param(value.clone())
                } else {
                    tape.leaf(value.clone())
                };
                (name.clone(), var)
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Standard-normal draw via Box-Muller; RNG consumption is deterministic.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Kaiming-style conv weight: std = sqrt(2 / fan_in).
pub fn init_conv_weight<T: Scalar>(
    shape: impl Into<Shape>,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> TensorData<T> {
    let shape = shape.into();
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..shape.numel())
        .map(|_| T::from_f64(normal(rng) * std))
        .collect();
    TensorData::from_vec(shape, data).expect("sized by shape")
}
