//! Named parameter storage, seeded initialisation and JSON checkpoints.

use crate::engine::array::Array2;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Ordered collection of named learnable arrays.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore<T> {
    entries: Vec<(String, Array2<T>)>,
}

/// One serialised parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointEntry<T> {
    name: String,
    shape: [usize; 2],
    values: Vec<T>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    /// Adds a parameter and returns its slot. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) -> usize {
        let name = name.into();
        debug_assert!(self.position(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
        self.entries.len() - 1
    }

    /// Glorot-uniform initialised `fan_in x fan_out` matrix.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        self.insert(name, glorot(fan_in, fan_out, rng))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, slot: usize) -> &Array2<T> {
        &self.entries[slot].1
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Array2<T> {
        &mut self.entries[slot].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<T>> {
        self.position(name).map(|p| self.get(p))
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.entries[slot].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Writes a JSON list of `(name, shape, row-major values)`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let list: Vec<CheckpointEntry<T>> = self
            .entries
            .iter()
            .map(|(name, a)| CheckpointEntry {
                name: name.clone(),
                shape: [a.rows(), a.cols()],
                values: a.data().to_vec(),
            })
            .collect();
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &list)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let list: Vec<CheckpointEntry<T>> = serde_json::from_reader(file)?;
        let mut store = ParamStore::new();
        for e in list {
            let a = Array2::from_vec(e.shape[0], e.shape[1], e.values)?;
            store.insert(e.name, a);
        }
        Ok(store)
    }

    /// Copies values from `other`, which must carry the same names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for ((n, a), (m, b)) in self.entries.iter_mut().zip(&other.entries) {
            if n != m || a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "checkpoint entry {m} {:?} does not match {n} {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
            *a = b.clone();
        }
        Ok(())
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    Array2::from_vec(fan_in, fan_out, data).expect("shape matches length")
}
