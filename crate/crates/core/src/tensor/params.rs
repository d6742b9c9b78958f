use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Learnable tensors addressed by stable dotted names (`encoder.t2t.fw.query`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    /// Uniform Glorot initialisation.
    pub fn glorot<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let v = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit));
        self.insert(name, v)
    }

    /// Small uniform values, used for embedding tables.
    pub fn uniform<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut R) -> ParamId {
        let v = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale));
        self.insert(name, v)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Array2::zeros((rows, cols)))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
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

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Name -> shape table, in insertion order.
    pub fn shapes(&self) -> Vec<(String, [usize; 2])> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), [v.nrows(), v.ncols()]))
            .collect()
    }

    pub fn to_archive(&self) -> TensorArchive {
        TensorArchive {
            tensors: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(n, v)| NamedTensor {
                    name: n.clone(),
                    shape: [v.nrows(), v.ncols()],
                    data: v.iter().copied().collect(),
                })
                .collect(),
        }
    }

    /// Overwrites every tensor of `self` from the archive. Names and shapes must match exactly.
    pub fn load_archive(&mut self, archive: &TensorArchive) -> Result<()> {
        if archive.tensors.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, archive has {}",
                self.values.len(),
                archive.tensors.len()
            )));
        }
        for t in &archive.tensors {
            let id = self
                .id(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", t.name)))?;
            let target = &mut self.values[id.0];
            if [target.nrows(), target.ncols()] != t.shape || t.data.len() != t.shape[0] * t.shape[1] {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: expected {:?}, got {:?}",
                    t.name,
                    target.dim(),
                    t.shape
                )));
            }
            *target = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    /// Row-major values.
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
pub struct TensorArchive {
    pub tensors: Vec<NamedTensor>,
}
