use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Named parameter arrays, kept in insertion order so serialization and
/// iteration are deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    arrays: IndexMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.arrays.get_mut(name)
    }

    /// Lookup that reports the missing name.
    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter array `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.arrays.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.arrays.values().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.values().all(Matrix::is_finite)
    }

    /// Same names with the same shapes, in any order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .all(|(k, v)| other.get(k).is_some_and(|o| o.shape() == v.shape()))
    }

    /// A store of zeros with this store's layout.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    /// `self += alpha * other` over the names present in `other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamStore) -> Result<()> {
        for (name, delta) in other.iter() {
            let target = self
                .arrays
                .get_mut(name)
                .ok_or_else(|| Error::Shape(format!("unknown parameter array `{name}`")))?;
            if target.shape() != delta.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: shape {:?} vs update {:?}",
                    target.shape(),
                    delta.shape()
                )));
            }
            target.scaled_add_assign(alpha, delta);
        }
        Ok(())
    }

    pub fn from_map(arrays: IndexMap<String, Matrix>) -> Self {
        Self { arrays }
    }

    /// All values concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for v in self.arrays.values() {
            out.extend_from_slice(v.data());
        }
        out
    }

    /// Inverse of [`ParamStore::flatten`] onto this layout.
    pub fn unflatten(&self, flat: &[f64]) -> ParamStore {
        assert_eq!(flat.len(), self.scalar_count(), "flat length mismatch");
        let mut offset = 0;
        let mut out = ParamStore::new();
        for (k, v) in &self.arrays {
            let n = v.len();
            out.insert(
                k.clone(),
                Matrix::from_vec(v.rows(), v.cols(), flat[offset..offset + n].to_vec()),
            );
            offset += n;
        }
        out
    }
}
