use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::array::Array2;
use crate::{Error, Result};

/// Named collection of learnable arrays. Ordered (BTreeMap) so iteration,
/// serialization, and updates are deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    arrays: BTreeMap<String, Array2>,
}

/// Gradients accompanying a [`ParamStore`]; same key set, shape-matched.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    arrays: BTreeMap<String, Array2>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array2> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2)> {
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

    /// Total scalar parameter count.
    pub fn num_values(&self) -> usize {
        self.arrays.values().map(|a| a.rows() * a.cols()).sum()
    }

    /// Serializes to versioned JSON with shape headers.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = StoreFile { version: STORE_VERSION, arrays: self.arrays.clone() };
        let json = serde_json::to_string(&file).expect("paramstore serialization");
        crate::taskmodel::atomic_write(path.as_ref(), json.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let file: StoreFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        if file.version != STORE_VERSION {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: format!("unsupported store version {}", file.version),
            });
        }
        Ok(ParamStore { arrays: file.arrays })
    }
}

const STORE_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct StoreFile {
    version: u8,
    arrays: BTreeMap<String, Array2>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// A gradient store zeroed to the shapes of `params`.
    pub fn zeros_like(params: &ParamStore) -> Self {
        let arrays = params
            .iter()
            .map(|(n, a)| (n.clone(), Array2::zeros(a.rows(), a.cols())))
            .collect();
        GradStore { arrays }
    }

    pub fn zero(&mut self) {
        for a in self.arrays.values_mut() {
            a.data_mut().fill(0.0);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array2> {
        self.arrays.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2)> {
        self.arrays.iter()
    }

    /// Adds `delta` into the named slot, creating it when absent.
    pub fn accumulate(&mut self, name: &str, delta: &Array2) -> Result<()> {
        match self.arrays.get_mut(name) {
            Some(a) => a.add_assign(delta),
            None => {
                self.arrays.insert(name.to_string(), delta.clone());
                Ok(())
            }
        }
    }

    /// Verifies each gradient matches its parameter's shape.
    pub fn check_shapes(&self, params: &ParamStore) -> Result<()> {
        for (name, g) in &self.arrays {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::contract(format!(
                    "gradient '{name}' shape {:?} != param shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        Ok(())
    }
}
