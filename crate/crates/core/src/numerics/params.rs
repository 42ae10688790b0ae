use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::lltf;
use super::tensor::{DType, Tensor};
use crate::error::{Error, Result};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// `manifest.json` of a checkpoint directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub checksum: String,
    pub tensors: BTreeMap<String, ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Like [`ParamStore::get`] but reports a missing name as a config error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Hex SHA-256 over names, shapes and 64-bit little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update([0]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes one 64-bit LLTF file per tensor plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = BTreeMap::new();
        for (name, t) in &self.tensors {
            let file = format!("{name}.lltf");
            lltf::write(dir.join(&file), &t.to_dtype(DType::F64))?;
            entries.insert(
                name.clone(),
                ManifestEntry {
                    file,
                    shape: t.shape().to_vec(),
                },
            );
        }
        let manifest = CheckpointManifest {
            checksum: self.checksum(),
            tensors: entries,
            meta,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, crate::json::to_pretty_sorted(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, CheckpointManifest)> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let mut store = ParamStore::new();
        for (name, entry) in &manifest.tensors {
            let t = lltf::read(dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Format {
                    path: dir.join(&entry.file),
                    msg: format!("shape {:?} disagrees with manifest {:?}", t.shape(), entry.shape),
                });
            }
            store.insert(name.clone(), t);
        }
        if store.checksum() != manifest.checksum {
            return Err(Error::Format {
                path,
                msg: "checksum mismatch".into(),
            });
        }
        Ok((store, manifest))
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamStore {
            tensors: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::new();
        p.insert("a.weight", Tensor::from_fn([2, 3], |i| i as f64 * 0.1));
        p.insert("b", Tensor::scalar(-1.5));
        p.save(dir.path(), serde_json::json!({"stage": 1})).unwrap();
        let (back, manifest) = ParamStore::load(dir.path()).unwrap();
        assert_eq!(back.checksum(), p.checksum());
        assert_eq!(manifest.meta["stage"], 1);

        lltf::write(dir.path().join("b.lltf"), &Tensor::scalar(2.0)).unwrap();
        assert!(ParamStore::load(dir.path()).is_err());
    }
}
