//! Checkpoint archives: one raw little-endian `f64` blob per parameter plus a JSON
//! manifest (`manifest.json`) describing names, shapes and byte ranges.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::substrate::param::ParamStore;
use crate::substrate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "mantis-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Model description stored alongside the weights.
    pub model: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(dir: &Path, store: &ParamStore, model: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(store.len());
    for (id, p) in store.iter() {
        let file = format!("param_{:04}.f64", id.index());
        let bytes: Vec<u8> = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ParamEntry {
            name: p.name.clone(),
            file,
            shape: p.value.shape().to_vec(),
            dtype: "float64".into(),
            offset: 0,
            length: bytes.len() as u64,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        model: model.clone(),
        params: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    ensure!(
        manifest.format == FORMAT,
        Error::Data(format!("{} is not a {FORMAT} manifest", path.display()))
    );
    Ok(manifest)
}

/// Reads every parameter blob listed in the manifest.
pub fn load_tensors(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let manifest = read_manifest(dir)?;
    let mut out = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        ensure!(
            e.dtype == "float64",
            Error::Data(format!("{}: unsupported dtype {}", e.name, e.dtype))
        );
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let (start, len) = (e.offset as usize, e.length as usize);
        let numel: usize = e.shape.iter().product();
        ensure!(
            start + len <= bytes.len() && len == numel * 8,
            Error::Data(format!("{}: byte range does not match shape {:?}", e.name, e.shape))
        );
        let data = bytes[start..start + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((manifest, out))
}

/// Overwrites the values in `store` from an archive, matching by name and shape.
pub fn restore_into(store: &mut ParamStore, dir: &Path) -> Result<Manifest> {
    let (manifest, tensors) = load_tensors(dir)?;
    ensure!(
        tensors.len() == store.len(),
        Error::Data(format!(
            "checkpoint has {} parameters, model has {}",
            tensors.len(),
            store.len()
        ))
    );
    for (name, t) in tensors {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {name} in checkpoint")))?;
        let p = store.get_mut(id);
        ensure!(
            p.value.shape() == t.shape(),
            Error::Data(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                p.value.shape()
            ))
        );
        p.value = t;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::param::Parameter;

    #[test]
    fn manifest_describes_blobs() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add(Parameter::new("a.weight", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5)));
        store.add(Parameter::new("a.gamma", Tensor::scalar(-1.25)));
        let model = serde_json::json!({"depth": 4});
        save_checkpoint(dir.path(), &store, &model).unwrap();

        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.model, model);
        assert_eq!(m.params[0].length, 48);
        assert_eq!(m.params[0].shape, vec![2, 3]);
        let raw = fs::read(dir.path().join(&m.params[1].file)).unwrap();
        assert_eq!(raw, (-1.25f64).to_le_bytes());

        let mut other = store.clone();
        other.iter_mut().for_each(|p| p.value.data_mut().fill(0.0));
        restore_into(&mut other, dir.path()).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(other.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn shape_mismatch_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add(Parameter::new("w", Tensor::zeros(&[2])));
        save_checkpoint(dir.path(), &store, &serde_json::Value::Null).unwrap();
        let mut other = ParamStore::new();
        other.add(Parameter::new("w", Tensor::zeros(&[3])));
        assert!(matches!(restore_into(&mut other, dir.path()), Err(Error::Data(_))));
    }
}
