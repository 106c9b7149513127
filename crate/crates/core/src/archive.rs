//! Named-tensor archives (safetensors container).
//!
//! Weights are written as little-endian `F64` 2-D tensors. On read, `F32`
//! tensors are widened and 1-D tensors become single rows, so archives
//! exported from other frameworks load without conversion.
//!
//! Parameter names follow the layer hierarchy, e.g.
//! `backbone.block0.attn.query.weight` (`in × out`), `decoder.tok_emb`,
//! `kq.queries`. Call [`ParamStore::iter`] on a built model for the full list.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::{Dtype, SafeTensors};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub type TensorMap = BTreeMap<String, Matrix>;

pub fn write_archive(path: &Path, tensors: &TensorMap) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(name, m)| {
            let raw = m.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), raw, vec![m.rows(), m.cols()])
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, raw, shape)| {
            safetensors::tensor::TensorView::new(Dtype::F64, shape.clone(), raw)
                .map(|v| (name.as_str(), v))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::CorruptArchive(e.to_string()))?;
    let serialized = safetensors::serialize(views, None::<HashMap<String, String>>)
        .map_err(|e| Error::CorruptArchive(e.to_string()))?;
    std::fs::write(path, serialized)?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<TensorMap> {
    if !path.exists() {
        return Err(Error::ArchiveMissing(path.to_path_buf()));
    }
    let buffer = std::fs::read(path)?;
    let archive = SafeTensors::deserialize(&buffer)
        .map_err(|e| Error::CorruptArchive(format!("{}: {e}", path.display())))?;
    let mut out = TensorMap::new();
    for name in archive.names() {
        let view = archive
            .tensor(name)
            .map_err(|e| Error::CorruptArchive(format!("{name}: {e}")))?;
        let values: Vec<f64> = match view.dtype() {
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
                .collect(),
            other => {
                return Err(Error::CorruptArchive(format!(
                    "{name}: unsupported dtype {other:?}"
                )))
            }
        };
        let (rows, cols) = match *view.shape() {
            [n] => (1, n),
            [r, c] => (r, c),
            ref s => {
                return Err(Error::CorruptArchive(format!("{name}: rank-{} tensor", s.len())))
            }
        };
        out.insert(name.to_string(), Matrix::from_vec(rows, cols, values));
    }
    Ok(out)
}

pub fn store_tensors(store: &ParamStore) -> TensorMap {
    store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect()
}

/// Overwrites every parameter of `store` from `tensors`. All names must be
/// present and all shapes must agree, otherwise nothing is modified.
pub fn load_exact(store: &mut ParamStore, tensors: &TensorMap) -> Result<()> {
    let mut incompatible = Vec::new();
    for (_, p) in store.iter() {
        match tensors.get(&p.name) {
            None => return Err(Error::CorruptArchive(format!("missing tensor {}", p.name))),
            Some(t) if t.shape() != p.value.shape() => incompatible.push(format!(
                "{} (expected {}x{}, found {}x{})",
                p.name,
                p.value.rows(),
                p.value.cols(),
                t.rows(),
                t.cols()
            )),
            Some(_) => {}
        }
    }
    if !incompatible.is_empty() {
        return Err(Error::ShapeIncompatible(incompatible));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        *store.get_mut(id) = tensors[&name].clone();
    }
    Ok(())
}

/// Outcome of a best-effort partial load.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub randomized: Vec<String>,
    /// Subset of `randomized` whose archive tensor had the wrong shape.
    pub shape_incompatible: Vec<String>,
}

/// Copies every tensor whose name matches a parameter under `prefix` with
/// the same shape; all other parameters under `prefix` keep their current
/// (random) values and are reported as randomized.
pub fn load_matching(store: &mut ParamStore, prefix: &str, tensors: &TensorMap) -> LoadReport {
    let mut report = LoadReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if !name.starts_with(prefix) {
            continue;
        }
        match tensors.get(&name) {
            Some(t) if t.shape() == store.get(id).shape() => {
                *store.get_mut(id) = t.clone();
                report.loaded.push(name);
            }
            Some(_) => {
                report.shape_incompatible.push(name.clone());
                report.randomized.push(name);
            }
            None => report.randomized.push(name),
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let mut map = TensorMap::new();
        map.insert("a".into(), Matrix::from_vec(2, 2, vec![1.0, -0.1, 1e-300, 3.5]));
        map.insert("b.bias".into(), Matrix::zeros(1, 3));
        write_archive(&path, &map).unwrap();
        assert_eq!(read_archive(&path).unwrap(), map);
    }

    #[test]
    fn missing_file_is_reported() {
        let err = read_archive(Path::new("/nonexistent/w.safetensors")).unwrap_err();
        assert!(matches!(err, Error::ArchiveMissing(_)));
    }

    #[test]
    fn load_exact_names_missing_tensor() {
        let mut store = ParamStore::new();
        store.add("x", Matrix::zeros(1, 1), false);
        store.add("y", Matrix::zeros(2, 1), false);
        let mut map = TensorMap::new();
        map.insert("x".into(), Matrix::scalar(2.0));
        let err = load_exact(&mut store, &map).unwrap_err();
        assert!(err.to_string().contains("missing tensor y"), "{err}");
    }
}
