//! Reading and writing dump directories.
//!
//! Layout: `manifest.json` describing the layers, one headerless raw f32
//! little-endian file per layer (row-major, samples outermost), and a JSON
//! labels file. Loading validates everything and pools conv tensors; the
//! error type distinguishes malformed containers from invalid data.

use super::{
    ActivationDataset, LabelHierarchy, LayerBlock, LayerKind, Metrics, StoreError,
};
use ndarray::{Array2, ArrayD, IxDyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub(crate) const DUMP_VERSION: u64 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    version: u64,
    model_id: String,
    n_samples: usize,
    layers: Vec<ManifestLayer>,
    labels_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metrics: Option<Metrics>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    hyperparams: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLayer {
    name: String,
    layer_index: usize,
    kind: LayerKind,
    file: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelsFile {
    class_of: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subclass_of: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    superclass_of_subclass: Option<Vec<i64>>,
}

fn read_file(path: &Path) -> Result<Vec<u8>, StoreError> {
    std::fs::read(path).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })
}

/// Load and fully validate a dump directory.
pub fn load_dump(dir: &Path) -> Result<ActivationDataset, StoreError> {
    let manifest_path = dir.join("manifest.json");
    let manifest: ManifestFile = serde_json::from_slice(&read_file(&manifest_path)?)
        .map_err(|e| StoreError::ManifestJson { path: manifest_path.clone(), msg: e.to_string() })?;

    if manifest.version != DUMP_VERSION {
        return Err(StoreError::UnsupportedVersion { found: manifest.version });
    }
    if manifest.layers.is_empty() {
        return Err(StoreError::EmptyDump { reason: "manifest declares no layers".into() });
    }

    // Shape/dtype checks are cheap; do them up front in manifest order so
    // the reported error is deterministic.
    for layer in &manifest.layers {
        if layer.dtype != "f32le" {
            return Err(StoreError::UnsupportedDtype {
                layer: layer.name.clone(),
                dtype: layer.dtype.clone(),
            });
        }
        let bad_shape = |reason: &str| StoreError::BadShape {
            layer: layer.name.clone(),
            shape: layer.shape.clone(),
            reason: reason.into(),
        };
        match layer.kind {
            LayerKind::Dense if layer.shape.len() != 2 => {
                return Err(bad_shape("dense layers are 2-d (samples x neurons)"))
            }
            LayerKind::Conv if layer.shape.len() < 2 => {
                return Err(bad_shape("conv layers need at least samples and channels dims"))
            }
            _ => {}
        }
        if layer.shape[1] == 0 {
            return Err(bad_shape("zero neurons/channels"));
        }
        if layer.shape[2..].contains(&0) {
            return Err(StoreError::EmptySpatial { layer: layer.name.clone() });
        }
        if layer.shape[0] != manifest.n_samples {
            return Err(StoreError::InconsistentSampleCount {
                layer: layer.name.clone(),
                got: layer.shape[0],
                expected: manifest.n_samples,
            });
        }
    }

    // Tensor files load in parallel; errors are surfaced in manifest order.
    let loaded: Vec<Result<LayerBlock, StoreError>> = manifest
        .layers
        .par_iter()
        .map(|layer| load_tensor(dir, layer))
        .collect();
    let mut blocks = Vec::with_capacity(loaded.len());
    for block in loaded {
        blocks.push(block?);
    }

    let labels_path = dir.join(&manifest.labels_file);
    let labels_raw: LabelsFile = serde_json::from_slice(&read_file(&labels_path)?)
        .map_err(|e| StoreError::LabelsJson { path: labels_path.clone(), msg: e.to_string() })?;
    if labels_raw.class_of.len() != manifest.n_samples {
        return Err(StoreError::LabelsLength {
            field: "class_of",
            got: labels_raw.class_of.len(),
            expected: manifest.n_samples,
        });
    }
    if let Some(sub) = &labels_raw.subclass_of {
        if sub.len() != manifest.n_samples {
            return Err(StoreError::LabelsLength {
                field: "subclass_of",
                got: sub.len(),
                expected: manifest.n_samples,
            });
        }
    }
    let labels = LabelHierarchy::from_raw(
        labels_raw.class_of,
        labels_raw.subclass_of,
        labels_raw.superclass_of_subclass,
    )?;

    ActivationDataset::new(
        blocks,
        labels,
        manifest.model_id,
        manifest.metrics,
        manifest.hyperparams,
    )
}

fn load_tensor(dir: &Path, layer: &ManifestLayer) -> Result<LayerBlock, StoreError> {
    let path = dir.join(&layer.file);
    let bytes = read_file(&path)?;
    let elements: usize = layer.shape.iter().product();
    let expected = elements as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(StoreError::TensorSize {
            file: layer.file.clone(),
            expected,
            actual: bytes.len() as u64,
        });
    }

    let mut data = Vec::with_capacity(elements);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(StoreError::NonFinite { file: layer.file.clone(), offset: i });
        }
        data.push(v as f64);
    }

    let preacts: Array2<f64> = if layer.shape.len() == 2 {
        Array2::from_shape_vec((layer.shape[0], layer.shape[1]), data)
            .expect("length checked against shape")
    } else {
        let nd = ArrayD::from_shape_vec(IxDyn(&layer.shape), data)
            .expect("length checked against shape");
        super::global_max_pool(nd.view()).map_err(|e| match e {
            StoreError::EmptySpatial { .. } => StoreError::EmptySpatial { layer: layer.name.clone() },
            other => other,
        })?
    };

    Ok(LayerBlock {
        name: layer.name.clone(),
        layer_index: layer.layer_index,
        kind: layer.kind,
        preacts,
        neuron_offset: 0, // assigned by ActivationDataset::new
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    std::fs::write(path, bytes).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })
}

/// Write a dataset as a dump directory (values cast to f32).
///
/// Tensor files are named `layer_<index>.bin`. Writing a dataset that was
/// itself loaded from a dump reproduces every tensor byte exactly.
pub fn write_dump(ds: &ActivationDataset, dir: &Path) -> Result<(), StoreError> {
    std::fs::create_dir_all(dir)
        .map_err(|source| StoreError::Io { path: dir.to_path_buf(), source })?;

    let mut layers = Vec::with_capacity(ds.layers.len());
    for block in &ds.layers {
        let file = format!("layer_{:03}.bin", block.layer_index);
        let mut bytes = Vec::with_capacity(block.preacts.len() * 4);
        for &v in block.preacts.iter() {
            bytes
                .write_all(&(v as f32).to_le_bytes())
                .expect("writing to a Vec cannot fail");
        }
        write_file(&dir.join(&file), &bytes)?;
        layers.push(ManifestLayer {
            name: block.name.clone(),
            layer_index: block.layer_index,
            kind: block.kind,
            file,
            dtype: "f32le".into(),
            shape: vec![block.preacts.nrows(), block.preacts.ncols()],
        });
    }

    let to_i64 = |v: &[usize]| v.iter().map(|&x| x as i64).collect();
    let labels = LabelsFile {
        class_of: to_i64(&ds.labels.class_of),
        subclass_of: ds.labels.subclass_of.as_deref().map(to_i64),
        superclass_of_subclass: ds.labels.superclass_of_subclass.as_deref().map(to_i64),
    };
    let labels_json = serde_json::to_vec_pretty(&labels).expect("labels serialize");
    write_file(&dir.join("labels.json"), &labels_json)?;

    let manifest = ManifestFile {
        version: DUMP_VERSION,
        model_id: ds.model_id.clone(),
        n_samples: ds.n_samples(),
        layers,
        labels_file: "labels.json".into(),
        metrics: ds.metrics,
        hyperparams: ds.hyperparams.clone(),
    };
    let manifest_json = serde_json::to_vec_pretty(&manifest).expect("manifest serialize");
    write_file(&dir.join("manifest.json"), &manifest_json)?;
    Ok(())
}
