//! The activation-dump container: labels, per-layer pre-activation blocks,
//! and the validation that makes a loaded dataset safe to compute on.
//!
//! A dump stores post-normalization, *pre*-ReLU values; activations are
//! derived in-tool with an elementwise ReLU. Convolutional tensors are
//! reduced to one value per (sample, channel) by global max pooling, either
//! by the producer or at load time.

mod io;

pub use io::{load_dump, write_dump};

use ndarray::{Array2, ArrayViewD};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

/// Whether an error is a malformed container (exit code 2 at the CLI) or a
/// well-formed container holding invalid data (exit code 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Format,
    Validation,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest {path}: {msg}")]
    ManifestJson { path: PathBuf, msg: String },
    #[error("labels file {path}: {msg}")]
    LabelsJson { path: PathBuf, msg: String },
    #[error("unsupported dump version {found} (expected 1)")]
    UnsupportedVersion { found: u64 },
    #[error("layer {layer}: unsupported dtype {dtype:?} (expected \"f32le\")")]
    UnsupportedDtype { layer: String, dtype: String },
    #[error("layer {layer}: bad shape {shape:?}: {reason}")]
    BadShape { layer: String, shape: Vec<usize>, reason: String },
    #[error("tensor file {file}: has {actual} bytes, shape requires {expected}")]
    TensorSize { file: String, expected: u64, actual: u64 },
    #[error("non-finite value in {file} at element offset {offset}")]
    NonFinite { file: String, offset: usize },
    #[error("label out of range: {field}[{index}] = {value}, expected in [0, {bound})")]
    LabelOutOfRange { field: &'static str, index: usize, value: i64, bound: usize },
    #[error("{field} has {got} entries, expected {expected}")]
    LabelsLength { field: &'static str, got: usize, expected: usize },
    #[error("layer {layer}: {got} samples, manifest declares {expected}")]
    InconsistentSampleCount { layer: String, got: usize, expected: usize },
    #[error("layer indices must be strictly increasing: {reason}")]
    LayerOrder { reason: String },
    #[error("{kind} {index} has no samples")]
    EmptyClass { kind: &'static str, index: usize },
    #[error("sample {sample}: superclass of its subclass is {via_subclass}, but class_of says {direct}")]
    HierarchyMismatch { sample: usize, via_subclass: usize, direct: usize },
    #[error("subclass_of is present but superclass_of_subclass is missing")]
    MissingSuperclassMap,
    #[error("superclass_of_subclass is present but subclass_of is missing")]
    OrphanSuperclassMap,
    #[error("metric {which} = {value} is outside [0, 1]")]
    MetricsRange { which: &'static str, value: f64 },
    #[error("dump is empty: {reason}")]
    EmptyDump { reason: String },
    #[error("layer {layer}: empty spatial extent")]
    EmptySpatial { layer: String },
}

impl StoreError {
    pub fn category(&self) -> ErrorCategory {
        use StoreError::*;
        match self {
            Io { .. } | ManifestJson { .. } | LabelsJson { .. } | UnsupportedVersion { .. }
            | UnsupportedDtype { .. } | BadShape { .. } | TensorSize { .. } => {
                ErrorCategory::Format
            }
            _ => ErrorCategory::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv,
}

/// Optional held-out metrics recorded by the producer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Class labels per sample, with an optional subclass level beneath them.
///
/// Classes and subclasses are dense indices: every index in `0..n_classes`
/// (and `0..n_subclasses`) has at least one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelHierarchy {
    pub n_samples: usize,
    pub class_of: Vec<usize>,
    pub subclass_of: Option<Vec<usize>>,
    /// Indexed by subclass; present exactly when `subclass_of` is.
    pub superclass_of_subclass: Option<Vec<usize>>,
    pub n_classes: usize,
}

impl LabelHierarchy {
    /// Validate raw (possibly negative) label arrays and derive the class
    /// count. With a hierarchy, the class count comes from the
    /// subclass→superclass map; otherwise from the largest class label.
    pub fn from_raw(
        class_of: Vec<i64>,
        subclass_of: Option<Vec<i64>>,
        superclass_of_subclass: Option<Vec<i64>>,
    ) -> Result<Self, StoreError> {
        let n_samples = class_of.len();
        if n_samples == 0 {
            return Err(StoreError::EmptyDump { reason: "no samples".into() });
        }
        match (&subclass_of, &superclass_of_subclass) {
            (Some(_), None) => return Err(StoreError::MissingSuperclassMap),
            (None, Some(_)) => return Err(StoreError::OrphanSuperclassMap),
            _ => {}
        }

        let check_nonneg = |field: &'static str, v: &[i64], bound: usize| {
            v.iter().enumerate().find(|(_, &x)| x < 0 || x as usize >= bound).map_or(
                Ok(()),
                |(i, &x)| {
                    Err(StoreError::LabelOutOfRange { field, index: i, value: x, bound })
                },
            )
        };

        let (n_classes, subclass_of, superclass_of_subclass) = match (
            subclass_of,
            superclass_of_subclass,
        ) {
            (Some(sub), Some(map)) => {
                if sub.len() != n_samples {
                    return Err(StoreError::LabelsLength {
                        field: "subclass_of",
                        got: sub.len(),
                        expected: n_samples,
                    });
                }
                if map.is_empty() {
                    return Err(StoreError::EmptyDump {
                        reason: "superclass_of_subclass is empty".into(),
                    });
                }
                let n_sub = map.len();
                check_nonneg("subclass_of", &sub, n_sub)?;
                let n_classes = map.iter().max().copied().unwrap_or(-1) + 1;
                if n_classes <= 0 {
                    return Err(StoreError::LabelOutOfRange {
                        field: "superclass_of_subclass",
                        index: 0,
                        value: map[0],
                        bound: 0,
                    });
                }
                let n_classes = n_classes as usize;
                check_nonneg("superclass_of_subclass", &map, n_classes)?;
                (
                    n_classes,
                    Some(sub.into_iter().map(|x| x as usize).collect::<Vec<_>>()),
                    Some(map.into_iter().map(|x| x as usize).collect::<Vec<_>>()),
                )
            }
            _ => {
                let max = class_of.iter().max().copied().unwrap_or(-1);
                if max < 0 {
                    return Err(StoreError::LabelOutOfRange {
                        field: "class_of",
                        index: 0,
                        value: class_of[0],
                        bound: 0,
                    });
                }
                ((max + 1) as usize, None, None)
            }
        };

        check_nonneg("class_of", &class_of, n_classes)?;
        let class_of: Vec<usize> = class_of.into_iter().map(|x| x as usize).collect();

        let labels = LabelHierarchy {
            n_samples,
            class_of,
            subclass_of,
            superclass_of_subclass,
            n_classes,
        };
        labels.check_consistency()?;
        Ok(labels)
    }

    fn check_consistency(&self) -> Result<(), StoreError> {
        let mut class_seen = vec![false; self.n_classes];
        for &c in &self.class_of {
            class_seen[c] = true;
        }
        if let Some(i) = class_seen.iter().position(|&s| !s) {
            return Err(StoreError::EmptyClass { kind: "class", index: i });
        }
        if let (Some(sub), Some(map)) = (&self.subclass_of, &self.superclass_of_subclass) {
            for (s, &sc) in sub.iter().enumerate() {
                if map[sc] != self.class_of[s] {
                    return Err(StoreError::HierarchyMismatch {
                        sample: s,
                        via_subclass: map[sc],
                        direct: self.class_of[s],
                    });
                }
            }
            let mut sub_seen = vec![false; map.len()];
            for &sc in sub {
                sub_seen[sc] = true;
            }
            if let Some(i) = sub_seen.iter().position(|&s| !s) {
                return Err(StoreError::EmptyClass { kind: "subclass", index: i });
            }
        }
        Ok(())
    }

    pub fn has_hierarchy(&self) -> bool {
        self.subclass_of.is_some()
    }

    pub fn n_subclasses(&self) -> Option<usize> {
        self.superclass_of_subclass.as_ref().map(Vec::len)
    }

    /// Sample indices per class, each list in ascending order.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.n_classes];
        for (s, &c) in self.class_of.iter().enumerate() {
            members[c].push(s);
        }
        members
    }

    /// Sample indices per subclass, each list in ascending order.
    pub fn subclass_members(&self) -> Option<Vec<Vec<usize>>> {
        let sub = self.subclass_of.as_ref()?;
        let mut members = vec![Vec::new(); self.n_subclasses()?];
        for (s, &sc) in sub.iter().enumerate() {
            members[sc].push(s);
        }
        Some(members)
    }

    /// Subclass ids per superclass, ascending.
    pub fn subclasses_of_class(&self) -> Option<Vec<Vec<usize>>> {
        let map = self.superclass_of_subclass.as_ref()?;
        let mut per_class = vec![Vec::new(); self.n_classes];
        for (sc, &c) in map.iter().enumerate() {
            per_class[c].push(sc);
        }
        Some(per_class)
    }
}

/// One layer's pre-activations: samples by neurons, spatial dims already
/// pooled away for conv layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBlock {
    pub name: String,
    pub layer_index: usize,
    pub kind: LayerKind,
    pub preacts: Array2<f64>,
    /// Global index of this block's first neuron.
    pub neuron_offset: usize,
}

impl LayerBlock {
    pub fn width(&self) -> usize {
        self.preacts.ncols()
    }
}

/// A validated, immutable activation dump in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    pub layers: Vec<LayerBlock>,
    pub labels: LabelHierarchy,
    pub model_id: String,
    pub metrics: Option<Metrics>,
    pub hyperparams: BTreeMap<String, String>,
}

impl ActivationDataset {
    /// Validate block shapes and ordering, and (re)assign contiguous global
    /// neuron offsets.
    pub fn new(
        mut layers: Vec<LayerBlock>,
        labels: LabelHierarchy,
        model_id: String,
        metrics: Option<Metrics>,
        hyperparams: BTreeMap<String, String>,
    ) -> Result<Self, StoreError> {
        if layers.is_empty() {
            return Err(StoreError::EmptyDump { reason: "no layers".into() });
        }
        for w in layers.windows(2) {
            if w[0].layer_index >= w[1].layer_index {
                return Err(StoreError::LayerOrder {
                    reason: format!(
                        "{} (index {}) is followed by {} (index {})",
                        w[0].name, w[0].layer_index, w[1].name, w[1].layer_index
                    ),
                });
            }
        }
        let mut offset = 0;
        for block in &mut layers {
            if block.preacts.nrows() != labels.n_samples {
                return Err(StoreError::InconsistentSampleCount {
                    layer: block.name.clone(),
                    got: block.preacts.nrows(),
                    expected: labels.n_samples,
                });
            }
            if block.width() == 0 {
                return Err(StoreError::EmptyDump {
                    reason: format!("layer {} has zero neurons", block.name),
                });
            }
            block.neuron_offset = offset;
            offset += block.width();
        }
        if let Some(m) = &metrics {
            for (which, value) in [
                ("train_accuracy", m.train_accuracy),
                ("test_accuracy", m.test_accuracy),
            ] {
                if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                    return Err(StoreError::MetricsRange { which, value });
                }
            }
        }
        Ok(ActivationDataset { layers, labels, model_id, metrics, hyperparams })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.n_samples
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Total neuron count across all layers.
    pub fn n_neurons(&self) -> usize {
        self.layers.iter().map(LayerBlock::width).sum()
    }
}

/// out[s, c] = max over all spatial positions of tensor[s, c, ...].
///
/// The tensor is samples × channels × spatial dims; a 2-d tensor is
/// returned unchanged (already pooled).
pub fn global_max_pool(tensor: ArrayViewD<'_, f64>) -> Result<Array2<f64>, StoreError> {
    let shape = tensor.shape().to_vec();
    if shape.len() < 2 {
        return Err(StoreError::BadShape {
            layer: String::new(),
            shape,
            reason: "need at least samples and channels dims".into(),
        });
    }
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    if shape[2..].contains(&0) {
        return Err(StoreError::EmptySpatial { layer: String::new() });
    }
    let standard = tensor.as_standard_layout();
    let flat = standard.as_slice().expect("standard layout has a slice");
    let mut out = Array2::<f64>::zeros((n, c));
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            let mut best = f64::NEG_INFINITY;
            for &v in &flat[base..base + spatial] {
                if v > best {
                    best = v;
                }
            }
            out[[s, ch]] = best;
        }
    }
    Ok(out)
}

/// Elementwise ReLU of a block's pre-activations.
pub fn layer_activations(block: &LayerBlock) -> Array2<f64> {
    block.preacts.mapv(|v| v.max(0.0))
}
