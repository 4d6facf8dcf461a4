//! Grid sweeps: train one model per point of a hyperparameter grid on a
//! shared synthetic dataset, dump every model's activations, score the
//! dumps with the measures, and assemble the sweep table.
//!
//! Measures are computed from the *reloaded* dumps, not from in-memory
//! activations, so every sweep also exercises the on-disk format.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::Path;

use super::train::{dump_activations, train, EpochStat};
use super::{gen_synthetic, SyntheticSpec, ToyConfig, ToyError};
use crate::measures::{compute_all, MeasureConfig, MeasureOptions};
use crate::ranking::{ModelRecord, SweepTable};
use crate::store::{load_dump, write_dump, Metrics};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridAxis {
    pub name: String,
    /// Scalar values patch the config field named by the axis; object
    /// values are merged field-by-field (a coupled-axis step).
    pub values: Vec<Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepGrid {
    pub synthetic: SyntheticSpec,
    pub base_config: ToyConfig,
    pub axes: Vec<GridAxis>,
    #[serde(default)]
    pub measure: MeasureConfig,
}

/// One model that could not be trained or scored; the sweep carries on.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepFailure {
    pub model_id: String,
    pub stage: String,
    pub message: String,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub table: SweepTable,
    pub failures: Vec<SweepFailure>,
    /// Per-model training traces, in model order.
    pub curves: Vec<(String, Vec<EpochStat>)>,
}

/// A scalar axis value as it appears in the sweep table.
fn scalar_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// (table label, config patch) for one axis value.
fn axis_step(axis: &GridAxis, index: usize) -> Result<(String, Vec<(String, Value)>), ToyError> {
    let value = &axis.values[index];
    match value {
        Value::Object(fields) => {
            if fields.is_empty() {
                return Err(ToyError::BadAxisValue {
                    axis: axis.name.clone(),
                    index,
                    message: "empty patch object".into(),
                });
            }
            let label = fields
                .iter()
                .map(|(k, v)| format!("{k}={}", scalar_label(v)))
                .collect::<Vec<_>>()
                .join(";");
            Ok((label, fields.iter().map(|(k, v)| (k.clone(), v.clone())).collect()))
        }
        Value::Array(_) | Value::Null => Err(ToyError::BadAxisValue {
            axis: axis.name.clone(),
            index,
            message: "axis values must be scalars or patch objects".into(),
        }),
        scalar => Ok((
            scalar_label(scalar),
            vec![(axis.name.clone(), scalar.clone())],
        )),
    }
}

fn patched_config(
    base: &ToyConfig,
    patches: &[(String, Value)],
    axis: &str,
    index: usize,
) -> Result<ToyConfig, ToyError> {
    let mut tree = serde_json::to_value(base).expect("config serializes");
    let map = tree.as_object_mut().expect("config is an object");
    for (k, v) in patches {
        if !map.contains_key(k) {
            return Err(ToyError::BadAxisValue {
                axis: axis.into(),
                index,
                message: format!("no config field named {k:?}"),
            });
        }
        map.insert(k.clone(), v.clone());
    }
    serde_json::from_value(tree).map_err(|e| ToyError::BadAxisValue {
        axis: axis.into(),
        index,
        message: e.to_string(),
    })
}

struct PlannedModel {
    model_id: String,
    hyperparams: BTreeMap<String, String>,
    config: ToyConfig,
}

/// Expand the cartesian product of the axes, first axis slowest. Model ids
/// are `m000`, `m001`, ... in enumeration order.
fn plan(grid: &SweepGrid) -> Result<Vec<PlannedModel>, ToyError> {
    if grid.axes.is_empty() || grid.axes.iter().all(|a| a.values.len() < 2) {
        return Err(ToyError::DegenerateGrid);
    }
    for axis in &grid.axes {
        if axis.values.is_empty() {
            return Err(ToyError::BadAxisValue {
                axis: axis.name.clone(),
                index: 0,
                message: "axis has no values".into(),
            });
        }
    }
    let mut names = grid.axes.iter().map(|a| &a.name).collect::<Vec<_>>();
    names.sort();
    names.dedup();
    if names.len() != grid.axes.len() {
        return Err(ToyError::InvalidConfig { what: "duplicate axis names".into() });
    }

    let mut models = Vec::new();
    let mut counters = vec![0usize; grid.axes.len()];
    loop {
        let mut hyperparams = BTreeMap::new();
        let mut config = grid.base_config.clone();
        for (a, axis) in grid.axes.iter().enumerate() {
            let (label, patches) = axis_step(axis, counters[a])?;
            hyperparams.insert(axis.name.clone(), label);
            config = patched_config(&config, &patches, &axis.name, counters[a])?;
        }
        config.validate()?;
        models.push(PlannedModel {
            model_id: format!("m{:03}", models.len()),
            hyperparams,
            config,
        });

        // Odometer increment, last axis fastest.
        let mut digit = grid.axes.len();
        loop {
            if digit == 0 {
                return Ok(models);
            }
            digit -= 1;
            counters[digit] += 1;
            if counters[digit] < grid.axes[digit].values.len() {
                break;
            }
            counters[digit] = 0;
        }
    }
}

/// Trains the whole grid against one shared synthetic dataset, writes one
/// dump directory per model under `out_dir`, and scores the reloaded dumps.
/// Models run in parallel; each is internally sequential, so results do not
/// depend on scheduling. Failed models are reported, not fatal.
pub fn run_sweep(grid: &SweepGrid, out_dir: &Path) -> Result<SweepOutcome, ToyError> {
    grid.measure.validate()?;
    let models = plan(grid)?;
    let (train_ds, test_ds) = gen_synthetic(&grid.synthetic)?;

    type ModelResult = Result<(ModelRecord, Vec<EpochStat>), SweepFailure>;
    let results: Vec<ModelResult> = models
        .par_iter()
        .map(|m| {
            let fail = |stage: &str, message: String| SweepFailure {
                model_id: m.model_id.clone(),
                stage: stage.into(),
                message,
            };
            let trained = train(&m.config, &train_ds, &test_ds)
                .map_err(|e| fail("train", e.to_string()))?;
            let metrics = Metrics {
                train_accuracy: trained.train_accuracy,
                test_accuracy: trained.test_accuracy,
            };
            let ds = dump_activations(
                &trained.net,
                &train_ds,
                &m.model_id,
                Some(metrics),
                m.hyperparams.clone(),
            )
            .map_err(|e| fail("dump", e.to_string()))?;
            let dir = out_dir.join(&m.model_id);
            write_dump(&ds, &dir).map_err(|e| fail("dump", e.to_string()))?;
            let reloaded = load_dump(&dir).map_err(|e| fail("reload", e.to_string()))?;
            let report = compute_all(&reloaded, &grid.measure, &MeasureOptions::default())
                .map_err(|e| fail("measure", e.to_string()))?;

            let mut measures = BTreeMap::new();
            for (name, value) in [
                ("c1", report.c1),
                ("c2", report.c2),
                ("c3", report.c3),
                ("c4", report.c4),
            ] {
                if let Some(v) = value {
                    measures.insert(name.to_string(), v);
                }
            }
            let record = ModelRecord {
                model_id: m.model_id.clone(),
                hyperparams: m.hyperparams.clone(),
                train_accuracy: trained.train_accuracy,
                test_accuracy: trained.test_accuracy,
                measures,
            };
            Ok((record, trained.curve))
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut curves = Vec::new();
    for result in results {
        match result {
            Ok((record, curve)) => {
                curves.push((record.model_id.clone(), curve));
                records.push(record);
            }
            Err(f) => failures.push(f),
        }
    }
    if records.is_empty() {
        return Err(ToyError::AllModelsFailed {
            first: failures
                .first()
                .map(|f| format!("{} ({}): {}", f.model_id, f.stage, f.message))
                .unwrap_or_else(|| "empty grid".into()),
        });
    }

    let table = SweepTable {
        axes: grid.axes.iter().map(|a| a.name.clone()).collect(),
        records,
    };
    Ok(SweepOutcome { table, failures, curves })
}
