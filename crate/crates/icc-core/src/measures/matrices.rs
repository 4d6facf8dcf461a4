//! Shared intermediate tables for the four measures.
//!
//! Each builder produces a matrix indexed by (subclass or class) on rows
//! and (neuron or layer) on columns. The global measures reduce whole rows;
//! per-layer profiles reduce column slices of the same matrices, so both
//! views agree by construction.
//!
//! Subsampling seeds are derived deterministically: the distance matrix for
//! superclass or class `g` uses `cfg.seed + g`, the whole-dataset matrix
//! uses `cfg.seed` itself. Candidate rows are always listed in ascending
//! sample order before the seeded draw.

use ndarray::Array2;
use rayon::prelude::*;

use super::{standardize_neurons, MeasureConfig, MeasureError};
use crate::geometry::{cosine_distance_matrix, pairwise_distance_std, silhouette_mean, GeometryError};
use crate::stats::{mean, population_std};
use crate::store::{layer_activations, ActivationDataset};

/// Selectivity of every (subclass, neuron) pair, rows gated by `usable`.
pub(super) struct SelectivityMatrix {
    pub values: Array2<f64>,
    pub usable: Vec<bool>,
    /// (subclass, reason) pairs for rows that were skipped.
    pub skipped: Vec<(usize, String)>,
    pub degenerate: bool,
}

/// Mean and population std over `idx`-selected entries of a column.
/// Values are summed in sorted order so the result does not depend on the
/// enumeration order of `idx` — measures stay bit-identical when samples
/// are permuted.
fn stats_at(column: &[f64], idx: &[usize], scratch: &mut Vec<f64>) -> (f64, f64) {
    scratch.clear();
    scratch.extend(idx.iter().map(|&s| column[s]));
    scratch.sort_by(f64::total_cmp);
    (mean(scratch), population_std(scratch))
}

/// Elements of `sup` not in `sub`; both inputs ascending.
pub(super) fn complement(sup: &[usize], sub: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(sup.len().saturating_sub(sub.len()));
    let mut j = 0;
    for &s in sup {
        while j < sub.len() && sub[j] < s {
            j += 1;
        }
        if j < sub.len() && sub[j] == s {
            j += 1;
        } else {
            out.push(s);
        }
    }
    out
}

pub(super) fn selectivity_matrix(
    ds: &ActivationDataset,
    epsilon: f64,
) -> Result<SelectivityMatrix, MeasureError> {
    let sub_members = ds
        .labels
        .subclass_members()
        .ok_or(MeasureError::MissingHierarchy { measure: "c1" })?;
    let class_members = ds.labels.class_members();
    let map = ds.labels.superclass_of_subclass.as_ref().expect("hierarchy checked");
    let n_neurons = ds.n_neurons();

    let rows: Vec<(Vec<f64>, Option<String>, bool)> = (0..sub_members.len())
        .into_par_iter()
        .map(|i| {
            let sub = &sub_members[i];
            let sup = &class_members[map[i]];
            let comp = complement(sup, sub);
            if sub.len() < 2 || comp.len() < 2 {
                let reason = format!(
                    "subclass {i}: {} members vs {} in superclass complement (need 2 of each)",
                    sub.len(),
                    comp.len()
                );
                return (vec![0.0; n_neurons], Some(reason), false);
            }
            let mut row = Vec::with_capacity(n_neurons);
            let mut degenerate = false;
            let mut buf_sub = Vec::with_capacity(sub.len());
            let mut buf_comp = Vec::with_capacity(comp.len());
            let mut column = Vec::new();
            for block in &ds.layers {
                for col in 0..block.width() {
                    column.clear();
                    column.extend(block.preacts.column(col).iter());
                    let (mu_s, sd_s) = stats_at(&column, sub, &mut buf_sub);
                    let (mu_c, sd_c) = stats_at(&column, &comp, &mut buf_comp);
                    let denom = sd_s + sd_c;
                    degenerate |= denom == 0.0;
                    row.push(selectivity_value(mu_s, mu_c, denom, epsilon));
                }
            }
            (row, None, degenerate)
        })
        .collect();

    let mut values = Array2::zeros((sub_members.len(), n_neurons));
    let mut usable = vec![true; sub_members.len()];
    let mut skipped = Vec::new();
    let mut degenerate = false;
    for (i, (row, skip, degen)) in rows.into_iter().enumerate() {
        values.row_mut(i).assign(&ndarray::Array1::from(row));
        degenerate |= degen;
        if let Some(reason) = skip {
            usable[i] = false;
            skipped.push((i, reason));
        }
    }
    Ok(SelectivityMatrix { values, usable, skipped, degenerate })
}

/// (mu_sub - mu_comp) / (sd_sub + sd_comp + epsilon), with the zero/zero
/// case pinned to 0 so an epsilon of exactly 0 stays finite.
pub(super) fn selectivity_value(mu_s: f64, mu_c: f64, sd_sum: f64, epsilon: f64) -> f64 {
    let denom = sd_sum + epsilon;
    if denom == 0.0 {
        return 0.0;
    }
    (mu_s - mu_c) / denom
}

/// Silhouette of every (subclass, layer) pair on post-ReLU activations.
pub(super) struct SilhouetteMatrix {
    pub values: Array2<f64>,
    pub usable: Vec<bool>,
    pub skipped: Vec<(usize, String)>,
}

pub(super) fn silhouette_matrix(
    ds: &ActivationDataset,
    cfg: &MeasureConfig,
) -> Result<SilhouetteMatrix, MeasureError> {
    let sub_members = ds
        .labels
        .subclass_members()
        .ok_or(MeasureError::MissingHierarchy { measure: "c2" })?;
    let subclass_of = ds.labels.subclass_of.as_ref().expect("hierarchy checked");
    let class_members = ds.labels.class_members();
    let per_class_subs = ds.labels.subclasses_of_class().expect("hierarchy checked");
    let n_layers = ds.n_layers();

    // One independent task per superclass; each fills the rows of its own
    // subclasses.
    type ClassRows = (Vec<(usize, Vec<f64>)>, Vec<(usize, String)>);
    let per_class: Vec<Result<ClassRows, MeasureError>> = (0..ds.labels.n_classes)
        .into_par_iter()
        .map(|class| {
            let subs = &per_class_subs[class];
            let members = &class_members[class];
            let mut skipped = Vec::new();
            if subs.len() < 2 {
                for &i in subs {
                    skipped.push((i, format!(
                        "subclass {i}: superclass {class} has a single subclass"
                    )));
                }
                return Ok((Vec::new(), skipped));
            }

            let seed = cfg.seed.wrapping_add(class as u64);
            let mut rows: Vec<(usize, Vec<f64>)> =
                subs.iter().map(|&i| (i, Vec::with_capacity(n_layers))).collect();
            let mut dead: Vec<usize> = Vec::new(); // subclasses lost to capping
            for (l, block) in ds.layers.iter().enumerate() {
                let acts = layer_activations(block);
                let mut points = Array2::zeros((members.len(), block.width()));
                for (r, &s) in members.iter().enumerate() {
                    points.row_mut(r).assign(&acts.row(s));
                }
                let dm = cosine_distance_matrix(points.view(), cfg.distance_cap, seed)
                    .map_err(MeasureError::Geometry)?;
                let clusters: Vec<usize> =
                    dm.point_ids.iter().map(|&p| subclass_of[members[p]]).collect();

                for (i, row) in rows.iter_mut() {
                    match silhouette_mean(&dm, &clusters, *i) {
                        Ok(s) => row.push(s),
                        Err(GeometryError::TargetClusterEmpty { .. })
                        | Err(GeometryError::SingleCluster { .. }) => {
                            // The subsample is identical across layers, so
                            // this subclass is unusable at every layer.
                            if l == 0 {
                                dead.push(*i);
                            }
                        }
                        Err(e) => return Err(MeasureError::Geometry(e)),
                    }
                }
            }
            for i in dead {
                rows.retain(|(j, _)| *j != i);
                skipped.push((i, format!(
                    "subclass {i}: fewer than 2 subclasses survive the distance cap"
                )));
            }
            Ok((rows, skipped))
        })
        .collect();

    let mut values = Array2::zeros((sub_members.len(), n_layers));
    let mut usable = vec![false; sub_members.len()];
    let mut skipped = Vec::new();
    for result in per_class {
        let (rows, skips) = result?;
        for (i, row) in rows {
            debug_assert_eq!(row.len(), n_layers);
            values.row_mut(i).assign(&ndarray::Array1::from(row));
            usable[i] = true;
        }
        skipped.extend(skips);
    }
    skipped.sort_by_key(|(i, _)| *i);
    Ok(SilhouetteMatrix { values, usable, skipped })
}

/// Variance ratio of every (class, neuron) pair.
pub(super) struct RatioMatrix {
    pub values: Array2<f64>,
    pub degenerate: bool,
}

pub(super) fn variance_ratio_matrix(
    ds: &ActivationDataset,
    epsilon: f64,
) -> Result<RatioMatrix, MeasureError> {
    let class_members = ds.labels.class_members();
    for (c, members) in class_members.iter().enumerate() {
        if members.len() < 2 {
            return Err(MeasureError::ClassTooSmall { class: c, got: members.len(), need: 2 });
        }
    }
    let n_neurons = ds.n_neurons();

    // Whole-dataset std per neuron, shared by every class row.
    let dataset_std: Vec<f64> = ds
        .layers
        .par_iter()
        .flat_map_iter(|block| {
            (0..block.width()).map(|col| {
                let mut column: Vec<f64> = block.preacts.column(col).iter().copied().collect();
                column.sort_by(f64::total_cmp);
                population_std(&column)
            })
        })
        .collect();

    let rows: Vec<(Vec<f64>, bool)> = class_members
        .par_iter()
        .map(|members| {
            let mut row = Vec::with_capacity(n_neurons);
            let mut degenerate = false;
            let mut buf = Vec::with_capacity(members.len());
            let mut column = Vec::new();
            let mut neuron = 0;
            for block in &ds.layers {
                for col in 0..block.width() {
                    column.clear();
                    column.extend(block.preacts.column(col).iter());
                    let (_, sd_class) = stats_at(&column, members, &mut buf);
                    let sd_all = dataset_std[neuron];
                    degenerate |= sd_all == 0.0;
                    row.push(ratio_value(sd_class, sd_all, epsilon));
                    neuron += 1;
                }
            }
            (row, degenerate)
        })
        .collect();

    let mut values = Array2::zeros((class_members.len(), n_neurons));
    let mut degenerate = false;
    for (c, (row, degen)) in rows.into_iter().enumerate() {
        values.row_mut(c).assign(&ndarray::Array1::from(row));
        degenerate |= degen;
    }
    Ok(RatioMatrix { values, degenerate })
}

/// numerator / (denominator + epsilon), pinned to 0 when the guarded
/// denominator is exactly 0 (the numerator is then 0 too).
pub(super) fn ratio_value(num: f64, denom: f64, epsilon: f64) -> f64 {
    let d = denom + epsilon;
    if d == 0.0 {
        return 0.0;
    }
    num / d
}

/// Pairwise-distance dispersion ratio of every (class, layer) pair on
/// standardized representations.
pub(super) fn distance_ratio_matrix(
    ds: &ActivationDataset,
    cfg: &MeasureConfig,
) -> Result<RatioMatrix, MeasureError> {
    let class_members = ds.labels.class_members();
    for (c, members) in class_members.iter().enumerate() {
        if members.len() < 3 {
            return Err(MeasureError::ClassTooSmall { class: c, got: members.len(), need: 3 });
        }
    }

    let standardized: Vec<Array2<f64>> = ds
        .layers
        .par_iter()
        .map(|block| standardize_neurons(block, cfg.activation_fraction).matrix)
        .collect();

    // Sigma over the whole dataset, per layer, under the dataset-level seed.
    let dataset_sigma: Vec<f64> = standardized
        .par_iter()
        .map(|matrix| {
            let dm = cosine_distance_matrix(matrix.view(), cfg.distance_cap, cfg.seed)?;
            pairwise_distance_std(&dm)
        })
        .collect::<Result<_, _>>()
        .map_err(MeasureError::Geometry)?;

    let rows: Vec<Result<Vec<f64>, MeasureError>> = class_members
        .par_iter()
        .enumerate()
        .map(|(class, members)| {
            let seed = cfg.seed.wrapping_add(class as u64);
            let mut row = Vec::with_capacity(ds.n_layers());
            for matrix in &standardized {
                let mut points = Array2::zeros((members.len(), matrix.ncols()));
                for (r, &s) in members.iter().enumerate() {
                    points.row_mut(r).assign(&matrix.row(s));
                }
                let dm = cosine_distance_matrix(points.view(), cfg.distance_cap, seed)
                    .map_err(MeasureError::Geometry)?;
                row.push(pairwise_distance_std(&dm).map_err(MeasureError::Geometry)?);
            }
            Ok(row)
        })
        .collect();

    let mut values = Array2::zeros((class_members.len(), ds.n_layers()));
    let mut degenerate = false;
    for (c, row) in rows.into_iter().enumerate() {
        for (l, sigma_class) in row?.into_iter().enumerate() {
            degenerate |= dataset_sigma[l] == 0.0;
            values[[c, l]] = ratio_value(sigma_class, dataset_sigma[l], cfg.epsilon);
        }
    }
    Ok(RatioMatrix { values, degenerate })
}
