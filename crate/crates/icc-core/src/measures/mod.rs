//! The four intraclass-clustering measures.
//!
//! c1: how selective single neurons are for subclasses inside their
//! superclass (mean-difference over summed stds, top-k over neurons, median
//! over subclasses). c2: how well subclasses separate as clusters in each
//! layer's post-ReLU activation space (silhouette, top-k over layers,
//! median over subclasses). c3: within-class vs dataset dispersion of
//! single neurons (std ratio, top-k over neurons, mean over classes). c4:
//! within-class vs dataset spread of pairwise distances on standardized
//! representations (top-k over layers, mean over classes).
//!
//! c1 and c3 read post-normalization pre-activations, c2 reads post-ReLU
//! activations, and c4 reads pre-activations standardized per neuron and
//! re-biased so a fixed fraction of samples activate.

mod matrices;

use matrices::{
    distance_ratio_matrix, selectivity_matrix, selectivity_value, silhouette_matrix,
    variance_ratio_matrix,
};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::ops::Range;

use crate::geometry::GeometryError;
use crate::stats::{mean, median, population_std};
use crate::store::{ActivationDataset, LayerBlock};

/// Top-k width used by per-layer profiles, clamped to the layer width.
pub const PROFILE_TOP_K: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum MeasureError {
    #[error("measure {measure} needs subclass labels, which this dump lacks")]
    MissingHierarchy { measure: &'static str },
    #[error("class {class} has {got} samples, need at least {need}")]
    ClassTooSmall { class: usize, got: usize, need: usize },
    #[error("no subclass was usable for measure {measure}")]
    NoUsableSubclasses { measure: &'static str },
    #[error("{what} has {got} samples, need at least {need}")]
    TooFewSamples { what: &'static str, got: usize, need: usize },
    #[error("top_k_mean of empty values")]
    EmptyValues,
    #[error("bad index set: {reason}")]
    BadIndexSet { reason: String },
    #[error("bad measure config: {reason}")]
    InvalidConfig { reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasureConfig {
    /// Top-k for the neuron-level measures c1 and c3.
    pub k_neuron: usize,
    /// Top-k for the layer-level measures c2 and c4.
    pub k_layer: usize,
    /// Fraction of samples left activated by c4's standardization bias.
    pub activation_fraction: f64,
    /// Maximum number of points entering any pairwise-distance matrix.
    pub distance_cap: usize,
    /// Base seed for all subsampling draws.
    pub seed: u64,
    /// Guard added to std denominators.
    pub epsilon: f64,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig {
            k_neuron: 30,
            k_layer: 5,
            activation_fraction: 0.25,
            distance_cap: 256,
            seed: 0,
            epsilon: 1e-12,
        }
    }
}

impl MeasureConfig {
    pub fn validate(&self) -> Result<(), MeasureError> {
        let bad = |reason: String| Err(MeasureError::InvalidConfig { reason });
        if self.k_neuron == 0 || self.k_layer == 0 {
            return bad("k_neuron and k_layer must be at least 1".into());
        }
        if !(self.activation_fraction > 0.0 && self.activation_fraction < 1.0) {
            return bad(format!(
                "activation_fraction must be in (0, 1), got {}",
                self.activation_fraction
            ));
        }
        if self.distance_cap < 2 {
            return bad(format!("distance_cap must be at least 2, got {}", self.distance_cap));
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return bad(format!("epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// One measure's value plus the bookkeeping that qualifies it.
#[derive(Debug, Clone, PartialEq)]
pub struct Measured {
    pub value: f64,
    pub warnings: Vec<String>,
    /// A zero-variance denominator was hit somewhere.
    pub degenerate: bool,
    /// More than 20% of subclasses were skipped.
    pub unreliable: bool,
}

/// Mean of the k largest values; k is clamped to the length (flagged in the
/// returned bool). Ties contribute duplicates, so the result does not
/// depend on which of several equal values are "chosen".
pub fn top_k_mean(values: &[f64], k: usize) -> Result<(f64, bool), MeasureError> {
    if values.is_empty() {
        return Err(MeasureError::EmptyValues);
    }
    if k == 0 {
        return Err(MeasureError::InvalidConfig { reason: "top_k_mean with k = 0".into() });
    }
    let clamped = k > values.len();
    let k_eff = k.min(values.len());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok((mean(&sorted[..k_eff]), clamped))
}

/// Selectivity of one neuron for one subclass:
/// (mu_sub - mu_complement) / (sd_sub + sd_complement + epsilon), where the
/// complement is the rest of the subclass's superclass.
pub fn neuron_subclass_selectivity(
    neuron: &[f64],
    subclass: &[usize],
    superclass: &[usize],
    epsilon: f64,
) -> Result<(f64, bool), MeasureError> {
    let mut sub: Vec<usize> = subclass.to_vec();
    let mut sup: Vec<usize> = superclass.to_vec();
    sub.sort_unstable();
    sup.sort_unstable();
    if let Some(&i) = sup.iter().chain(sub.iter()).find(|&&i| i >= neuron.len()) {
        return Err(MeasureError::BadIndexSet {
            reason: format!("sample index {i} out of range ({} values)", neuron.len()),
        });
    }
    let mut sup_iter = sup.iter().peekable();
    for &s in &sub {
        while sup_iter.peek().is_some_and(|&&x| x < s) {
            sup_iter.next();
        }
        if sup_iter.next() != Some(&s) {
            return Err(MeasureError::BadIndexSet {
                reason: format!("subclass sample {s} is not in the superclass"),
            });
        }
    }
    let comp = matrices::complement(&sup, &sub);
    if sub.len() < 2 {
        return Err(MeasureError::TooFewSamples { what: "subclass", got: sub.len(), need: 2 });
    }
    if comp.len() < 2 {
        return Err(MeasureError::TooFewSamples {
            what: "superclass complement",
            got: comp.len(),
            need: 2,
        });
    }
    let vals = |idx: &[usize]| idx.iter().map(|&i| neuron[i]).collect::<Vec<_>>();
    let (vs, vc) = (vals(&sub), vals(&comp));
    let (mu_s, sd_s) = (mean(&vs), population_std(&vs));
    let (mu_c, sd_c) = (mean(&vc), population_std(&vc));
    let sd_sum = sd_s + sd_c;
    Ok((selectivity_value(mu_s, mu_c, sd_sum, epsilon), sd_sum == 0.0))
}

/// Variance concentration of one neuron on one class:
/// sd over the class / (sd over all samples + epsilon).
pub fn neuron_variance_ratio(
    neuron: &[f64],
    class_samples: &[usize],
    all_samples: &[usize],
    epsilon: f64,
) -> Result<(f64, bool), MeasureError> {
    if class_samples.len() < 2 {
        return Err(MeasureError::TooFewSamples {
            what: "class",
            got: class_samples.len(),
            need: 2,
        });
    }
    if let Some(&i) = class_samples
        .iter()
        .chain(all_samples.iter())
        .find(|&&i| i >= neuron.len())
    {
        return Err(MeasureError::BadIndexSet {
            reason: format!("sample index {i} out of range ({} values)", neuron.len()),
        });
    }
    let vals = |idx: &[usize]| idx.iter().map(|&i| neuron[i]).collect::<Vec<_>>();
    let sd_class = population_std(&vals(class_samples));
    let sd_all = population_std(&vals(all_samples));
    Ok((matrices::ratio_value(sd_class, sd_all, epsilon), sd_all == 0.0))
}

/// A layer standardized for c4.
pub struct Standardized {
    pub matrix: Array2<f64>,
    /// Neurons with zero dataset std, emitted as all-zero columns.
    pub degenerate_neurons: Vec<usize>,
}

/// Per neuron: z-score against the whole dataset, then subtract the
/// nearest-rank (1 - activation_fraction) quantile and apply ReLU, so that
/// an `activation_fraction` share of samples stays strictly positive.
pub fn standardize_neurons(block: &LayerBlock, activation_fraction: f64) -> Standardized {
    let m = block.preacts.nrows();
    let mut matrix = Array2::zeros((m, block.width()));
    let mut degenerate_neurons = Vec::new();
    // Nearest-rank quantile: the r-th smallest with r = ceil(q * m).
    let rank = ((1.0 - activation_fraction) * m as f64).ceil() as usize;
    let rank = rank.clamp(1, m);
    let mut column = Vec::with_capacity(m);
    let mut sorted = Vec::with_capacity(m);
    for col in 0..block.width() {
        column.clear();
        column.extend(block.preacts.column(col).iter());
        // Statistics are accumulated in value order so the outcome is a
        // function of the sample multiset, not of sample order.
        sorted.clear();
        sorted.extend_from_slice(&column);
        sorted.sort_by(f64::total_cmp);
        let mu = mean(&sorted);
        let sd = population_std(&sorted);
        if sd == 0.0 {
            degenerate_neurons.push(col);
            continue; // column stays all-zero
        }
        // The z-transform is increasing, so the rank-th smallest z-score is
        // the transformed rank-th smallest raw value.
        let q = (sorted[rank - 1] - mu) / sd;
        for (s, &x) in column.iter().enumerate() {
            matrix[[s, col]] = ((x - mu) / sd - q).max(0.0);
        }
    }
    Standardized { matrix, degenerate_neurons }
}

/// Median over usable rows of the top-k mean of each row's `cols` slice.
fn rowwise_topk_median(
    values: &Array2<f64>,
    usable: &[bool],
    cols: Range<usize>,
    k: usize,
) -> Result<Option<(f64, bool)>, MeasureError> {
    let mut per_row = Vec::new();
    let mut clamped = false;
    for (i, row) in values.rows().into_iter().enumerate() {
        if !usable[i] {
            continue;
        }
        let slice: Vec<f64> = row.slice(ndarray::s![cols.clone()]).to_vec();
        let (v, c) = top_k_mean(&slice, k)?;
        clamped |= c;
        per_row.push(v);
    }
    if per_row.is_empty() {
        return Ok(None);
    }
    Ok(Some((median(&per_row), clamped)))
}

/// Mean over all rows of the top-k mean of each row's `cols` slice.
fn rowwise_topk_mean(
    values: &Array2<f64>,
    cols: Range<usize>,
    k: usize,
) -> Result<(f64, bool), MeasureError> {
    let mut per_row = Vec::new();
    let mut clamped = false;
    for row in values.rows() {
        let slice: Vec<f64> = row.slice(ndarray::s![cols.clone()]).to_vec();
        let (v, c) = top_k_mean(&slice, k)?;
        clamped |= c;
        per_row.push(v);
    }
    Ok((mean(&per_row), clamped))
}

fn skip_warnings(skipped: &[(usize, String)], measure: &str) -> Vec<String> {
    skipped.iter().map(|(_, reason)| format!("{measure}: skipped {reason}")).collect()
}

fn unreliable(skipped: usize, total: usize) -> bool {
    skipped * 5 > total
}

pub fn compute_c1(ds: &ActivationDataset, cfg: &MeasureConfig) -> Result<Measured, MeasureError> {
    cfg.validate()?;
    let sel = selectivity_matrix(ds, cfg.epsilon)?;
    let mut warnings = skip_warnings(&sel.skipped, "c1");
    let (value, clamped) = rowwise_topk_median(&sel.values, &sel.usable, 0..ds.n_neurons(), cfg.k_neuron)?
        .ok_or(MeasureError::NoUsableSubclasses { measure: "c1" })?;
    if clamped {
        warnings.push(format!(
            "c1: k_neuron {} clamped to {} available neurons",
            cfg.k_neuron,
            ds.n_neurons()
        ));
    }
    Ok(Measured {
        value,
        warnings,
        degenerate: sel.degenerate,
        unreliable: unreliable(sel.skipped.len(), sel.usable.len()),
    })
}

pub fn compute_c2(ds: &ActivationDataset, cfg: &MeasureConfig) -> Result<Measured, MeasureError> {
    cfg.validate()?;
    let sil = silhouette_matrix(ds, cfg)?;
    let mut warnings = skip_warnings(&sil.skipped, "c2");
    let (value, clamped) = rowwise_topk_median(&sil.values, &sil.usable, 0..ds.n_layers(), cfg.k_layer)?
        .ok_or(MeasureError::NoUsableSubclasses { measure: "c2" })?;
    if clamped {
        warnings.push(format!(
            "c2: k_layer {} clamped to {} layers",
            cfg.k_layer,
            ds.n_layers()
        ));
    }
    Ok(Measured {
        value,
        warnings,
        degenerate: false,
        unreliable: unreliable(sil.skipped.len(), sil.usable.len()),
    })
}

pub fn compute_c3(ds: &ActivationDataset, cfg: &MeasureConfig) -> Result<Measured, MeasureError> {
    cfg.validate()?;
    let ratios = variance_ratio_matrix(ds, cfg.epsilon)?;
    let (value, clamped) = rowwise_topk_mean(&ratios.values, 0..ds.n_neurons(), cfg.k_neuron)?;
    let mut warnings = Vec::new();
    if clamped {
        warnings.push(format!(
            "c3: k_neuron {} clamped to {} available neurons",
            cfg.k_neuron,
            ds.n_neurons()
        ));
    }
    Ok(Measured { value, warnings, degenerate: ratios.degenerate, unreliable: false })
}

pub fn compute_c4(ds: &ActivationDataset, cfg: &MeasureConfig) -> Result<Measured, MeasureError> {
    cfg.validate()?;
    let ratios = distance_ratio_matrix(ds, cfg)?;
    let (value, clamped) = rowwise_topk_mean(&ratios.values, 0..ds.n_layers(), cfg.k_layer)?;
    let mut warnings = Vec::new();
    if clamped {
        warnings.push(format!(
            "c4: k_layer {} clamped to {} layers",
            cfg.k_layer,
            ds.n_layers()
        ));
    }
    Ok(Measured { value, warnings, degenerate: ratios.degenerate, unreliable: false })
}

/// One layer's restriction of every measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer_index: usize,
    pub name: String,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub c3: Option<f64>,
    pub c4: Option<f64>,
}

/// Best selectivity over all neurons for one subclass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubclassSelectivity {
    pub subclass: usize,
    pub selectivity: f64,
    pub neuron: usize,
}

/// Full JSON-serializable measurement report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureResult {
    pub model_id: String,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub c3: Option<f64>,
    pub c4: Option<f64>,
    pub per_layer: Option<Vec<LayerProfile>>,
    pub per_subclass_selectivity: Option<Vec<SubclassSelectivity>>,
    pub config: MeasureConfig,
    pub warnings: Vec<String>,
    pub degenerate: bool,
    pub unreliable: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MeasureOptions {
    pub per_layer: bool,
    pub selectivity_distribution: bool,
}

/// Compute every applicable measure (c1/c2 only when subclass labels are
/// present), optionally with per-layer profiles and the per-subclass
/// selectivity distribution, sharing intermediate tables across all of it.
pub fn compute_all(
    ds: &ActivationDataset,
    cfg: &MeasureConfig,
    opts: &MeasureOptions,
) -> Result<MeasureResult, MeasureError> {
    cfg.validate()?;
    let hierarchy = ds.labels.has_hierarchy();
    if opts.selectivity_distribution && !hierarchy {
        return Err(MeasureError::MissingHierarchy { measure: "selectivity distribution" });
    }

    let mut warnings: Vec<String> = Vec::new();
    let mut degenerate = false;
    let mut unreliable_any = false;

    let sel = if hierarchy { Some(selectivity_matrix(ds, cfg.epsilon)?) } else { None };
    let sil = if hierarchy { Some(silhouette_matrix(ds, cfg)?) } else { None };
    let var_ratios = variance_ratio_matrix(ds, cfg.epsilon)?;
    let dist_ratios = distance_ratio_matrix(ds, cfg)?;
    degenerate |= var_ratios.degenerate | dist_ratios.degenerate;

    let n_neurons = ds.n_neurons();
    let n_layers = ds.n_layers();

    let mut c1 = None;
    let mut c2 = None;
    if let (Some(sel), Some(sil)) = (&sel, &sil) {
        degenerate |= sel.degenerate;
        unreliable_any |= unreliable(sel.skipped.len(), sel.usable.len())
            || unreliable(sil.skipped.len(), sil.usable.len());
        warnings.extend(skip_warnings(&sel.skipped, "c1"));
        warnings.extend(skip_warnings(&sil.skipped, "c2"));

        let (v, clamped) = rowwise_topk_median(&sel.values, &sel.usable, 0..n_neurons, cfg.k_neuron)?
            .ok_or(MeasureError::NoUsableSubclasses { measure: "c1" })?;
        if clamped {
            warnings.push(format!(
                "c1: k_neuron {} clamped to {n_neurons} available neurons",
                cfg.k_neuron
            ));
        }
        c1 = Some(v);

        let (v, clamped) = rowwise_topk_median(&sil.values, &sil.usable, 0..n_layers, cfg.k_layer)?
            .ok_or(MeasureError::NoUsableSubclasses { measure: "c2" })?;
        if clamped {
            warnings.push(format!("c2: k_layer {} clamped to {n_layers} layers", cfg.k_layer));
        }
        c2 = Some(v);
    } else {
        warnings.push("c1/c2 unavailable: dump has no subclass labels".into());
    }

    let (c3, clamped) = rowwise_topk_mean(&var_ratios.values, 0..n_neurons, cfg.k_neuron)?;
    if clamped {
        warnings.push(format!(
            "c3: k_neuron {} clamped to {n_neurons} available neurons",
            cfg.k_neuron
        ));
    }
    let (c4, clamped) = rowwise_topk_mean(&dist_ratios.values, 0..n_layers, cfg.k_layer)?;
    if clamped {
        warnings.push(format!("c4: k_layer {} clamped to {n_layers} layers", cfg.k_layer));
    }

    let per_layer = if opts.per_layer {
        let mut profiles = Vec::with_capacity(n_layers);
        for (l, block) in ds.layers.iter().enumerate() {
            let cols = block.neuron_offset..block.neuron_offset + block.width();
            let k_profile = PROFILE_TOP_K.min(block.width());
            let (pc1, pc2) = match (&sel, &sil) {
                (Some(sel), Some(sil)) => (
                    rowwise_topk_median(&sel.values, &sel.usable, cols.clone(), k_profile)?
                        .map(|(v, _)| v),
                    rowwise_topk_median(&sil.values, &sil.usable, l..l + 1, 1)?.map(|(v, _)| v),
                ),
                _ => (None, None),
            };
            let (pc3, _) = rowwise_topk_mean(&var_ratios.values, cols, k_profile)?;
            let (pc4, _) = rowwise_topk_mean(&dist_ratios.values, l..l + 1, 1)?;
            profiles.push(LayerProfile {
                layer_index: block.layer_index,
                name: block.name.clone(),
                c1: pc1,
                c2: pc2,
                c3: Some(pc3),
                c4: Some(pc4),
            });
        }
        Some(profiles)
    } else {
        None
    };

    let per_subclass_selectivity = if opts.selectivity_distribution {
        Some(distribution_from(sel.as_ref().expect("hierarchy checked")))
    } else {
        None
    };

    // Deduplicate while keeping deterministic order.
    let mut seen = BTreeSet::new();
    warnings.retain(|w| seen.insert(w.clone()));

    Ok(MeasureResult {
        model_id: ds.model_id.clone(),
        c1,
        c2,
        c3: Some(c3),
        c4: Some(c4),
        per_layer,
        per_subclass_selectivity,
        config: cfg.clone(),
        warnings,
        degenerate,
        unreliable: unreliable_any,
    })
}

/// Per-layer restriction of all four measures. Neuron-level measures use
/// the top min(5, width) neurons of the layer; layer-level measures use
/// k = 1 on that single layer.
pub fn per_layer_profile(
    ds: &ActivationDataset,
    cfg: &MeasureConfig,
) -> Result<Vec<LayerProfile>, MeasureError> {
    let result = compute_all(ds, cfg, &MeasureOptions { per_layer: true, ..Default::default() })?;
    Ok(result.per_layer.expect("requested"))
}

fn distribution_from(sel: &matrices::SelectivityMatrix) -> Vec<SubclassSelectivity> {
    let mut out = Vec::new();
    for (i, row) in sel.values.rows().into_iter().enumerate() {
        if !sel.usable[i] {
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        let mut neuron = 0;
        for (n, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                neuron = n;
            }
        }
        out.push(SubclassSelectivity { subclass: i, selectivity: best, neuron });
    }
    out
}

/// Best neuron per subclass (k = 1 selectivity), ties broken toward the
/// lowest neuron index.
pub fn selectivity_distribution(
    ds: &ActivationDataset,
    cfg: &MeasureConfig,
) -> Result<Vec<SubclassSelectivity>, MeasureError> {
    cfg.validate()?;
    let sel = selectivity_matrix(ds, cfg.epsilon)?;
    Ok(distribution_from(&sel))
}

#[cfg(test)]
mod tests;
