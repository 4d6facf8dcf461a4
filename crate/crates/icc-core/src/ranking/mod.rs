//! Rank-correlation scoring of model sweeps.
//!
//! `kendall_tau` is the tie-corrected tau-b statistic. `granulated_kendall`
//! averages tau over record groups in which exactly one hyperparameter axis
//! varies (all other axes held fixed), then averages the per-axis scores
//! into a total. `k_sensitivity_sweep` recomputes a measure under different
//! top-k widths and reports how the total score moves.

mod table;

pub use table::{reports_to_csv, ModelRecord, SweepTable};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum RankingError {
    #[error("input lengths differ: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("need at least 2 points, got {got}")]
    TooFewPoints { got: usize },
    #[error("non-finite value in {which}")]
    NonFinite { which: String },
    #[error("sweep table has no records")]
    EmptyTable,
    #[error("model {model_id} is missing hyperparameter axis {axis}")]
    MissingAxis { model_id: String, axis: String },
    #[error("axis {axis} never varies across the table")]
    ConstantAxis { axis: String },
    #[error("model {model_id} has no measure named {measure}")]
    MissingMeasure { model_id: String, measure: String },
    #[error("unknown ranking target {name} (expected test_accuracy or train_accuracy)")]
    UnknownTarget { name: String },
    #[error("no axis produced a valid group for measure {measure}")]
    NoValidGroups { measure: String },
    #[error("no activation dump found for model {model_id}")]
    MissingDump { model_id: String },
    #[error("accuracy {value} for model {model_id} is outside [0,1]")]
    AccuracyRange { model_id: String, value: f64 },
    #[error("sweep table parse error: {0}")]
    TableParse(String),
    #[error("reading table: {0}")]
    Io(#[from] std::io::Error),
    #[error("computing measure for model {model_id}: {source}")]
    Measure {
        model_id: String,
        source: crate::measures::MeasureError,
    },
}

/// Tie-corrected Kendall rank correlation (tau-b).
///
/// Returns `Ok(None)` when tau is undefined because one of the inputs is
/// completely tied (a zero term under the square root).
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<Option<f64>, RankingError> {
    if x.len() != y.len() {
        return Err(RankingError::LengthMismatch { x: x.len(), y: y.len() });
    }
    let n = x.len();
    if n < 2 {
        return Err(RankingError::TooFewPoints { got: n });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(RankingError::NonFinite { which: "x".into() });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(RankingError::NonFinite { which: "y".into() });
    }

    // Knight's O(n log n) scheme: sort by (x, y), count tie runs, then count
    // strict inversions of y with a merge sort. Negative zeros are folded
    // into positive zeros first; otherwise the total order would split a
    // numeric tie across -0.0/+0.0 and order its y values descending,
    // manufacturing inversions out of tied pairs.
    let x: Vec<f64> = x.iter().map(|v| v + 0.0).collect();
    let y: Vec<f64> = y.iter().map(|v| v + 0.0).collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));

    let pairs = |t: u64| t * (t - 1) / 2;
    let count_runs = |key: &dyn Fn(usize, usize) -> bool| -> u64 {
        let mut total = 0u64;
        let mut run = 1u64;
        for w in idx.windows(2) {
            if key(w[0], w[1]) {
                run += 1;
            } else {
                total += pairs(run);
                run = 1;
            }
        }
        total + pairs(run)
    };
    let t_x = count_runs(&|a, b| x[a] == x[b]);
    let t_xy = count_runs(&|a, b| x[a] == x[b] && y[a] == y[b]);

    let mut ys_sorted: Vec<f64> = y.to_vec();
    ys_sorted.sort_by(f64::total_cmp);
    let mut t_y = 0u64;
    let mut run = 1u64;
    for w in ys_sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            t_y += pairs(run);
            run = 1;
        }
    }
    t_y += pairs(run);

    let mut ys_in_x_order: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let swaps = count_strict_inversions(&mut ys_in_x_order);

    let p = pairs(n as u64);
    if p == t_x || p == t_y {
        return Ok(None);
    }
    let num = p as i128 - t_x as i128 - t_y as i128 + t_xy as i128 - 2 * swaps as i128;
    let denom = ((p - t_x) as f64 * (p - t_y) as f64).sqrt();
    Ok(Some((num as f64 / denom).clamp(-1.0, 1.0)))
}

/// Number of pairs (i, j) with i < j and v[i] > v[j] (strict; equal
/// elements do not count). Sorts `v` as a side effect.
fn count_strict_inversions(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mut buf = v.to_vec();
    merge_count(v, &mut buf)
}

fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let (left, right) = v.split_at_mut(mid);
    let (bl, br) = buf.split_at_mut(mid);
    let mut inv = merge_count(left, bl) + merge_count(right, br);
    let (mut i, mut j, mut k) = (0, 0, 0);
    while i < left.len() && j < right.len() {
        if right[j] < left[i] {
            inv += (left.len() - i) as u64;
            buf[k] = right[j];
            j += 1;
        } else {
            buf[k] = left[i];
            i += 1;
        }
        k += 1;
    }
    while i < left.len() {
        buf[k] = left[i];
        i += 1;
        k += 1;
    }
    while j < right.len() {
        buf[k] = right[j];
        j += 1;
        k += 1;
    }
    v.copy_from_slice(&buf[..n]);
    inv
}

/// Granulated Kendall report for one measure against one target column.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KendallReport {
    /// Mean within-group tau per axis; axes with no valid group are absent.
    pub per_axis: BTreeMap<String, f64>,
    /// Mean of the per-axis values (axes with at least one valid group).
    pub total_score: f64,
    /// Number of groups per axis in which tau was defined.
    pub group_counts: BTreeMap<String, usize>,
    /// Number of groups per axis excluded because tau was undefined there.
    pub undefined_groups: BTreeMap<String, usize>,
}

fn target_value(record: &ModelRecord, target: &str) -> Result<f64, RankingError> {
    match target {
        "test_accuracy" => Ok(record.test_accuracy),
        "train_accuracy" => Ok(record.train_accuracy),
        _ => Err(RankingError::UnknownTarget { name: target.to_string() }),
    }
}

/// Granulated Kendall protocol: for each declared axis, partition the
/// records into groups that agree exactly on every *other* axis, compute
/// tau(measure, target) within each group of size >= 2 in which the axis
/// actually varies, average the defined taus per axis, and average the
/// per-axis scores into the total.
pub fn granulated_kendall(
    table: &SweepTable,
    measure_name: &str,
    target: &str,
) -> Result<KendallReport, RankingError> {
    table.validate()?;
    for r in &table.records {
        if !r.measures.contains_key(measure_name) {
            return Err(RankingError::MissingMeasure {
                model_id: r.model_id.clone(),
                measure: measure_name.to_string(),
            });
        }
    }

    let mut per_axis = BTreeMap::new();
    let mut group_counts = BTreeMap::new();
    let mut undefined_groups = BTreeMap::new();
    let mut axis_totals: Vec<f64> = Vec::new();

    for axis in &table.axes {
        // Key a record by the values of every axis other than `axis`.
        let mut groups: BTreeMap<Vec<&str>, Vec<usize>> = BTreeMap::new();
        for (i, r) in table.records.iter().enumerate() {
            let key: Vec<&str> = table
                .axes
                .iter()
                .filter(|a| *a != axis)
                .map(|a| r.hyperparams[a].as_str())
                .collect();
            groups.entry(key).or_default().push(i);
        }

        let mut taus = Vec::new();
        let mut undefined = 0usize;
        for members in groups.values() {
            if members.len() < 2 {
                continue;
            }
            let distinct: std::collections::BTreeSet<&str> = members
                .iter()
                .map(|&i| table.records[i].hyperparams[axis].as_str())
                .collect();
            if distinct.len() < 2 {
                continue;
            }
            let xs: Vec<f64> = members
                .iter()
                .map(|&i| table.records[i].measures[measure_name])
                .collect();
            let ys: Result<Vec<f64>, _> = members
                .iter()
                .map(|&i| target_value(&table.records[i], target))
                .collect();
            match kendall_tau(&xs, &ys?)? {
                Some(tau) => taus.push(tau),
                None => undefined += 1,
            }
        }

        group_counts.insert(axis.clone(), taus.len());
        undefined_groups.insert(axis.clone(), undefined);
        if !taus.is_empty() {
            let mean = taus.iter().sum::<f64>() / taus.len() as f64;
            per_axis.insert(axis.clone(), mean);
            axis_totals.push(mean);
        }
    }

    if axis_totals.is_empty() {
        return Err(RankingError::NoValidGroups { measure: measure_name.to_string() });
    }
    let total_score = axis_totals.iter().sum::<f64>() / axis_totals.len() as f64;
    Ok(KendallReport { per_axis, total_score, group_counts, undefined_groups })
}

/// Which measure a k-sensitivity sweep recomputes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KSweepMeasure {
    C1,
    C3,
}

impl KSweepMeasure {
    pub fn name(self) -> &'static str {
        match self {
            KSweepMeasure::C1 => "c1",
            KSweepMeasure::C3 => "c3",
        }
    }
}

/// One point of a k-sensitivity sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KSweepPoint {
    pub k: usize,
    /// True when k exceeded some model's neuron count and was clamped.
    pub clamped: bool,
    /// Total granulated score, or None when no axis had a valid group.
    pub total_score: Option<f64>,
}

/// Recompute `measure` on every dump for each k in `ks`, then score the
/// resulting table. Dumps are matched to records by model id.
pub fn k_sensitivity_sweep(
    dumps: &[crate::store::ActivationDataset],
    table: &SweepTable,
    ks: &[usize],
    measure: KSweepMeasure,
    base: &crate::measures::MeasureConfig,
) -> Result<Vec<KSweepPoint>, RankingError> {
    use rayon::prelude::*;

    table.validate()?;
    let by_id: BTreeMap<&str, &crate::store::ActivationDataset> =
        dumps.iter().map(|d| (d.model_id.as_str(), d)).collect();
    for r in &table.records {
        if !by_id.contains_key(r.model_id.as_str()) {
            return Err(RankingError::MissingDump { model_id: r.model_id.clone() });
        }
    }

    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        let per_model: Vec<Result<(String, f64, bool), RankingError>> = table
            .records
            .par_iter()
            .map(|r| {
                let ds = by_id[r.model_id.as_str()];
                let clamped = k > ds.n_neurons();
                let mut cfg = base.clone();
                cfg.k_neuron = k.min(ds.n_neurons()).max(1);
                let value = match measure {
                    KSweepMeasure::C1 => crate::measures::compute_c1(ds, &cfg),
                    KSweepMeasure::C3 => crate::measures::compute_c3(ds, &cfg),
                }
                .map_err(|source| RankingError::Measure {
                    model_id: r.model_id.clone(),
                    source,
                })?;
                Ok((r.model_id.clone(), value.value, clamped))
            })
            .collect();

        let mut retable = table.clone();
        let mut clamped_any = false;
        for (record, outcome) in retable.records.iter_mut().zip(per_model) {
            let (id, value, clamped) = outcome?;
            debug_assert_eq!(record.model_id, id);
            record.measures.insert(measure.name().to_string(), value);
            clamped_any |= clamped;
        }

        let total = match granulated_kendall(&retable, measure.name(), "test_accuracy") {
            Ok(report) => Some(report.total_score),
            Err(RankingError::NoValidGroups { .. }) => None,
            Err(e) => return Err(e),
        };
        points.push(KSweepPoint { k, clamped: clamped_any, total_score: total });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn perfect_concordance_and_discordance() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), Some(1.0));
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), Some(-1.0));
    }

    #[test]
    fn one_discordant_pair() {
        // Pairs: (1,2) and (1,3) concordant, (2,3) discordant -> 1/3.
        let tau = kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap().unwrap();
        assert_eq!(tau, 1.0 / 3.0);
    }

    #[test]
    fn tie_in_x_uses_tau_b_denominator() {
        // One tied pair in x: C=2, D=0, P=3, T_x=1 -> 2/sqrt(2*3).
        let tau = kendall_tau(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap().unwrap();
        assert_abs_diff_eq!(tau, 2.0 / 6.0f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn undefined_when_one_side_constant() {
        assert_eq!(kendall_tau(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap(), None);
        assert_eq!(kendall_tau(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), None);
    }

    #[test]
    fn input_validation() {
        assert!(matches!(
            kendall_tau(&[1.0], &[1.0]).unwrap_err(),
            RankingError::TooFewPoints { got: 1 }
        ));
        assert!(matches!(
            kendall_tau(&[1.0, 2.0], &[1.0]).unwrap_err(),
            RankingError::LengthMismatch { .. }
        ));
        assert!(matches!(
            kendall_tau(&[1.0, f64::NAN], &[1.0, 2.0]).unwrap_err(),
            RankingError::NonFinite { .. }
        ));
    }

    fn record(
        id: &str,
        axes: &[(&str, &str)],
        measure: f64,
        test_acc: f64,
    ) -> ModelRecord {
        ModelRecord {
            model_id: id.to_string(),
            hyperparams: axes
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            train_accuracy: 1.0,
            test_accuracy: test_acc,
            measures: [("m".to_string(), measure)].into_iter().collect(),
        }
    }

    /// 3x2 factorial with hand-enumerated pair counts.
    fn factorial_table() -> SweepTable {
        SweepTable {
            axes: vec!["alpha".into(), "beta".into()],
            records: vec![
                record("m1", &[("alpha", "a1"), ("beta", "b1")], 0.1, 0.50),
                record("m2", &[("alpha", "a2"), ("beta", "b1")], 0.2, 0.60),
                record("m3", &[("alpha", "a3"), ("beta", "b1")], 0.3, 0.55),
                record("m4", &[("alpha", "a1"), ("beta", "b2")], 0.6, 0.70),
                record("m5", &[("alpha", "a2"), ("beta", "b2")], 0.5, 0.80),
                record("m6", &[("alpha", "a3"), ("beta", "b2")], 0.4, 0.90),
            ],
        }
    }

    #[test]
    fn factorial_fixture_matches_hand_computation() {
        let report = granulated_kendall(&factorial_table(), "m", "test_accuracy").unwrap();
        // alpha, group b1: measures rise 0.1,0.2,0.3 while targets go
        // 0.50,0.60,0.55 -> 2 concordant, 1 discordant -> tau 1/3.
        // alpha, group b2: measures fall while targets rise -> tau -1.
        let alpha = (1.0 / 3.0 + -1.0) / 2.0;
        // beta: three 2-point groups (a1, a2, a3), all concordant -> 1.
        assert_eq!(report.per_axis["alpha"], alpha);
        assert_eq!(report.per_axis["beta"], 1.0);
        assert_eq!(report.total_score, (alpha + 1.0) / 2.0);
        assert_eq!(report.group_counts["alpha"], 2);
        assert_eq!(report.group_counts["beta"], 3);
        assert_eq!(report.undefined_groups["alpha"], 0);
        assert_eq!(report.undefined_groups["beta"], 0);
    }

    #[test]
    fn measure_equal_to_target_scores_one() {
        let mut table = factorial_table();
        for r in &mut table.records {
            r.measures.insert("m".into(), r.test_accuracy);
        }
        let report = granulated_kendall(&table, "m", "test_accuracy").unwrap();
        assert_eq!(report.per_axis["alpha"], 1.0);
        assert_eq!(report.per_axis["beta"], 1.0);
        assert_eq!(report.total_score, 1.0);

        for r in &mut table.records {
            r.measures.insert("m".into(), -r.test_accuracy);
        }
        let report = granulated_kendall(&table, "m", "test_accuracy").unwrap();
        assert_eq!(report.total_score, -1.0);
    }

    #[test]
    fn constant_measure_has_no_valid_groups() {
        let mut table = factorial_table();
        for r in &mut table.records {
            r.measures.insert("m".into(), 7.0);
        }
        let err = granulated_kendall(&table, "m", "test_accuracy").unwrap_err();
        assert!(matches!(err, RankingError::NoValidGroups { .. }));
    }

    #[test]
    fn undefined_groups_are_counted_but_excluded() {
        // beta groups stay informative; alpha's b1 group gets a constant
        // measure, leaving one valid and one undefined group on alpha.
        let mut table = factorial_table();
        for r in &mut table.records {
            if r.hyperparams["beta"] == "b1" {
                r.measures.insert("m".into(), 0.25);
            }
        }
        let report = granulated_kendall(&table, "m", "test_accuracy").unwrap();
        assert_eq!(report.group_counts["alpha"], 1);
        assert_eq!(report.undefined_groups["alpha"], 1);
        assert_eq!(report.per_axis["alpha"], -1.0);
    }

    #[test]
    fn missing_measure_is_reported() {
        let table = factorial_table();
        let err = granulated_kendall(&table, "zz", "test_accuracy").unwrap_err();
        assert!(matches!(err, RankingError::MissingMeasure { .. }));
    }

    #[test]
    fn unknown_target_is_rejected() {
        let err = granulated_kendall(&factorial_table(), "m", "validation").unwrap_err();
        assert!(matches!(err, RankingError::UnknownTarget { .. }));
    }
}
