//! Sweep tables: one row per trained model, read and written as CSV or
//! JSON. The CSV column layout is `model_id, <axes...>, train_accuracy,
//! test_accuracy, <measures...>`; floats use the shortest representation
//! that round-trips, so write-then-read is lossless.

use super::{KendallReport, RankingError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelRecord {
    pub model_id: String,
    /// Axis name -> value. Values are compared as strings when grouping.
    pub hyperparams: BTreeMap<String, String>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub measures: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepTable {
    /// Declared hyperparameter axes, in presentation order. Coupled
    /// hyperparameters varied together form a single composite axis.
    pub axes: Vec<String>,
    pub records: Vec<ModelRecord>,
}

impl SweepTable {
    pub fn validate(&self) -> Result<(), RankingError> {
        if self.records.is_empty() {
            return Err(RankingError::EmptyTable);
        }
        for axis in &self.axes {
            let mut values = BTreeSet::new();
            for r in &self.records {
                match r.hyperparams.get(axis) {
                    Some(v) => {
                        values.insert(v.as_str());
                    }
                    None => {
                        return Err(RankingError::MissingAxis {
                            model_id: r.model_id.clone(),
                            axis: axis.clone(),
                        })
                    }
                }
            }
            if values.len() < 2 {
                return Err(RankingError::ConstantAxis { axis: axis.clone() });
            }
        }
        for r in &self.records {
            for (name, acc) in [
                ("train_accuracy", r.train_accuracy),
                ("test_accuracy", r.test_accuracy),
            ] {
                if !acc.is_finite() || !(0.0..=1.0).contains(&acc) {
                    let _ = name;
                    return Err(RankingError::AccuracyRange {
                        model_id: r.model_id.clone(),
                        value: acc,
                    });
                }
            }
        }
        Ok(())
    }

    /// Measure names, which must be identical on every record.
    fn measure_columns(&self) -> Result<Vec<String>, RankingError> {
        let first: Vec<String> = match self.records.first() {
            Some(r) => r.measures.keys().cloned().collect(),
            None => return Err(RankingError::EmptyTable),
        };
        for r in &self.records {
            let keys: Vec<String> = r.measures.keys().cloned().collect();
            if keys != first {
                return Err(RankingError::TableParse(format!(
                    "model {} has measure columns {:?}, expected {:?}",
                    r.model_id, keys, first
                )));
            }
        }
        Ok(first)
    }

    pub fn to_csv_string(&self) -> Result<String, RankingError> {
        let measures = self.measure_columns()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model_id".to_string()];
        header.extend(self.axes.iter().cloned());
        header.push("train_accuracy".into());
        header.push("test_accuracy".into());
        header.extend(measures.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![r.model_id.clone()];
            for axis in &self.axes {
                let v = r.hyperparams.get(axis).ok_or_else(|| RankingError::MissingAxis {
                    model_id: r.model_id.clone(),
                    axis: axis.clone(),
                })?;
                row.push(v.clone());
            }
            row.push(format!("{}", r.train_accuracy));
            row.push(format!("{}", r.test_accuracy));
            for m in &measures {
                row.push(format!("{}", r.measures[m]));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| RankingError::TableParse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| RankingError::TableParse(e.to_string()))
    }

    pub fn from_csv_str(text: &str) -> Result<Self, RankingError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(|s| s.to_string())
            .collect();
        if header.first().map(String::as_str) != Some("model_id") {
            return Err(RankingError::TableParse(
                "first column must be model_id".into(),
            ));
        }
        let ta = header
            .iter()
            .position(|h| h == "train_accuracy")
            .ok_or_else(|| RankingError::TableParse("no train_accuracy column".into()))?;
        if header.get(ta + 1).map(String::as_str) != Some("test_accuracy") {
            return Err(RankingError::TableParse(
                "test_accuracy must follow train_accuracy".into(),
            ));
        }
        let axes: Vec<String> = header[1..ta].to_vec();
        let measure_names: Vec<String> = header[ta + 2..].to_vec();

        let parse = |s: &str, what: &str, row: usize| -> Result<f64, RankingError> {
            s.parse::<f64>().map_err(|_| {
                RankingError::TableParse(format!("row {row}: bad {what} value {s:?}"))
            })
        };

        let mut records = Vec::new();
        for (i, result) in reader.records().enumerate() {
            let row = result.map_err(csv_err)?;
            if row.len() != header.len() {
                return Err(RankingError::TableParse(format!(
                    "row {}: {} fields, expected {}",
                    i + 1,
                    row.len(),
                    header.len()
                )));
            }
            let mut hyperparams = BTreeMap::new();
            for (j, axis) in axes.iter().enumerate() {
                hyperparams.insert(axis.clone(), row[1 + j].to_string());
            }
            let mut measures = BTreeMap::new();
            for (j, m) in measure_names.iter().enumerate() {
                measures.insert(m.clone(), parse(&row[ta + 2 + j], m, i + 1)?);
            }
            records.push(ModelRecord {
                model_id: row[0].to_string(),
                hyperparams,
                train_accuracy: parse(&row[ta], "train_accuracy", i + 1)?,
                test_accuracy: parse(&row[ta + 1], "test_accuracy", i + 1)?,
                measures,
            });
        }
        Ok(SweepTable { axes, records })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), RankingError> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, RankingError> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String, RankingError> {
        serde_json::to_string_pretty(self).map_err(|e| RankingError::TableParse(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self, RankingError> {
        serde_json::from_str(text).map_err(|e| RankingError::TableParse(e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<(), RankingError> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self, RankingError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

fn csv_err(e: csv::Error) -> RankingError {
    RankingError::TableParse(e.to_string())
}

/// Matrix CSV over several measures' reports: one row per measure, one
/// column per axis plus the total. Axes with no valid group are blank.
pub fn reports_to_csv(
    reports: &[(String, KendallReport)],
    axes: &[String],
) -> Result<String, RankingError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["measure".to_string()];
    header.extend(axes.iter().cloned());
    header.push("total_score".into());
    w.write_record(&header).map_err(csv_err)?;
    for (name, report) in reports {
        let mut row = vec![name.clone()];
        for axis in axes {
            row.push(match report.per_axis.get(axis) {
                Some(v) => format!("{v}"),
                None => String::new(),
            });
        }
        row.push(format!("{}", report.total_score));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| RankingError::TableParse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| RankingError::TableParse(e.to_string()))
}
