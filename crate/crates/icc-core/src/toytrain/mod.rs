//! Desk-scale training subjects: synthetic clustered datasets, a small
//! MLP trainer with per-layer normalization, activation dumping, and a
//! grid-sweep harness.
//!
//! The synthetic generator realizes the label structure the measures care
//! about — every training class is a union of tighter sample clusters — so
//! a trained toy model exhibits the same intraclass geometry the measures
//! are designed to detect, at a scale where a full sweep runs in minutes.

mod net;
mod sweep;
mod train;


pub use net::ToyNet;
pub use sweep::{run_sweep, GridAxis, SweepFailure, SweepGrid, SweepOutcome};
pub use train::{dump_activations, train, EpochStat, TrainedModel};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measures::MeasureError;
use crate::store::{LabelHierarchy, StoreError};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid config: {what}")]
    InvalidConfig { what: String },
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("no snapshot recorded for epoch {epoch}")]
    MissingSnapshot { epoch: usize },
    #[error("sweep grid declares no varying axis (need >=2 values somewhere)")]
    DegenerateGrid,
    #[error("sweep axis {axis:?} value {index} cannot patch the config: {message}")]
    BadAxisValue { axis: String, index: usize, message: String },
    #[error("every model in the sweep failed; first failure: {first}")]
    AllModelsFailed { first: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// How synthetic samples are labelled for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Train on the coarse label; the fine clusters stay hidden structure
    /// (and are recorded in the dump's label hierarchy).
    SuperclassAsClass,
    /// Train directly on the fine clusters; no hierarchy in the dump.
    SubclassAsClass,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_superclasses: usize,
    pub subclasses_per_superclass: usize,
    /// Training samples per subclass; the test split draws the same number
    /// of fresh points per subclass.
    pub samples_per_subclass: usize,
    pub input_dim: usize,
    /// Isotropic noise std around each subclass center.
    pub cluster_spread: f64,
    /// Std of subclass-center offsets from their superclass center.
    pub subclass_separation: f64,
    /// Std of superclass-center positions around the origin.
    pub superclass_separation: f64,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |what: &str| Err(ToyError::InvalidConfig { what: what.into() });
        if self.n_superclasses == 0
            || self.subclasses_per_superclass == 0
            || self.samples_per_subclass == 0
            || self.input_dim == 0
        {
            return bad("all synthetic counts must be >= 1");
        }
        for (name, v) in [
            ("cluster_spread", self.cluster_spread),
            ("subclass_separation", self.subclass_separation),
            ("superclass_separation", self.superclass_separation),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ToyError::InvalidConfig {
                    what: format!("{name} must be positive and finite, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// One split of a synthetic dataset: inputs plus the labels used both as
/// training targets and as the dump's label sidecar.
#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub x: Array2<f64>,
    pub labels: LabelHierarchy,
}

impl ToyDataset {
    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }
}

/// Draws subclass-cluster data: superclass centers around the origin,
/// subclass centers around their superclass, samples around their subclass.
/// Train and test points are disjoint draws from the same clusters; the
/// whole construction is a pure function of the spec.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(ToyDataset, ToyDataset), ToyError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_subs = spec.n_superclasses * spec.subclasses_per_superclass;
    let dim = spec.input_dim;
    let normal = |scale: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    };

    let super_centers: Vec<Vec<f64>> = (0..spec.n_superclasses)
        .map(|_| normal(spec.superclass_separation, &mut rng))
        .collect();
    let sub_centers: Vec<Vec<f64>> = (0..n_subs)
        .map(|i| {
            let base = &super_centers[i / spec.subclasses_per_superclass];
            let offset = normal(spec.subclass_separation, &mut rng);
            base.iter().zip(&offset).map(|(b, o)| b + o).collect()
        })
        .collect();

    let per_sub = spec.samples_per_subclass;
    let total = n_subs * per_sub;
    let draw_split = |rng: &mut ChaCha8Rng| -> Array2<f64> {
        let mut x = Array2::zeros((total, dim));
        for sub in 0..n_subs {
            for s in 0..per_sub {
                let noise = normal(spec.cluster_spread, rng);
                for d in 0..dim {
                    x[[sub * per_sub + s, d]] = sub_centers[sub][d] + noise[d];
                }
            }
        }
        x
    };
    // Train points first, then test points: disjoint by construction.
    let train_x = draw_split(&mut rng);
    let test_x = draw_split(&mut rng);

    let sub_of: Vec<i64> = (0..total).map(|s| (s / per_sub) as i64).collect();
    let labels = match spec.label_mode {
        LabelMode::SuperclassAsClass => {
            let class_of: Vec<i64> = sub_of
                .iter()
                .map(|&sc| sc / spec.subclasses_per_superclass as i64)
                .collect();
            let sup_of_sub: Vec<i64> = (0..n_subs)
                .map(|i| (i / spec.subclasses_per_superclass) as i64)
                .collect();
            LabelHierarchy::from_raw(class_of, Some(sub_of), Some(sup_of_sub))
        }
        LabelMode::SubclassAsClass => LabelHierarchy::from_raw(sub_of, None, None),
    }?;

    Ok((
        ToyDataset { x: train_x, labels: labels.clone() },
        ToyDataset { x: test_x, labels },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Plain mini-batch gradient descent.
    PlainGradient,
    /// Classical momentum with coefficient 0.9.
    Momentum,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    /// Hidden-layer count.
    pub depth: usize,
    /// Neurons per hidden layer.
    pub width: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub dropout_rate: f64,
    /// Additive input jitter (std 0.1) as a data-augmentation stand-in.
    #[serde(default)]
    pub augment: bool,
    pub optimizer: Optimizer,
    pub epochs: usize,
    /// Epochs at whose start the learning rate is multiplied by 0.2.
    #[serde(default)]
    pub lr_drop_epochs: Vec<usize>,
    pub seed: u64,
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |what: String| Err(ToyError::InvalidConfig { what });
        if self.depth == 0 || self.width == 0 || self.epochs == 0 {
            return bad("depth, width, and epochs must all be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2 (batch statistics)".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }
}
