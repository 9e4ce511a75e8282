//! Predicting a held-out dimension from partial annotations.
//!
//! Every observed rating `a_k[d']` with `d' != target` contributes one linear
//! equation `F_k[d', :] · a = a_k[d']` in the unknown latent vector `a`. The
//! stacked system is solved by ridge-regularized normal equations and the
//! target component of the solution is the prediction. Annotator transforms
//! come from a model fitted on a different (e.g. word-level) dataset.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::model::{
    AnnotationRecord, Dataset, FusionModel, ModelError, ValidationIssue, ValidationMode,
};

/// Relative eigenvalue threshold below which the unregularized normal matrix
/// counts as singular.
pub const SINGULAR_REL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("ridge must be >= 0, got {0}")]
    BadRidge(f64),
    #[error("record ({instance_id}, {annotator_id}) has no observed rating")]
    AllMissingRecord {
        instance_id: String,
        annotator_id: String,
    },
    #[error("instance `{0}` has no usable equations (no observed non-target rating from a known annotator)")]
    NoUsableEquations(String),
    #[error("invalid prediction dataset: {}", join_issues(.0))]
    InvalidDataset(Vec<ValidationIssue>),
}

fn join_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionConfig {
    pub target_dim: String,
    pub ridge: f64,
    /// Scale each equation by `1 / tau_k`.
    pub weight_by_noise: bool,
}

impl PredictionConfig {
    pub fn new(target_dim: impl Into<String>) -> Self {
        Self {
            target_dim: target_dim.into(),
            ridge: 1e-6,
            weight_by_noise: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionFlag {
    WellPosed,
    /// The unregularized normal matrix was singular; the ridge term picked the
    /// minimum-norm solution.
    RidgeResolved,
}

impl fmt::Display for ConditionFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConditionFlag::WellPosed => "well-posed",
            ConditionFlag::RidgeResolved => "ridge-resolved",
        })
    }
}

impl std::str::FromStr for ConditionFlag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "well-posed" => Ok(ConditionFlag::WellPosed),
            "ridge-resolved" => Ok(ConditionFlag::RidgeResolved),
            other => Err(format!("unknown condition flag `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub instance_id: String,
    pub a_star: DVector<f64>,
    pub target_value: f64,
    pub equations_used: usize,
    pub condition_flag: ConditionFlag,
    /// Annotators whose records were ignored because the model lacks them.
    pub skipped_annotators: Vec<String>,
}

/// Predicts the target dimension for one instance from its (partial) records.
pub fn predict_instance(
    model: &FusionModel,
    instance_id: &str,
    records: &[&AnnotationRecord],
    config: &PredictionConfig,
) -> Result<Prediction, PredictError> {
    let target = model.dimensions.require(&config.target_dim)?;
    if !(config.ridge >= 0.0 && config.ridge.is_finite()) {
        return Err(PredictError::BadRidge(config.ridge));
    }
    let d = model.dimensions.len();

    let mut ordered: Vec<&AnnotationRecord> = records.to_vec();
    ordered.sort_by(|a, b| a.annotator_id.cmp(&b.annotator_id));

    let mut rows: Vec<f64> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut skipped = Vec::new();
    for rec in ordered {
        if rec.ratings.iter().all(Option::is_none) {
            return Err(PredictError::AllMissingRecord {
                instance_id: instance_id.to_string(),
                annotator_id: rec.annotator_id.clone(),
            });
        }
        let Some(params) = model.annotators.get(&rec.annotator_id) else {
            log::warn!(
                "annotator `{}` is not in the model; skipping its record for `{instance_id}`",
                rec.annotator_id
            );
            skipped.push(rec.annotator_id.clone());
            continue;
        };
        let weight = if config.weight_by_noise {
            params.noise_var.sqrt().recip()
        } else {
            1.0
        };
        for (dim, value) in rec.ratings.iter().enumerate() {
            let Some(value) = value else { continue };
            if dim == target {
                continue;
            }
            rows.extend(params.transform.row(dim).iter().map(|v| v * weight));
            rhs.push(value * weight);
        }
    }

    let n = rhs.len();
    if n == 0 {
        return Err(PredictError::NoUsableEquations(instance_id.to_string()));
    }
    let design = DMatrix::from_row_slice(n, d, &rows);
    let observed = DVector::from_vec(rhs);
    let normal = design.tr_mul(&design);

    let condition_flag = if is_singular(&normal) {
        ConditionFlag::RidgeResolved
    } else {
        ConditionFlag::WellPosed
    };

    let regularized = &normal + DMatrix::identity(d, d) * config.ridge;
    let a_star = match nalgebra::Cholesky::new(regularized) {
        Some(chol) => chol.solve(&design.tr_mul(&observed)),
        // ridge == 0 on a singular system: minimum-norm least squares
        None => design
            .clone()
            .svd(true, true)
            .solve(&observed, SINGULAR_REL_TOL)
            .map_err(|_| PredictError::NoUsableEquations(instance_id.to_string()))?,
    };

    Ok(Prediction {
        instance_id: instance_id.to_string(),
        target_value: a_star[target],
        a_star,
        equations_used: n,
        condition_flag,
        skipped_annotators: skipped,
    })
}

fn is_singular(normal: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(normal.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    max <= 0.0 || min <= SINGULAR_REL_TOL * max
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionReport {
    /// Successful predictions, ordered by instance id.
    pub predictions: Vec<Prediction>,
    /// Instances that could not be predicted, with the reason.
    pub failures: Vec<(String, PredictError)>,
    /// Union of annotators skipped because the model lacks them.
    pub skipped_annotators: BTreeSet<String>,
}

/// Applies [`predict_instance`] to every instance of a prediction-mode dataset.
pub fn predict_dataset(
    model: &FusionModel,
    dataset: &Dataset,
    config: &PredictionConfig,
) -> Result<PredictionReport, PredictError> {
    model.dimensions.require(&config.target_dim)?;
    dataset
        .validate(ValidationMode::Prediction)
        .map_err(PredictError::InvalidDataset)?;

    let mut report = PredictionReport {
        predictions: Vec::new(),
        failures: Vec::new(),
        skipped_annotators: BTreeSet::new(),
    };
    for (inst, recs) in dataset.instances().iter().zip(dataset.records_by_instance()) {
        match predict_instance(model, &inst.id, &recs, config) {
            Ok(p) => {
                report.skipped_annotators.extend(p.skipped_annotators.iter().cloned());
                report.predictions.push(p);
            }
            Err(e) => report.failures.push((inst.id.clone(), e)),
        }
    }
    Ok(report)
}
