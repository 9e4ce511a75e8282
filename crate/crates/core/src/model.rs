//! Domain types shared by fitting, prediction, baselines and file I/O.
//!
//! Every vector and matrix in the crate is laid out in the canonical
//! dimension order held by [`Dimensions`]. Instances inside a [`Dataset`] are
//! kept sorted by id so that every reduction over instances happens in a
//! fixed order regardless of how the input was supplied.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension list is empty")]
    NoDimensions,
    #[error("dimension name at position {0} is empty")]
    EmptyDimensionName(usize),
    #[error("duplicate dimension name `{0}`")]
    DuplicateDimension(String),
    #[error("unknown dimension `{0}`")]
    UnknownDimension(String),
    #[error("sigma2 must be positive and finite, got {0}")]
    BadSigma2(f64),
    #[error("noise variance for annotator `{0}` must be positive and finite, got {1}")]
    BadNoiseVar(String, f64),
    #[error("theta must have {expected} columns (one per dimension), got {got}")]
    ThetaShape { expected: usize, got: usize },
    #[error("transform for annotator `{id}` must be {d}x{d}, got {rows}x{cols}")]
    TransformShape {
        id: String,
        d: usize,
        rows: usize,
        cols: usize,
    },
    #[error("non-finite entry in {0}")]
    NonFinite(String),
}

/// Ordered, unique dimension labels (e.g. valence, arousal, dominance).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dimensions {
    names: Vec<String>,
}

impl Dimensions {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, ModelError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(ModelError::NoDimensions);
        }
        let mut seen = BTreeSet::new();
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(ModelError::EmptyDimensionName(i));
            }
            if !seen.insert(n.as_str()) {
                return Err(ModelError::DuplicateDimension(n.clone()));
            }
        }
        Ok(Self { names })
    }

    /// `d1, d2, ...` style names, or valence/arousal/dominance when `d == 3`.
    pub fn default_for(d: usize) -> Result<Self, ModelError> {
        if d == 3 {
            Self::new(["valence", "arousal", "dominance"])
        } else {
            Self::new((1..=d).map(|i| format!("d{i}")))
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn require(&self, name: &str) -> Result<usize, ModelError> {
        self.index_of(name)
            .ok_or_else(|| ModelError::UnknownDimension(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub features: DVector<f64>,
}

impl Instance {
    pub fn new(id: impl Into<String>, features: impl Into<Vec<f64>>) -> Self {
        Self {
            id: id.into(),
            features: DVector::from_vec(features.into()),
        }
    }
}

/// One annotator's rating vector for one instance. `None` marks a missing entry,
/// which is only legal in prediction-mode datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub instance_id: String,
    pub annotator_id: String,
    pub ratings: Vec<Option<f64>>,
}

impl AnnotationRecord {
    pub fn new(
        instance_id: impl Into<String>,
        annotator_id: impl Into<String>,
        ratings: impl Into<Vec<Option<f64>>>,
    ) -> Self {
        Self {
            instance_id: instance_id.into(),
            annotator_id: annotator_id.into(),
            ratings: ratings.into(),
        }
    }

    pub fn complete(
        instance_id: impl Into<String>,
        annotator_id: impl Into<String>,
        ratings: &[f64],
    ) -> Self {
        Self::new(
            instance_id,
            annotator_id,
            ratings.iter().copied().map(Some).collect::<Vec<_>>(),
        )
    }

    pub fn is_complete(&self) -> bool {
        self.ratings.iter().all(Option::is_some)
    }

    /// The rating vector when every entry is present.
    pub fn full_vector(&self) -> Option<DVector<f64>> {
        self.ratings
            .iter()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .map(DVector::from_vec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationMode {
    Training,
    Prediction,
}

/// A single violated dataset invariant.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ValidationIssue {
    NoInstances,
    NoAnnotations,
    DuplicateInstance(String),
    FeatureLength { instance_id: String, expected: usize, got: usize },
    NonFiniteFeature(String),
    DanglingAnnotation { instance_id: String, annotator_id: String },
    DuplicateRecord { instance_id: String, annotator_id: String },
    RatingLength { instance_id: String, annotator_id: String, expected: usize, got: usize },
    AllMissing { instance_id: String, annotator_id: String },
    NonFiniteRating { instance_id: String, annotator_id: String },
    PartialInTraining { instance_id: String, annotator_id: String },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ValidationIssue::*;
        match self {
            NoInstances => write!(f, "dataset has no instances"),
            NoAnnotations => write!(f, "dataset has no annotators"),
            DuplicateInstance(id) => write!(f, "duplicate instance `{id}`"),
            FeatureLength { instance_id, expected, got } => write!(
                f,
                "instance `{instance_id}` has {got} features, expected {expected}"
            ),
            NonFiniteFeature(id) => write!(f, "instance `{id}` has a non-finite feature"),
            DanglingAnnotation { instance_id, annotator_id } => write!(
                f,
                "dangling annotation: annotator `{annotator_id}` rates unknown instance `{instance_id}`"
            ),
            DuplicateRecord { instance_id, annotator_id } => write!(
                f,
                "duplicate record: annotator `{annotator_id}` rates `{instance_id}` more than once"
            ),
            RatingLength { instance_id, annotator_id, expected, got } => write!(
                f,
                "record ({instance_id}, {annotator_id}) has {got} ratings, expected {expected}"
            ),
            AllMissing { instance_id, annotator_id } => write!(
                f,
                "record ({instance_id}, {annotator_id}) has no observed rating"
            ),
            NonFiniteRating { instance_id, annotator_id } => write!(
                f,
                "record ({instance_id}, {annotator_id}) has a non-finite rating"
            ),
            PartialInTraining { instance_id, annotator_id } => write!(
                f,
                "partial in training: record ({instance_id}, {annotator_id}) has missing ratings"
            ),
        }
    }
}

/// Instances plus annotation records over a fixed set of dimensions.
///
/// Construction never fails; use [`Dataset::validate`] to check invariants.
#[derive(Debug, Clone)]
pub struct Dataset {
    dimensions: Dimensions,
    instances: Vec<Instance>,
    annotations: Vec<AnnotationRecord>,
}

impl Dataset {
    pub fn new(
        dimensions: Dimensions,
        mut instances: Vec<Instance>,
        annotations: Vec<AnnotationRecord>,
    ) -> Self {
        instances.sort_by(|a, b| a.id.cmp(&b.id));
        Self {
            dimensions,
            instances,
            annotations,
        }
    }

    pub fn dimensions(&self) -> &Dimensions {
        &self.dimensions
    }

    /// Instances in canonical (id-sorted) order.
    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn annotations(&self) -> &[AnnotationRecord] {
        &self.annotations
    }

    pub fn num_features(&self) -> usize {
        self.instances.first().map_or(0, |i| i.features.len())
    }

    pub fn annotator_ids(&self) -> BTreeSet<&str> {
        self.annotations
            .iter()
            .map(|r| r.annotator_id.as_str())
            .collect()
    }

    pub fn instance(&self, id: &str) -> Option<&Instance> {
        self.instances
            .binary_search_by(|i| i.id.as_str().cmp(id))
            .ok()
            .map(|ix| &self.instances[ix])
    }

    /// Records grouped per instance (canonical instance order), each group
    /// sorted by annotator id. Records pointing at unknown instances are dropped.
    pub fn records_by_instance(&self) -> Vec<Vec<&AnnotationRecord>> {
        let index: HashMap<&str, usize> = self
            .instances
            .iter()
            .enumerate()
            .map(|(i, inst)| (inst.id.as_str(), i))
            .collect();
        let mut groups: Vec<Vec<&AnnotationRecord>> = vec![Vec::new(); self.instances.len()];
        for rec in &self.annotations {
            if let Some(&ix) = index.get(rec.instance_id.as_str()) {
                groups[ix].push(rec);
            }
        }
        for g in &mut groups {
            g.sort_by(|a, b| a.annotator_id.cmp(&b.annotator_id));
        }
        groups
    }

    /// M×P feature matrix in canonical instance order.
    pub fn feature_matrix(&self) -> DMatrix<f64> {
        let p = self.num_features();
        DMatrix::from_fn(self.instances.len(), p, |r, c| self.instances[r].features[c])
    }

    /// Returns every violated invariant, sorted, or `Ok(())`.
    pub fn validate(&self, mode: ValidationMode) -> Result<(), Vec<ValidationIssue>> {
        validate_dataset(self, mode)
    }
}

pub fn validate_dataset(
    dataset: &Dataset,
    mode: ValidationMode,
) -> Result<(), Vec<ValidationIssue>> {
    let mut issues = BTreeSet::new();
    let d = dataset.dimensions.len();

    if dataset.instances.is_empty() {
        issues.insert(ValidationIssue::NoInstances);
    }
    if dataset.annotations.is_empty() {
        issues.insert(ValidationIssue::NoAnnotations);
    }

    let p = dataset.num_features();
    let mut ids = BTreeSet::new();
    for inst in &dataset.instances {
        if !ids.insert(inst.id.as_str()) {
            issues.insert(ValidationIssue::DuplicateInstance(inst.id.clone()));
        }
        if inst.features.len() != p {
            issues.insert(ValidationIssue::FeatureLength {
                instance_id: inst.id.clone(),
                expected: p,
                got: inst.features.len(),
            });
        }
        if inst.features.iter().any(|v| !v.is_finite()) {
            issues.insert(ValidationIssue::NonFiniteFeature(inst.id.clone()));
        }
    }

    let mut pairs = BTreeMap::new();
    for rec in &dataset.annotations {
        let key = (rec.instance_id.clone(), rec.annotator_id.clone());
        let count = pairs.entry(key).or_insert(0usize);
        *count += 1;
        if *count == 2 {
            issues.insert(ValidationIssue::DuplicateRecord {
                instance_id: rec.instance_id.clone(),
                annotator_id: rec.annotator_id.clone(),
            });
        }
        if !ids.contains(rec.instance_id.as_str()) {
            issues.insert(ValidationIssue::DanglingAnnotation {
                instance_id: rec.instance_id.clone(),
                annotator_id: rec.annotator_id.clone(),
            });
        }
        if rec.ratings.len() != d {
            issues.insert(ValidationIssue::RatingLength {
                instance_id: rec.instance_id.clone(),
                annotator_id: rec.annotator_id.clone(),
                expected: d,
                got: rec.ratings.len(),
            });
        }
        if rec.ratings.iter().all(Option::is_none) {
            issues.insert(ValidationIssue::AllMissing {
                instance_id: rec.instance_id.clone(),
                annotator_id: rec.annotator_id.clone(),
            });
        }
        if rec.ratings.iter().flatten().any(|v| !v.is_finite()) {
            issues.insert(ValidationIssue::NonFiniteRating {
                instance_id: rec.instance_id.clone(),
                annotator_id: rec.annotator_id.clone(),
            });
        }
        if mode == ValidationMode::Training && rec.ratings.iter().any(Option::is_none) {
            issues.insert(ValidationIssue::PartialInTraining {
                instance_id: rec.instance_id.clone(),
                annotator_id: rec.annotator_id.clone(),
            });
        }
    }

    if issues.is_empty() {
        Ok(())
    } else {
        Err(issues.into_iter().collect())
    }
}

/// Per-annotator linear transform `F_k` and isotropic noise variance `tau_k^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatorParams {
    pub transform: DMatrix<f64>,
    pub noise_var: f64,
}

/// Fitted (or generating) parameters of the joint annotation model.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub dimensions: Dimensions,
    /// P×D regression from features to the latent label mean.
    pub theta: DMatrix<f64>,
    pub sigma2: f64,
    pub annotators: BTreeMap<String, AnnotatorParams>,
}

impl FusionModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        let d = self.dimensions.len();
        if self.theta.ncols() != d {
            return Err(ModelError::ThetaShape {
                expected: d,
                got: self.theta.ncols(),
            });
        }
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("theta".into()));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(ModelError::BadSigma2(self.sigma2));
        }
        for (id, a) in &self.annotators {
            if a.transform.nrows() != d || a.transform.ncols() != d {
                return Err(ModelError::TransformShape {
                    id: id.clone(),
                    d,
                    rows: a.transform.nrows(),
                    cols: a.transform.ncols(),
                });
            }
            if a.transform.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(format!("transform of `{id}`")));
            }
            if !(a.noise_var > 0.0 && a.noise_var.is_finite()) {
                return Err(ModelError::BadNoiseVar(id.clone(), a.noise_var));
            }
        }
        Ok(())
    }

    pub fn num_features(&self) -> usize {
        self.theta.nrows()
    }

    /// Prior mean of the latent label, `theta^T x`.
    pub fn prior_mean(&self, features: &DVector<f64>) -> DVector<f64> {
        self.theta.tr_mul(features)
    }

    /// `F_k theta^T`, the basis-invariant product used to compare fits.
    pub fn mixing_product(&self, annotator_id: &str) -> Option<DMatrix<f64>> {
        self.annotators
            .get(annotator_id)
            .map(|a| &a.transform * self.theta.transpose())
    }
}

/// Posterior mean and covariance of a latent label vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentEstimate {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LatentEstimate {
    /// `E[a a^T] = cov + mean mean^T`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.cov + &self.mean * self.mean.transpose()
    }
}
