//! Seeded synthetic datasets drawn from the generative model, and brute-force
//! oracles used to check the fitting code.
//!
//! Every sampled quantity draws from its own ChaCha stream derived from the
//! single user seed, so adding a new sampled quantity never shifts the values
//! of existing ones.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AnnotationRecord, AnnotatorParams, Dataset, Dimensions, FusionModel, Instance,
    LatentEstimate, ModelError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation spec field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("joint covariance is singular")]
    SingularJoint,
    #[error("annotator `{0}` is not part of the model")]
    UnknownAnnotator(String),
    #[error("record ({0}, {1}) has missing ratings")]
    IncompleteRecord(String, String),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> SimError {
    SimError::InvalidField {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FStyle {
    Identity,
    /// Diagonal entries drawn uniformly from [0.5, 1.5].
    Diagonal,
    /// `1 - off_diag_mass` on the diagonal; the mass is split evenly over the
    /// off-diagonal entries of each row with random signs.
    Coupled { off_diag_mass: f64 },
    /// One D×D matrix (rows of rows) per annotator.
    Explicit { matrices: Vec<Vec<Vec<f64>>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MissingPattern {
    None,
    /// Blank the named dimension in every record.
    DropDim { dim: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSpec {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// Standard deviation of the latent noise.
    pub sigma: f64,
    /// Per-annotator noise standard deviation is drawn uniformly from this range.
    pub tau_range: [f64; 2],
    pub f_style: FStyle,
    /// Approximate standard deviation of each entry of `theta^T x`.
    pub theta_scale: f64,
    pub ratings_per_instance: usize,
    pub missing_pattern: MissingPattern,
    pub dimensions: Option<Vec<String>>,
    pub seed: u64,
}

impl Default for SimSpec {
    /// Word-level campaign scale: 200 words, 20 annotators who each rate every word.
    fn default() -> Self {
        Self {
            m: 200,
            p: 8,
            d: 3,
            k: 20,
            sigma: 0.3,
            tau_range: [0.1, 0.1],
            f_style: FStyle::Coupled { off_diag_mass: 0.3 },
            theta_scale: 1.0,
            ratings_per_instance: 20,
            missing_pattern: MissingPattern::None,
            dimensions: None,
            seed: 0,
        }
    }
}

impl SimSpec {
    /// Sentence-level campaign scale: 100 sentences, 21 annotators.
    pub fn sentence_scale() -> Self {
        Self {
            m: 100,
            k: 21,
            ratings_per_instance: 21,
            ..Self::default()
        }
    }

    pub fn dimension_names(&self) -> Result<Dimensions, SimError> {
        match &self.dimensions {
            Some(names) => {
                if names.len() != self.d {
                    return Err(invalid(
                        "dimensions",
                        format!("{} names given but D = {}", names.len(), self.d),
                    ));
                }
                Ok(Dimensions::new(names.iter().cloned())?)
            }
            None => Ok(Dimensions::default_for(self.d)?),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (field, v) in [("M", self.m), ("P", self.p), ("D", self.d), ("K", self.k)] {
            if v == 0 {
                return Err(invalid(field, "must be >= 1"));
            }
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid("sigma", "must be a positive real"));
        }
        let [lo, hi] = self.tau_range;
        if !(lo > 0.0 && hi.is_finite() && lo <= hi) {
            return Err(invalid("tau_range", "need 0 < lo <= hi"));
        }
        if !(self.theta_scale > 0.0 && self.theta_scale.is_finite()) {
            return Err(invalid("theta_scale", "must be a positive real"));
        }
        if self.ratings_per_instance == 0 || self.ratings_per_instance > self.k {
            return Err(invalid("ratings_per_instance", "must be in 1..=K"));
        }
        match &self.f_style {
            FStyle::Coupled { off_diag_mass } => {
                if !(0.0..1.0).contains(off_diag_mass) {
                    return Err(invalid("off_diag_mass", "must be in [0, 1)"));
                }
            }
            FStyle::Explicit { matrices } => {
                if matrices.len() != self.k {
                    return Err(invalid("matrices", format!("need K = {} matrices", self.k)));
                }
                let shaped = matrices.iter().all(|m| {
                    m.len() == self.d
                        && m.iter().all(|r| r.len() == self.d && r.iter().all(|v| v.is_finite()))
                });
                if !shaped {
                    return Err(invalid("matrices", format!("each must be {0}x{0} and finite", self.d)));
                }
            }
            FStyle::Identity | FStyle::Diagonal => {}
        }
        let dims = self.dimension_names()?;
        if let MissingPattern::DropDim { dim } = &self.missing_pattern {
            if dims.index_of(dim).is_none() {
                return Err(invalid("missing_pattern", format!("unknown dimension `{dim}`")));
            }
        }
        Ok(())
    }
}

/// Generating parameters plus the sampled latent labels (instance-id order).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub model: FusionModel,
    pub latent: Vec<(String, DVector<f64>)>,
}

#[derive(Clone, Copy)]
#[repr(u64)]
enum Stream {
    Features = 1,
    Theta = 2,
    Transforms = 3,
    NoiseScale = 4,
    Latent = 5,
    Assignment = 6,
    RatingNoise = 7,
}

fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn instance_id(m: usize) -> String {
    format!("i{m:05}")
}

pub fn annotator_id(k: usize) -> String {
    format!("a{k:03}")
}

fn sample_transforms(spec: &SimSpec) -> Vec<DMatrix<f64>> {
    let d = spec.d;
    let mut rng = stream(spec.seed, Stream::Transforms);
    (0..spec.k)
        .map(|k| match &spec.f_style {
            FStyle::Identity => DMatrix::identity(d, d),
            FStyle::Diagonal => {
                let u = Uniform::new_inclusive(0.5, 1.5).expect("valid range");
                DMatrix::from_diagonal(&DVector::from_fn(d, |_, _| u.sample(&mut rng)))
            }
            FStyle::Coupled { off_diag_mass } => {
                if d == 1 {
                    return DMatrix::identity(1, 1);
                }
                let share = off_diag_mass / (d - 1) as f64;
                DMatrix::from_fn(d, d, |r, c| {
                    if r == c {
                        1.0 - off_diag_mass
                    } else if rng.random::<bool>() {
                        share
                    } else {
                        -share
                    }
                })
            }
            FStyle::Explicit { matrices } => {
                DMatrix::from_fn(d, d, |r, c| matrices[k][r][c])
            }
        })
        .collect()
}

/// Samples a dataset and its ground truth from the generative model.
pub fn generate(spec: &SimSpec) -> Result<(Dataset, GroundTruth), SimError> {
    spec.validate()?;
    let dims = spec.dimension_names()?;
    let (p, d) = (spec.p, spec.d);

    let mut theta_rng = stream(spec.seed, Stream::Theta);
    let scale = spec.theta_scale / (p as f64).sqrt();
    let theta = DMatrix::from_fn(p, d, |_, _| scale * normal(&mut theta_rng));

    let transforms = sample_transforms(spec);
    let mut tau_rng = stream(spec.seed, Stream::NoiseScale);
    let [lo, hi] = spec.tau_range;
    let annotators: BTreeMap<String, AnnotatorParams> = transforms
        .into_iter()
        .enumerate()
        .map(|(k, transform)| {
            let tau = if lo == hi { lo } else { tau_rng.random_range(lo..=hi) };
            (
                annotator_id(k),
                AnnotatorParams {
                    transform,
                    noise_var: tau * tau,
                },
            )
        })
        .collect();

    let model = FusionModel {
        dimensions: dims,
        theta,
        sigma2: spec.sigma * spec.sigma,
        annotators,
    };
    sample_from(&model, spec)
}

/// Samples a fresh dataset (new features, latents and ratings) from an
/// existing model, e.g. sentence-level data from a word-level fit. Uses only
/// `M`, `ratings_per_instance`, `missing_pattern` and `seed` from `spec`.
pub fn generate_with_model(
    model: &FusionModel,
    spec: &SimSpec,
) -> Result<(Dataset, GroundTruth), SimError> {
    model.validate()?;
    if spec.m == 0 {
        return Err(invalid("M", "must be >= 1"));
    }
    let k = model.annotators.len();
    if spec.ratings_per_instance == 0 || spec.ratings_per_instance > k {
        return Err(invalid(
            "ratings_per_instance",
            format!("must be in 1..={k} (annotators in model)"),
        ));
    }
    if let MissingPattern::DropDim { dim } = &spec.missing_pattern {
        if model.dimensions.index_of(dim).is_none() {
            return Err(invalid("missing_pattern", format!("unknown dimension `{dim}`")));
        }
    }
    sample_from(model, spec)
}

fn sample_from(model: &FusionModel, spec: &SimSpec) -> Result<(Dataset, GroundTruth), SimError> {
    let p = model.num_features();
    let d = model.dimensions.len();
    let sigma = model.sigma2.sqrt();
    let ids: Vec<(&String, &AnnotatorParams)> = model.annotators.iter().collect();
    let drop = match &spec.missing_pattern {
        MissingPattern::None => None,
        MissingPattern::DropDim { dim } => Some(model.dimensions.require(dim)?),
    };

    let mut feat_rng = stream(spec.seed, Stream::Features);
    let mut latent_rng = stream(spec.seed, Stream::Latent);
    let mut assign_rng = stream(spec.seed, Stream::Assignment);
    let mut noise_rng = stream(spec.seed, Stream::RatingNoise);

    let mut instances = Vec::with_capacity(spec.m);
    let mut latent = Vec::with_capacity(spec.m);
    let mut records = Vec::with_capacity(spec.m * spec.ratings_per_instance);
    for m in 0..spec.m {
        let id = instance_id(m);
        let x = DVector::from_fn(p, |_, _| normal(&mut feat_rng));
        let a_star = model.prior_mean(&x) + DVector::from_fn(d, |_, _| sigma * normal(&mut latent_rng));

        let mut raters = index::sample(&mut assign_rng, ids.len(), spec.ratings_per_instance).into_vec();
        raters.sort_unstable();
        for k in raters {
            let (ann_id, params) = ids[k];
            let tau = params.noise_var.sqrt();
            let rating = &params.transform * &a_star
                + DVector::from_fn(d, |_, _| tau * normal(&mut noise_rng));
            let ratings: Vec<Option<f64>> = rating
                .iter()
                .enumerate()
                .map(|(dim, v)| (Some(dim) != drop).then_some(*v))
                .collect();
            records.push(AnnotationRecord::new(id.clone(), ann_id.clone(), ratings));
        }
        instances.push(Instance {
            id: id.clone(),
            features: x,
        });
        latent.push((id, a_star));
    }

    let dataset = Dataset::new(model.dimensions.clone(), instances, records);
    Ok((
        dataset,
        GroundTruth {
            model: model.clone(),
            latent,
        },
    ))
}

/// Transform, noise variance and rating vector of one record.
type OracleInput = (DMatrix<f64>, f64, DVector<f64>);

fn oracle_inputs(
    model: &FusionModel,
    records: &[&AnnotationRecord],
) -> Result<Vec<OracleInput>, SimError> {
    records
        .iter()
        .map(|r| {
            let params = model
                .annotators
                .get(&r.annotator_id)
                .ok_or_else(|| SimError::UnknownAnnotator(r.annotator_id.clone()))?;
            let rating = r.full_vector().ok_or_else(|| {
                SimError::IncompleteRecord(r.instance_id.clone(), r.annotator_id.clone())
            })?;
            Ok((params.transform.clone(), params.noise_var, rating))
        })
        .collect()
}

/// Brute-force Gaussian conditioning: assembles the full joint covariance of
/// the latent vector and all stacked annotations, inverts it, and reads the
/// conditional moments off the joint precision blocks.
pub fn oracle_condition(
    model: &FusionModel,
    instance: &Instance,
    records: &[&AnnotationRecord],
) -> Result<LatentEstimate, SimError> {
    let d = model.dimensions.len();
    let obs = oracle_inputs(model, records)?;
    let s = obs.len();
    let n = d + s * d;
    let sigma2 = model.sigma2;
    let prior = model.prior_mean(&instance.features);

    let mut joint = DMatrix::zeros(n, n);
    let mut mean = DVector::zeros(n);
    let mut value = DVector::zeros(n);
    joint
        .view_mut((0, 0), (d, d))
        .copy_from(&(DMatrix::identity(d, d) * sigma2));
    mean.rows_mut(0, d).copy_from(&prior);
    for (j, (fj, tau2, rating)) in obs.iter().enumerate() {
        let oj = d + j * d;
        let cross = fj.transpose() * sigma2;
        joint.view_mut((0, oj), (d, d)).copy_from(&cross);
        joint.view_mut((oj, 0), (d, d)).copy_from(&cross.transpose());
        for (k, (fk, _, _)) in obs.iter().enumerate() {
            let ok = d + k * d;
            let mut block = fj * fk.transpose() * sigma2;
            if j == k {
                block += DMatrix::identity(d, d) * *tau2;
            }
            joint.view_mut((oj, ok), (d, d)).copy_from(&block);
        }
        mean.rows_mut(oj, d).copy_from(&(fj * &prior));
        value.rows_mut(oj, d).copy_from(rating);
    }

    let precision = joint.try_inverse().ok_or(SimError::SingularJoint)?;
    let p_ll = precision.view((0, 0), (d, d)).into_owned();
    let cov = p_ll.try_inverse().ok_or(SimError::SingularJoint)?;
    if s == 0 {
        return Ok(LatentEstimate { mean: prior, cov });
    }
    let p_la = precision.view((0, d), (d, s * d)).into_owned();
    let offset = (value - mean).rows(d, s * d).into_owned();
    let post_mean = prior - &cov * p_la * offset;
    Ok(LatentEstimate {
        mean: post_mean,
        cov: (&cov + cov.transpose()) * 0.5,
    })
}

/// Plain Monte-Carlo estimate of the marginal log-likelihood: for every
/// instance, averages the annotation likelihood over prior draws of the
/// latent vector. Returns the estimate and its delta-method standard error.
pub fn oracle_loglik_mc(
    model: &FusionModel,
    dataset: &Dataset,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64), SimError> {
    let d = model.dimensions.len();
    let sigma = model.sigma2.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut total, mut var) = (0.0, 0.0);
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    for (inst, recs) in dataset.instances().iter().zip(dataset.records_by_instance()) {
        if recs.is_empty() {
            continue;
        }
        let obs = oracle_inputs(model, &recs)?;
        let prior = model.prior_mean(&inst.features);
        let mut log_w = Vec::with_capacity(n_samples);
        let mut a = DVector::zeros(d);
        for _ in 0..n_samples {
            for i in 0..d {
                a[i] = prior[i] + sigma * normal(&mut rng);
            }
            let lw: f64 = obs
                .iter()
                .map(|(f, tau2, rating)| {
                    let r = rating - f * &a;
                    -0.5 * (d as f64 * (ln_2pi + tau2.ln()) + r.norm_squared() / tau2)
                })
                .sum();
            log_w.push(lw);
        }
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let n = n_samples as f64;
        let mean_w = w.iter().sum::<f64>() / n;
        let var_w = w.iter().map(|x| (x - mean_w).powi(2)).sum::<f64>() / (n - 1.0);
        total += max + mean_w.ln();
        var += var_w / (n * mean_w * mean_w);
    }
    Ok((total, var.sqrt()))
}
