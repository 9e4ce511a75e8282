//! Maximum-likelihood fitting of the joint annotation model by EM.
//!
//! Each instance carries a latent label `a = theta^T x + eps`, `eps ~ N(0, sigma2 I)`,
//! and every annotator `k` who rated it reports `a_k = F_k a + eta_k`,
//! `eta_k ~ N(0, tau_k^2 I)`. The latent vector is marginalized in closed form
//! for the log-likelihood, the E-step is exact Gaussian conditioning, and the
//! M-step uses the closed-form updates for `theta`, `sigma2`, `F_k`, `tau_k^2`.
//!
//! Conditioning is done in information form: with `G` the stacked transforms
//! and `R` the block-diagonal noise covariance, the posterior precision is
//! `I / sigma2 + G^T R^{-1} G`, a D×D matrix no matter how many annotators
//! rated the instance. The marginal quadratic form is evaluated as the
//! minimized penalized residual, a sum of non-negative terms, so it stays
//! accurate when variances sit at the floor.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{log_det, spd_factor, symmetrize};
use crate::model::{
    AnnotationRecord, AnnotatorParams, Dataset, FusionModel, Instance, LatentEstimate,
    ValidationIssue, ValidationMode,
};

/// Lower bound applied to `sigma2` and every `tau_k^2` after each update.
pub const VARIANCE_FLOOR: f64 = 1e-10;
/// Allowed decrease of the log-likelihood between EM iterations, absolute for
/// `|LL| <= 1` and relative above.
pub const MONOTONE_SLACK: f64 = 1e-8;
pub const DEFAULT_RIDGE: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum EmError {
    #[error("invalid EM configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid training dataset: {}", join_issues(.0))]
    InvalidDataset(Vec<ValidationIssue>),
    #[error("annotator `{0}` is not part of the model")]
    UnknownAnnotator(String),
    #[error("record ({instance_id}, {annotator_id}) has missing ratings")]
    IncompleteRecord {
        instance_id: String,
        annotator_id: String,
    },
    #[error("instance `{0}` has no annotations")]
    UnratedInstance(String),
    #[error("posterior precision is singular for instance `{0}`")]
    SingularPosterior(String),
    #[error("feature Gram matrix is rank deficient after ridge")]
    RankDeficientFeatures,
    #[error("latent second-moment matrix is singular for annotator `{0}`")]
    SingularSecondMoment(String),
    #[error("annotator `{0}` has no records")]
    NoRecords(String),
    #[error(
        "log-likelihood decreased at iteration {iteration}: {previous} -> {current}"
    )]
    NonMonotone {
        iteration: usize,
        previous: f64,
        current: f64,
    },
    #[error("estimates ({got}) do not match instance count ({expected})")]
    EstimateCount { expected: usize, got: usize },
}

fn join_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Relative log-likelihood change below which the fit is declared converged.
    pub rel_tol: f64,
    /// Added to the diagonal of every matrix inverted in the M-step, and used as
    /// a fallback for singular posterior precisions.
    pub ridge: f64,
    /// Reserved for randomized tie-breaking; the current fitting path is fully
    /// deterministic and does not read it.
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            rel_tol: 1e-5,
            ridge: DEFAULT_RIDGE,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), EmError> {
        if self.max_iters < 1 {
            return Err(EmError::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(EmError::InvalidConfig("rel_tol must be > 0".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(EmError::InvalidConfig("ridge must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmTrace {
    /// Log-likelihood after initialization, then after every EM iteration.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

struct Observation<'a> {
    transform: &'a DMatrix<f64>,
    noise_var: f64,
    rating: &'a DVector<f64>,
}

/// Posterior of the latent vector given the observations, together with the
/// marginal log-density of the stacked observations.
fn condition(
    prior_mean: DVector<f64>,
    sigma2: f64,
    obs: &[Observation<'_>],
    ridge: f64,
) -> Option<(LatentEstimate, f64)> {
    let d = prior_mean.len();
    let residuals: Vec<DVector<f64>> = obs
        .iter()
        .map(|o| o.rating - o.transform * &prior_mean)
        .collect();

    let mut precision = DMatrix::identity(d, d) / sigma2;
    let mut rhs = DVector::zeros(d);
    for (o, r) in obs.iter().zip(&residuals) {
        precision += o.transform.tr_mul(o.transform) / o.noise_var;
        rhs += o.transform.tr_mul(r) / o.noise_var;
    }
    let chol = spd_factor(precision, ridge)?;
    let shift = chol.solve(&rhs);
    let mut cov = chol.inverse();
    symmetrize(&mut cov);

    let mut quad = shift.norm_squared() / sigma2;
    let mut log_det_cov = d as f64 * sigma2.ln() + log_det(&chol);
    for (o, r) in obs.iter().zip(&residuals) {
        quad += (r - o.transform * &shift).norm_squared() / o.noise_var;
        log_det_cov += d as f64 * o.noise_var.ln();
    }
    let n = (obs.len() * d) as f64;
    let log_marginal = -0.5 * (n * LN_2PI + log_det_cov + quad);

    let mean = prior_mean + shift;
    Some((LatentEstimate { mean, cov }, log_marginal))
}

fn observations<'a>(
    model: &'a FusionModel,
    records: &[&AnnotationRecord],
    ratings: &'a [DVector<f64>],
) -> Result<Vec<Observation<'a>>, EmError> {
    records
        .iter()
        .zip(ratings)
        .map(|(rec, rating)| {
            let params = model
                .annotators
                .get(&rec.annotator_id)
                .ok_or_else(|| EmError::UnknownAnnotator(rec.annotator_id.clone()))?;
            Ok(Observation {
                transform: &params.transform,
                noise_var: params.noise_var,
                rating,
            })
        })
        .collect()
}

fn complete_ratings(records: &[&AnnotationRecord]) -> Result<Vec<DVector<f64>>, EmError> {
    records
        .iter()
        .map(|r| {
            r.full_vector().ok_or_else(|| EmError::IncompleteRecord {
                instance_id: r.instance_id.clone(),
                annotator_id: r.annotator_id.clone(),
            })
        })
        .collect()
}

/// Posterior mean and covariance of the latent label of `instance` given the
/// complete annotation `records`. With no records this is the prior
/// `(theta^T x, sigma2 I)`.
pub fn e_step(
    model: &FusionModel,
    instance: &Instance,
    records: &[&AnnotationRecord],
) -> Result<LatentEstimate, EmError> {
    let ratings = complete_ratings(records)?;
    let obs = observations(model, records, &ratings)?;
    condition(
        model.prior_mean(&instance.features),
        model.sigma2,
        &obs,
        DEFAULT_RIDGE,
    )
    .map(|(est, _)| est)
    .ok_or_else(|| EmError::SingularPosterior(instance.id.clone()))
}

/// E-step over every instance of `dataset`, in canonical instance order.
pub fn e_step_dataset(
    model: &FusionModel,
    dataset: &Dataset,
) -> Result<Vec<LatentEstimate>, EmError> {
    dataset
        .instances()
        .iter()
        .zip(dataset.records_by_instance())
        .map(|(inst, recs)| e_step(model, inst, &recs))
        .collect()
}

/// Marginal log-likelihood `sum_m log N(a_m; G_m theta^T x_m, sigma2 G_m G_m^T + R_m)`
/// where `G_m` stacks the transforms of the annotators who rated instance `m`.
pub fn log_likelihood(model: &FusionModel, dataset: &Dataset) -> Result<f64, EmError> {
    let mut total = 0.0;
    for (inst, recs) in dataset.instances().iter().zip(dataset.records_by_instance()) {
        if recs.is_empty() {
            continue;
        }
        let ratings = complete_ratings(&recs)?;
        let obs = observations(model, &recs, &ratings)?;
        let (_, ll) = condition(
            model.prior_mean(&inst.features),
            model.sigma2,
            &obs,
            DEFAULT_RIDGE,
        )
        .ok_or_else(|| EmError::SingularPosterior(inst.id.clone()))?;
        total += ll;
    }
    Ok(total)
}

/// Expected complete-data log-likelihood under the given latent estimates
/// (the Q-function, without the entropy term).
pub fn expected_complete_log_likelihood(
    model: &FusionModel,
    dataset: &Dataset,
    estimates: &[LatentEstimate],
) -> Result<f64, EmError> {
    check_count(dataset.instances().len(), estimates.len())?;
    let d = model.dimensions.len() as f64;
    let mut q = 0.0;
    for ((inst, recs), est) in dataset
        .instances()
        .iter()
        .zip(dataset.records_by_instance())
        .zip(estimates)
    {
        let prior = model.prior_mean(&inst.features);
        let latent_sq = est.cov.trace() + (&est.mean - prior).norm_squared();
        q += -0.5 * d * (LN_2PI + model.sigma2.ln()) - latent_sq / (2.0 * model.sigma2);
        for rec in recs {
            let rating = complete_ratings(&[rec])?.remove(0);
            let params = model
                .annotators
                .get(&rec.annotator_id)
                .ok_or_else(|| EmError::UnknownAnnotator(rec.annotator_id.clone()))?;
            let f = &params.transform;
            let resid_sq =
                (rating - f * &est.mean).norm_squared() + (f * &est.cov * f.transpose()).trace();
            q += -0.5 * d * (LN_2PI + params.noise_var.ln()) - resid_sq / (2.0 * params.noise_var);
        }
    }
    Ok(q)
}

/// Jensen lower bound on the log-likelihood: the Q-function plus the entropy
/// of the Gaussian latent estimates. Tight when the estimates are the exact
/// posterior under `model`.
pub fn q_lower_bound(
    model: &FusionModel,
    dataset: &Dataset,
    estimates: &[LatentEstimate],
) -> Result<f64, EmError> {
    let q = expected_complete_log_likelihood(model, dataset, estimates)?;
    let mut entropy = 0.0;
    for (inst, est) in dataset.instances().iter().zip(estimates) {
        let d = est.mean.len() as f64;
        let chol =
            spd_factor(est.cov.clone(), 0.0).ok_or_else(|| EmError::SingularPosterior(inst.id.clone()))?;
        entropy += 0.5 * (d * (1.0 + (2.0 * PI).ln()) + log_det(&chol));
    }
    Ok(q + entropy)
}

fn check_count(expected: usize, got: usize) -> Result<(), EmError> {
    if expected != got {
        return Err(EmError::EstimateCount { expected, got });
    }
    Ok(())
}

/// `theta = (X^T X + ridge I)^{-1} X^T A`, with `A` the stacked posterior means.
pub fn m_step_theta(
    features: &DMatrix<f64>,
    estimates: &[LatentEstimate],
    ridge: f64,
) -> Result<DMatrix<f64>, EmError> {
    check_count(features.nrows(), estimates.len())?;
    let p = features.ncols();
    let d = estimates.first().map_or(0, |e| e.mean.len());
    let means = DMatrix::from_fn(estimates.len(), d, |r, c| estimates[r].mean[c]);
    let gram = features.tr_mul(features) + DMatrix::identity(p, p) * ridge;
    let chol = nalgebra::Cholesky::new(gram).ok_or(EmError::RankDeficientFeatures)?;
    Ok(chol.solve(&features.tr_mul(&means)))
}

/// `F_k = (sum a_k E[a]^T) (sum E[a a^T] + ridge I)^{-1}` over the instances
/// annotator `k` rated.
pub fn m_step_f(
    annotator_id: &str,
    pairs: &[(&DVector<f64>, &LatentEstimate)],
    ridge: f64,
) -> Result<DMatrix<f64>, EmError> {
    let Some((_, first)) = pairs.first() else {
        return Err(EmError::NoRecords(annotator_id.to_string()));
    };
    let d = first.mean.len();
    let mut second = DMatrix::identity(d, d) * ridge;
    let mut cross = DMatrix::zeros(d, d);
    for (rating, est) in pairs {
        second += est.second_moment();
        cross += *rating * est.mean.transpose();
    }
    let chol = nalgebra::Cholesky::new(second)
        .ok_or_else(|| EmError::SingularSecondMoment(annotator_id.to_string()))?;
    // second moment is symmetric: F^T = S^{-1} C^T
    Ok(chol.solve(&cross.transpose()).transpose())
}

/// `sigma2 = 1/(M D) sum_m (tr cov_m + |E[a_m] - theta^T x_m|^2)`, floored.
pub fn m_step_sigma2(
    features: &DMatrix<f64>,
    estimates: &[LatentEstimate],
    theta: &DMatrix<f64>,
) -> f64 {
    let d = theta.ncols();
    let total: f64 = estimates
        .iter()
        .enumerate()
        .map(|(m, est)| {
            let prior = theta.tr_mul(&features.row(m).transpose());
            est.cov.trace() + (&est.mean - prior).norm_squared()
        })
        .sum();
    (total / (estimates.len() * d) as f64).max(VARIANCE_FLOOR)
}

/// `tau_k^2 = 1/(M_k D) sum (|a_k - F_k E[a]|^2 + tr(F_k cov F_k^T))`, floored.
pub fn m_step_tau2(pairs: &[(&DVector<f64>, &LatentEstimate)], transform: &DMatrix<f64>) -> f64 {
    if pairs.is_empty() {
        return VARIANCE_FLOOR;
    }
    let d = transform.nrows();
    let total: f64 = pairs
        .iter()
        .map(|(rating, est)| {
            (*rating - transform * &est.mean).norm_squared()
                + (transform * &est.cov * transform.transpose()).trace()
        })
        .sum();
    (total / (pairs.len() * d) as f64).max(VARIANCE_FLOOR)
}

/// Training data flattened into index form, built once per fit.
struct Problem {
    features: DMatrix<f64>,
    instance_ids: Vec<String>,
    annotator_ids: Vec<String>,
    /// per instance: (annotator index, rating), sorted by annotator id
    groups: Vec<Vec<(usize, DVector<f64>)>>,
    /// per annotator: (instance index, position inside that instance's group)
    by_annotator: Vec<Vec<(usize, usize)>>,
}

impl Problem {
    fn new(dataset: &Dataset) -> Result<Self, EmError> {
        let annotator_ids: Vec<String> =
            dataset.annotator_ids().into_iter().map(String::from).collect();
        let index: BTreeMap<&str, usize> = annotator_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut groups = Vec::with_capacity(dataset.instances().len());
        let mut by_annotator = vec![Vec::new(); annotator_ids.len()];
        for (m, recs) in dataset.records_by_instance().into_iter().enumerate() {
            let ratings = complete_ratings(&recs)?;
            let group: Vec<(usize, DVector<f64>)> = recs
                .iter()
                .zip(ratings)
                .map(|(r, v)| (index[r.annotator_id.as_str()], v))
                .collect();
            for (pos, (k, _)) in group.iter().enumerate() {
                by_annotator[*k].push((m, pos));
            }
            groups.push(group);
        }
        Ok(Self {
            features: dataset.feature_matrix(),
            instance_ids: dataset.instances().iter().map(|i| i.id.clone()).collect(),
            annotator_ids,
            groups,
            by_annotator,
        })
    }

    fn annotator_pairs<'a>(
        &'a self,
        k: usize,
        estimates: &'a [LatentEstimate],
    ) -> Vec<(&'a DVector<f64>, &'a LatentEstimate)> {
        self.by_annotator[k]
            .iter()
            .map(|&(m, pos)| (&self.groups[m][pos].1, &estimates[m]))
            .collect()
    }
}

struct Params {
    theta: DMatrix<f64>,
    sigma2: f64,
    annotators: Vec<AnnotatorParams>,
}

fn m_pass(problem: &Problem, estimates: &[LatentEstimate], ridge: f64) -> Result<Params, EmError> {
    let theta = m_step_theta(&problem.features, estimates, ridge)?;
    let sigma2 = m_step_sigma2(&problem.features, estimates, &theta);
    let annotators = (0..problem.annotator_ids.len())
        .map(|k| {
            let pairs = problem.annotator_pairs(k, estimates);
            let transform = m_step_f(&problem.annotator_ids[k], &pairs, ridge)?;
            let noise_var = m_step_tau2(&pairs, &transform);
            Ok(AnnotatorParams {
                transform,
                noise_var,
            })
        })
        .collect::<Result<Vec<_>, EmError>>()?;
    Ok(Params {
        theta,
        sigma2,
        annotators,
    })
}

fn e_pass(
    problem: &Problem,
    params: &Params,
    ridge: f64,
) -> Result<(Vec<LatentEstimate>, f64), EmError> {
    let mut estimates = Vec::with_capacity(problem.groups.len());
    let mut total = 0.0;
    for (m, group) in problem.groups.iter().enumerate() {
        let obs: Vec<Observation<'_>> = group
            .iter()
            .map(|(k, rating)| Observation {
                transform: &params.annotators[*k].transform,
                noise_var: params.annotators[*k].noise_var,
                rating,
            })
            .collect();
        let prior = params.theta.tr_mul(&problem.features.row(m).transpose());
        let (est, ll) = condition(prior, params.sigma2, &obs, ridge)
            .ok_or_else(|| EmError::SingularPosterior(problem.instance_ids[m].clone()))?;
        estimates.push(est);
        total += ll;
    }
    Ok((estimates, total))
}

fn to_model(dataset: &Dataset, problem: &Problem, params: Params) -> FusionModel {
    FusionModel {
        dimensions: dataset.dimensions().clone(),
        theta: params.theta,
        sigma2: params.sigma2,
        annotators: problem
            .annotator_ids
            .iter()
            .cloned()
            .zip(params.annotators)
            .collect(),
    }
}

/// One full M-step over `dataset` given per-instance latent estimates
/// (canonical instance order).
pub fn m_step(
    dataset: &Dataset,
    estimates: &[LatentEstimate],
    ridge: f64,
) -> Result<FusionModel, EmError> {
    check_count(dataset.instances().len(), estimates.len())?;
    let problem = Problem::new(dataset)?;
    let params = m_pass(&problem, estimates, ridge)?;
    Ok(to_model(dataset, &problem, params))
}

/// Per-instance mean of the annotation vectors, with zero covariance.
fn mean_initialization(problem: &Problem, d: usize) -> Result<Vec<LatentEstimate>, EmError> {
    problem
        .groups
        .iter()
        .enumerate()
        .map(|(m, group)| {
            if group.is_empty() {
                return Err(EmError::UnratedInstance(problem.instance_ids[m].clone()));
            }
            let sum = group
                .iter()
                .fold(DVector::zeros(d), |acc: DVector<f64>, (_, v)| acc + v);
            Ok(LatentEstimate {
                mean: sum / group.len() as f64,
                cov: DMatrix::zeros(d, d),
            })
        })
        .collect()
}

/// Fits the model by EM.
///
/// Initialization uses the per-instance mean of the annotations as a hard
/// latent estimate, followed by one M-step. Iteration stops when the relative
/// change of the marginal log-likelihood drops below `rel_tol` or after
/// `max_iters` E/M rounds.
pub fn fit_em(dataset: &Dataset, config: &EmConfig) -> Result<(FusionModel, EmTrace), EmError> {
    config.validate()?;
    dataset
        .validate(ValidationMode::Training)
        .map_err(EmError::InvalidDataset)?;
    let problem = Problem::new(dataset)?;
    let d = dataset.dimensions().len();

    let init = mean_initialization(&problem, d)?;
    let mut params = m_pass(&problem, &init, config.ridge)?;
    let (mut estimates, mut ll) = e_pass(&problem, &params, config.ridge)?;
    let mut trace = vec![ll];
    let mut iterations = 0;

    let termination = loop {
        if iterations >= config.max_iters {
            break Termination::MaxIters;
        }
        let next = m_pass(&problem, &estimates, config.ridge)?;
        iterations += 1;
        let (next_estimates, next_ll) = e_pass(&problem, &next, config.ridge)?;
        if next_ll < ll - MONOTONE_SLACK * ll.abs().max(1.0) {
            return Err(EmError::NonMonotone {
                iteration: iterations,
                previous: ll,
                current: next_ll,
            });
        }
        log::debug!("em iteration {iterations}: log-likelihood {next_ll}");
        trace.push(next_ll);
        let change = if ll == 0.0 {
            (next_ll - ll).abs()
        } else {
            ((next_ll - ll) / ll).abs()
        };
        params = next;
        estimates = next_estimates;
        ll = next_ll;
        if change < config.rel_tol {
            break Termination::Converged;
        }
    };

    Ok((
        to_model(dataset, &problem, params),
        EmTrace {
            log_likelihoods: trace,
            iterations,
            termination,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dimensions;
    use approx::assert_abs_diff_eq;

    fn scalar_model(f: f64, tau2: f64, sigma2: f64, theta: f64) -> FusionModel {
        let mut annotators = BTreeMap::new();
        annotators.insert(
            "k".to_string(),
            AnnotatorParams {
                transform: DMatrix::from_element(1, 1, f),
                noise_var: tau2,
            },
        );
        FusionModel {
            dimensions: Dimensions::new(["v"]).unwrap(),
            theta: DMatrix::from_element(1, 1, theta),
            sigma2,
            annotators,
        }
    }

    fn est(mean: &[f64], cov_diag: f64) -> LatentEstimate {
        let d = mean.len();
        LatentEstimate {
            mean: DVector::from_row_slice(mean),
            cov: DMatrix::identity(d, d) * cov_diag,
        }
    }

    #[test]
    fn scalar_log_likelihood_matches_hand_value() {
        let model = scalar_model(1.0, 1.0, 1.0, 0.0);
        let ds = Dataset::new(
            model.dimensions.clone(),
            vec![Instance::new("w", vec![0.0])],
            vec![AnnotationRecord::complete("w", "k", &[0.0])],
        );
        let ll = log_likelihood(&model, &ds).unwrap();
        assert_abs_diff_eq!(ll, -0.5 * (4.0 * PI).ln(), epsilon = 1e-14);
    }

    #[test]
    fn empty_annotations_give_zero_log_likelihood() {
        let model = scalar_model(1.0, 1.0, 1.0, 0.3);
        let ds = Dataset::new(
            model.dimensions.clone(),
            vec![Instance::new("w", vec![2.0])],
            vec![],
        );
        assert_eq!(log_likelihood(&model, &ds).unwrap(), 0.0);
    }

    #[test]
    fn e_step_without_records_is_prior() {
        let model = scalar_model(1.0, 1.0, 0.7, 2.0);
        let e = e_step(&model, &Instance::new("w", vec![1.5]), &[]).unwrap();
        assert_abs_diff_eq!(e.mean[0], 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.cov[(0, 0)], 0.7, epsilon = 1e-15);
    }

    #[test]
    fn noiseless_identity_observation_dominates() {
        let d = 3;
        let mut annotators = BTreeMap::new();
        annotators.insert(
            "k".to_string(),
            AnnotatorParams {
                transform: DMatrix::identity(d, d),
                noise_var: 1e-12,
            },
        );
        let model = FusionModel {
            dimensions: Dimensions::default_for(d).unwrap(),
            theta: DMatrix::from_element(2, d, 0.4),
            sigma2: 0.5,
            annotators,
        };
        let rec = AnnotationRecord::complete("w", "k", &[1.0, -2.0, 3.5]);
        let e = e_step(&model, &Instance::new("w", vec![1.0, 1.0]), &[&rec]).unwrap();
        for (got, want) in e.mean.iter().zip([1.0, -2.0, 3.5]) {
            assert!((got - want).abs() < 1e-5);
        }
        assert!(e.cov.amax() < 1e-10);
    }

    #[test]
    fn e_step_rejects_partial_and_unknown() {
        let model = scalar_model(1.0, 1.0, 1.0, 0.0);
        let inst = Instance::new("w", vec![0.0]);
        let partial = AnnotationRecord::new("w", "k", vec![None]);
        assert!(matches!(
            e_step(&model, &inst, &[&partial]),
            Err(EmError::IncompleteRecord { .. })
        ));
        let stranger = AnnotationRecord::complete("w", "zz", &[1.0]);
        assert!(matches!(
            e_step(&model, &inst, &[&stranger]),
            Err(EmError::UnknownAnnotator(_))
        ));
    }

    #[test]
    fn theta_update_examples() {
        let a = vec![est(&[1.0, 2.0], 0.0), est(&[-3.0, 4.0], 0.0)];
        let theta = m_step_theta(&DMatrix::identity(2, 2), &a, 0.0).unwrap();
        assert_eq!(theta, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 4.0]));

        let x = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let theta = m_step_theta(&x, &[est(&[2.0], 0.0), est(&[4.0], 0.0)], 0.0).unwrap();
        assert_abs_diff_eq!(theta[(0, 0)], 2.0, epsilon = 1e-14);

        let theta = m_step_theta(&x, &[est(&[0.0], 0.3), est(&[0.0], 0.3)], 1e-8).unwrap();
        assert_eq!(theta.amax(), 0.0);
    }

    #[test]
    fn theta_update_rejects_rank_deficient_features() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let r = m_step_theta(&x, &[est(&[1.0], 0.0), est(&[2.0], 0.0)], 0.0);
        assert!(matches!(r, Err(EmError::RankDeficientFeatures)));
    }

    #[test]
    fn f_update_examples() {
        // self-regression: ratings equal to posterior means that span R^2
        let means = [est(&[1.0, 0.0], 0.0), est(&[0.0, 1.0], 0.0), est(&[1.0, 1.0], 0.0)];
        let ratings: Vec<DVector<f64>> = means.iter().map(|e| e.mean.clone()).collect();
        let pairs: Vec<_> = ratings.iter().zip(means.iter()).collect();
        let f = m_step_f("k", &pairs, 0.0).unwrap();
        assert!((f - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);

        let r = [DVector::from_element(1, 2.0), DVector::from_element(1, 4.0)];
        let m = [est(&[1.0], 0.0), est(&[2.0], 0.0)];
        let pairs: Vec<_> = r.iter().zip(m.iter()).collect();
        assert_abs_diff_eq!(m_step_f("k", &pairs, 0.0).unwrap()[(0, 0)], 2.0, epsilon = 1e-14);

        let zeros = [DVector::zeros(2), DVector::zeros(2), DVector::zeros(2)];
        let pairs: Vec<_> = zeros.iter().zip(means.iter()).collect();
        assert_eq!(m_step_f("k", &pairs, 1e-8).unwrap().amax(), 0.0);
    }

    #[test]
    fn f_update_reports_singular_annotator() {
        let r = [DVector::from_element(2, 1.0)];
        let m = [est(&[1.0, 1.0], 0.0)];
        let pairs: Vec<_> = r.iter().zip(m.iter()).collect();
        match m_step_f("ann-7", &pairs, 0.0) {
            Err(EmError::SingularSecondMoment(id)) => assert_eq!(id, "ann-7"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sigma2_update_examples() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let theta = DMatrix::from_row_slice(1, 2, &[0.5, 2.0]);
        let exact: Vec<LatentEstimate> = (0..2)
            .map(|m| LatentEstimate {
                mean: theta.tr_mul(&x.row(m).transpose()),
                cov: DMatrix::identity(2, 2) * 0.25,
            })
            .collect();
        assert_abs_diff_eq!(m_step_sigma2(&x, &exact, &theta), 0.25, epsilon = 1e-15);

        let x1 = DMatrix::from_element(1, 1, 1.0);
        let t1 = DMatrix::from_element(1, 1, 1.0);
        // E[a]=2, E[a^2]=4 -> zero posterior variance
        assert_abs_diff_eq!(m_step_sigma2(&x1, &[est(&[2.0], 0.0)], &t1), 1.0, epsilon = 1e-15);
        assert_eq!(m_step_sigma2(&x1, &[est(&[1.0], 0.0)], &t1), VARIANCE_FLOOR);
    }

    #[test]
    fn tau2_update_examples() {
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]);
        let means = [est(&[1.0, 2.0], 0.0), est(&[-1.0, 0.5], 0.0)];
        let ratings: Vec<DVector<f64>> = means.iter().map(|e| &f * &e.mean).collect();
        let pairs: Vec<_> = ratings.iter().zip(means.iter()).collect();
        assert_eq!(m_step_tau2(&pairs, &f), VARIANCE_FLOOR);

        let r = [DVector::from_element(1, 3.0)];
        let m = [est(&[1.0], 0.0)];
        let pairs: Vec<_> = r.iter().zip(m.iter()).collect();
        assert_abs_diff_eq!(
            m_step_tau2(&pairs, &DMatrix::from_element(1, 1, 1.0)),
            4.0,
            epsilon = 1e-15
        );

        // F = 0: every rating is noise, tau2 = mean square
        let r = [DVector::from_row_slice(&[1.0, 3.0]), DVector::from_row_slice(&[-2.0, 2.0])];
        let pairs: Vec<_> = r.iter().zip(means.iter()).collect();
        assert_abs_diff_eq!(m_step_tau2(&pairs, &DMatrix::zeros(2, 2)), 4.5, epsilon = 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(EmConfig::default().validate().is_ok());
        let bad = EmConfig {
            max_iters: 0,
            ..EmConfig::default()
        };
        assert!(matches!(bad.validate(), Err(EmError::InvalidConfig(_))));
    }
}
