#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use normfusion::{
    AnnotationRecord, AnnotatorParams, Dataset, Dimensions, FusionModel, Instance, LatentEstimate,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Random model with moderately conditioned transforms and variances.
pub fn random_model(rng: &mut ChaCha8Rng, p: usize, d: usize, k: usize) -> FusionModel {
    let annotators: BTreeMap<String, AnnotatorParams> = (0..k)
        .map(|i| {
            let transform = DMatrix::identity(d, d) + DMatrix::from_fn(d, d, |_, _| 0.4 * gauss(rng));
            (
                format!("k{i}"),
                AnnotatorParams {
                    transform,
                    noise_var: rng.random_range(0.2..1.5),
                },
            )
        })
        .collect();
    FusionModel {
        dimensions: Dimensions::default_for(d).unwrap(),
        theta: DMatrix::from_fn(p, d, |_, _| gauss(rng)),
        sigma2: rng.random_range(0.3..1.5),
        annotators,
    }
}

/// Complete ratings from every annotator in `model` for one random instance.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    model: &FusionModel,
    id: &str,
    raters: usize,
) -> (Instance, Vec<AnnotationRecord>) {
    let p = model.num_features();
    let d = model.dimensions.len();
    let inst = Instance::new(id, (0..p).map(|_| gauss(rng)).collect::<Vec<_>>());
    let recs = model
        .annotators
        .keys()
        .take(raters)
        .map(|k| {
            let v: Vec<f64> = (0..d).map(|_| 2.0 * gauss(rng)).collect();
            AnnotationRecord::complete(id, k.clone(), &v)
        })
        .collect();
    (inst, recs)
}

pub fn random_dataset(rng: &mut ChaCha8Rng, model: &FusionModel, m: usize) -> Dataset {
    let k = model.annotators.len();
    let mut instances = Vec::new();
    let mut records = Vec::new();
    for i in 0..m {
        let raters = rng.random_range(1..=k);
        let (inst, recs) = random_instance(rng, model, &format!("s{i:03}"), raters);
        instances.push(inst);
        records.extend(recs);
    }
    Dataset::new(model.dimensions.clone(), instances, records)
}

/// Log-density of the stacked annotations of one instance, evaluated by
/// assembling the dense joint covariance `sigma2 G G^T + R` and factoring it.
pub fn dense_log_marginal(model: &FusionModel, inst: &Instance, recs: &[&AnnotationRecord]) -> f64 {
    let d = model.dimensions.len();
    let s = recs.len();
    let n = s * d;
    let mu = model.prior_mean(&inst.features);
    let mut cov = DMatrix::zeros(n, n);
    let mut resid = DVector::zeros(n);
    for (j, rj) in recs.iter().enumerate() {
        let pj = &model.annotators[&rj.annotator_id];
        for (k, rk) in recs.iter().enumerate() {
            let pk = &model.annotators[&rk.annotator_id];
            let mut block = &pj.transform * pk.transform.transpose() * model.sigma2;
            if j == k {
                block += DMatrix::identity(d, d) * pj.noise_var;
            }
            cov.view_mut((j * d, k * d), (d, d)).copy_from(&block);
        }
        let r = rj.full_vector().unwrap() - &pj.transform * &mu;
        resid.rows_mut(j * d, d).copy_from(&r);
    }
    let chol = cov.cholesky().expect("joint covariance is SPD");
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = resid.dot(&chol.solve(&resid));
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
}

pub fn rel_frobenius(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    (estimate - truth).norm() / truth.norm()
}

/// Pearson correlation computed directly (kept independent of the library).
pub fn corr(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

/// Max-norm of the central-difference gradient of Q over every model parameter.
pub fn q_gradient_max(model: &FusionModel, ds: &Dataset, est: &[LatentEstimate]) -> f64 {
    let h = 1e-5;
    let q = |m: &FusionModel| normfusion::em::expected_complete_log_likelihood(m, ds, est).unwrap();
    let central = |bump: &dyn Fn(&mut FusionModel, f64)| {
        let mut plus = model.clone();
        bump(&mut plus, h);
        let mut minus = model.clone();
        bump(&mut minus, -h);
        (q(&plus) - q(&minus)) / (2.0 * h)
    };
    let mut worst: f64 = 0.0;
    for i in 0..model.theta.len() {
        worst = worst.max(central(&|m, e| m.theta[i] += e).abs());
    }
    worst = worst.max(central(&|m, e| m.sigma2 += e).abs());
    for id in model.annotators.keys() {
        let d2 = model.annotators[id].transform.len();
        for i in 0..d2 {
            worst = worst.max(
                central(&|m, e| m.annotators.get_mut(id).unwrap().transform[i] += e).abs(),
            );
        }
        worst = worst.max(central(&|m, e| m.annotators.get_mut(id).unwrap().noise_var += e).abs());
    }
    worst
}
