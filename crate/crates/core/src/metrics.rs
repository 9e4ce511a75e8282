//! Agreement metrics between predicted and reference series, plus the
//! training-error learnability proxy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} paired values, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("series contain non-finite values")]
    NonFinite,
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
}

/// Two equally long, finite series.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSeries {
    predictions: Vec<f64>,
    references: Vec<f64>,
}

impl PairedSeries {
    pub fn new(predictions: Vec<f64>, references: Vec<f64>) -> Result<Self, MetricError> {
        if predictions.len() != references.len() {
            return Err(MetricError::LengthMismatch(predictions.len(), references.len()));
        }
        if predictions.is_empty() {
            return Err(MetricError::TooShort { needed: 1, got: 0 });
        }
        if predictions.iter().chain(&references).any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite);
        }
        Ok(Self {
            predictions,
            references,
        })
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn predictions(&self) -> &[f64] {
        &self.predictions
    }

    pub fn references(&self) -> &[f64] {
        &self.references
    }

    fn require(&self, n: usize) -> Result<(), MetricError> {
        if self.len() < n {
            return Err(MetricError::TooShort {
                needed: n,
                got: self.len(),
            });
        }
        Ok(())
    }

    /// Means, population variances and covariance (1/n divisors).
    fn moments(&self) -> Moments {
        let n = self.len() as f64;
        let mx = self.predictions.iter().sum::<f64>() / n;
        let my = self.references.iter().sum::<f64>() / n;
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for (x, y) in self.predictions.iter().zip(&self.references) {
            let (dx, dy) = (x - mx, y - my);
            sxx += dx * dx;
            syy += dy * dy;
            sxy += dx * dy;
        }
        Moments {
            mean_x: mx,
            mean_y: my,
            var_x: sxx / n,
            var_y: syy / n,
            cov: sxy / n,
        }
    }
}

struct Moments {
    mean_x: f64,
    mean_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

/// Lin's concordance correlation coefficient with population estimators:
/// `2 s_xy / (s_x^2 + s_y^2 + (mean_x - mean_y)^2)`.
pub fn ccc(series: &PairedSeries) -> Result<f64, MetricError> {
    series.require(2)?;
    let m = series.moments();
    let denom = m.var_x + m.var_y + (m.mean_x - m.mean_y).powi(2);
    if denom == 0.0 {
        return Err(MetricError::Undefined("both series constant and equal"));
    }
    Ok(2.0 * m.cov / denom)
}

pub fn pearson(series: &PairedSeries) -> Result<f64, MetricError> {
    series.require(2)?;
    let m = series.moments();
    if m.var_x == 0.0 || m.var_y == 0.0 {
        return Err(MetricError::Undefined("constant series"));
    }
    Ok((m.cov / (m.var_x.sqrt() * m.var_y.sqrt())).clamp(-1.0, 1.0))
}

pub fn mse(series: &PairedSeries) -> f64 {
    series
        .predictions
        .iter()
        .zip(&series.references)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / series.len() as f64
}

/// Training MSE of a ridge regression (with unpenalized intercept) of
/// `labels` on the rows of `features`. Lower means the labels are easier to
/// learn from the features.
pub fn learnability(
    features: &DMatrix<f64>,
    labels: &[f64],
    ridge: f64,
) -> Result<f64, MetricError> {
    let m = labels.len();
    if features.nrows() != m {
        return Err(MetricError::LengthMismatch(features.nrows(), m));
    }
    if m < 2 {
        return Err(MetricError::TooShort { needed: 2, got: m });
    }
    let p = features.ncols();
    let y = DVector::from_row_slice(labels);
    let y_mean = y.mean();
    let col_means = features.row_mean();
    let mut xc = features.clone();
    for mut row in xc.row_iter_mut() {
        row -= &col_means;
    }
    let yc = y.add_scalar(-y_mean);
    let gram = xc.tr_mul(&xc) + DMatrix::identity(p, p) * ridge.max(0.0);
    let rhs = xc.tr_mul(&yc);
    let weights = match nalgebra::Cholesky::new(gram.clone()) {
        Some(c) => c.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|_| MetricError::Undefined("degenerate feature matrix"))?,
    };
    let resid = &yc - &xc * weights;
    Ok(resid.norm_squared() / m as f64)
}

/// A metric value, or an explicit marker for metrics that are undefined on
/// the given data (e.g. correlation of a constant series).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Value(f64),
    Undefined { undefined: String },
}

impl MetricValue {
    pub fn value(&self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(*v),
            MetricValue::Undefined { .. } => None,
        }
    }

    fn from_result(r: Result<f64, MetricError>) -> Self {
        match r {
            Ok(v) => MetricValue::Value(v),
            Err(e) => MetricValue::Undefined {
                undefined: e.to_string(),
            },
        }
    }

    fn render(&self) -> String {
        match self {
            MetricValue::Value(v) => format!("{v:.6}"),
            MetricValue::Undefined { .. } => "undefined".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Ccc,
    Pearson,
    Mse,
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "ccc" => Ok(Metric::Ccc),
            "pearson" => Ok(Metric::Pearson),
            "mse" => Ok(Metric::Mse),
            other => Err(format!("unknown metric `{other}` (expected ccc|pearson|mse)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionMetrics {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ccc: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pearson: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learnability: Option<MetricValue>,
}

impl DimensionMetrics {
    pub fn compute(series: &PairedSeries, metrics: &[Metric]) -> Self {
        let want = |m: Metric| metrics.contains(&m);
        Self {
            n: series.len(),
            ccc: want(Metric::Ccc).then(|| MetricValue::from_result(ccc(series))),
            pearson: want(Metric::Pearson).then(|| MetricValue::from_result(pearson(series))),
            mse: want(Metric::Mse).then(|| MetricValue::Value(mse(series))),
            learnability: None,
        }
    }

    pub fn with_learnability(mut self, value: Result<f64, MetricError>) -> Self {
        self.learnability = Some(MetricValue::from_result(value));
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dimensions: BTreeMap<String, DimensionMetrics>,
}

impl MetricsReport {
    /// Plain-text table, one row per dimension.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>12} {:>12} {:>12} {:>12}",
            "dimension", "n", "ccc", "pearson", "mse", "learnability"
        );
        let cell = |v: &Option<MetricValue>| v.as_ref().map_or("-".to_string(), MetricValue::render);
        for (name, m) in &self.dimensions {
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>12} {:>12} {:>12} {:>12}",
                name,
                m.n,
                cell(&m.ccc),
                cell(&m.pearson),
                cell(&m.mse),
                cell(&m.learnability)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn s(x: &[f64], y: &[f64]) -> PairedSeries {
        PairedSeries::new(x.to_vec(), y.to_vec()).unwrap()
    }

    #[test]
    fn ccc_golden_values() {
        assert_abs_diff_eq!(ccc(&s(&[1., 2., 3.], &[1., 2., 3.])).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ccc(&s(&[1., 2., 3.], &[3., 2., 1.])).unwrap(), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            ccc(&s(&[1., 2., 3.], &[2., 3., 4.])).unwrap(),
            4.0 / 7.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn pearson_golden_values() {
        assert_abs_diff_eq!(pearson(&s(&[1., 2., 3.], &[2., 4., 6.])).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pearson(&s(&[1., 2., 3.], &[3., 2., 1.])).unwrap(), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pearson(&s(&[1., 2., 3.], &[2., 3., 4.])).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn mse_golden_values() {
        assert_eq!(mse(&s(&[1., 5.], &[1., 5.])), 0.0);
        assert_eq!(mse(&s(&[0., 0.], &[1., 3.])), 5.0);
        assert_eq!(mse(&s(&[2.], &[5.])), 9.0);
    }

    #[test]
    fn undefined_metrics() {
        assert!(matches!(
            ccc(&s(&[2., 2.], &[2., 2.])),
            Err(MetricError::Undefined(_))
        ));
        assert!(matches!(
            pearson(&s(&[1., 2.], &[2., 2.])),
            Err(MetricError::Undefined(_))
        ));
        assert!(matches!(ccc(&s(&[1.], &[2.])), Err(MetricError::TooShort { .. })));
        assert!(PairedSeries::new(vec![1.0], vec![]).is_err());
        assert!(PairedSeries::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn learnability_realizable_and_constant() {
        let x = DMatrix::from_fn(20, 3, |r, c| ((r * 7 + c * 3) % 11) as f64 - 5.0 + (r * c) as f64 * 0.1);
        let labels: Vec<f64> = (0..20)
            .map(|r| 0.5 * x[(r, 0)] - 2.0 * x[(r, 1)] + x[(r, 2)] + 4.0)
            .collect();
        assert!(learnability(&x, &labels, 1e-12).unwrap() < 1e-10);
        assert_eq!(learnability(&x, &[3.25; 20], 1e-6).unwrap(), 0.0);
    }

    #[test]
    fn report_marks_undefined_explicitly() {
        let series = s(&[1., 1., 1.], &[1., 2., 3.]);
        let m = DimensionMetrics::compute(&series, &[Metric::Ccc, Metric::Pearson, Metric::Mse]);
        assert!(matches!(m.pearson, Some(MetricValue::Undefined { .. })));
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("undefined"));
        let mut report = MetricsReport::default();
        report.dimensions.insert("valence".into(), m);
        assert!(report.render_table().contains("undefined"));
    }
}
