//! Joint multidimensional annotation fusion.
//!
//! Fits a latent linear-Gaussian annotation model by EM ([`em`]), predicts
//! held-out rating dimensions from partial annotations using the learned
//! annotator transforms ([`predict`]), and ships word-aggregation baselines
//! ([`baselines`]), agreement metrics ([`metrics`]), a seeded synthetic data
//! generator with brute-force oracles ([`synth`]), and the file formats used
//! by the `normfusion` command-line tool ([`io`], [`cli`]).

pub mod baselines;
pub mod cli;
pub mod em;
pub mod io;
mod linalg;
pub mod metrics;
pub mod model;
pub mod predict;
pub mod synth;

pub use em::{fit_em, EmConfig, EmError, EmTrace, Termination};
pub use model::{
    AnnotationRecord, AnnotatorParams, Dataset, Dimensions, FusionModel, Instance,
    LatentEstimate, ValidationMode,
};
pub use predict::{predict_dataset, predict_instance, ConditionFlag, Prediction, PredictionConfig};
