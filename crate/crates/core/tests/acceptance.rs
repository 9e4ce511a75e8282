//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use normfusion::baselines::{
    aggregate_norms, content_words, Aggregator, NormLexicon, StopList, DEFAULT_STOPWORDS,
};
use normfusion::em::{e_step, e_step_dataset, log_likelihood, m_step};
use normfusion::metrics::{ccc, pearson, PairedSeries};
use normfusion::synth::{
    generate, generate_with_model, oracle_condition, oracle_loglik_mc, FStyle, MissingPattern,
    SimSpec,
};
use normfusion::{
    fit_em, predict_dataset, AnnotationRecord, ConditionFlag, Dimensions, EmConfig,
    PredictionConfig,
};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    if took > limit {
        Err(format!("took {took:.2?}, limit {limit:?}"))
    } else {
        Ok(took)
    }
}

fn em_monotonicity() -> Outcome {
    let start = Instant::now();
    let mut worst_drop: f64 = 0.0;
    let mut fits = 0;
    for (i, (m, k)) in [(50, 5), (50, 20), (200, 5), (200, 20)]
        .into_iter()
        .cycle()
        .take(100)
        .enumerate()
    {
        let spec = SimSpec {
            m,
            k,
            d: 3,
            ratings_per_instance: k.min(6),
            seed: 1000 + i as u64,
            ..SimSpec::default()
        };
        let (ds, _) = generate(&spec).map_err(|e| e.to_string())?;
        let (_, trace) = fit_em(&ds, &EmConfig::default())
            .map_err(|e| format!("dataset {i} (M={m}, K={k}): {e}"))?;
        for w in trace.log_likelihoods.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
        fits += 1;
    }
    let took = within(Duration::from_secs(120), start)?;
    check(
        worst_drop <= 1e-8,
        format!("{fits} fits, largest LL decrease {worst_drop:.3e}, {took:.2?}"),
    )
}

fn e_step_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let d = 1 + case % 3;
        let k = 1 + (case / 3) % 3;
        let p = 1 + case % 4;
        let model = random_model(&mut r, p, d, k);
        let (inst, recs) = random_instance(&mut r, &model, "x", k);
        let refs: Vec<&AnnotationRecord> = recs.iter().collect();
        let fast = e_step(&model, &inst, &refs).map_err(|e| e.to_string())?;
        let slow = oracle_condition(&model, &inst, &refs).map_err(|e| e.to_string())?;
        worst = worst
            .max((&fast.mean - &slow.mean).amax())
            .max((&fast.cov - &slow.cov).amax());
    }
    let took = within(Duration::from_secs(10), start)?;
    check(worst <= 1e-8, format!("1000 cases, max elementwise gap {worst:.3e}, {took:.2?}"))
}

fn likelihood_cross_check() -> Outcome {
    let start = Instant::now();
    let mut r = rng(77);
    let mut worst_z: f64 = 0.0;
    for case in 0..20 {
        let d = 1 + case % 2;
        let model = random_model(&mut r, 2, d, 2);
        let ds = random_dataset(&mut r, &model, 2);
        let ll = log_likelihood(&model, &ds).map_err(|e| e.to_string())?;
        let (est, se) =
            oracle_loglik_mc(&model, &ds, 400_000, 500 + case as u64).map_err(|e| e.to_string())?;
        worst_z = worst_z.max((ll - est).abs() / se);
    }
    let took = within(Duration::from_secs(60), start)?;
    check(worst_z <= 3.0, format!("20 cases, max |LL - MC| = {worst_z:.2} SE, {took:.2?}"))
}

fn parameter_recovery() -> Outcome {
    let start = Instant::now();
    let spec = SimSpec {
        m: 500,
        p: 8,
        d: 3,
        k: 10,
        ratings_per_instance: 10,
        sigma: 0.3,
        tau_range: [0.1, 0.1],
        f_style: FStyle::Coupled { off_diag_mass: 0.3 },
        seed: 7,
        ..SimSpec::default()
    };
    let (ds, truth) = generate(&spec).map_err(|e| e.to_string())?;
    let (model, _) = fit_em(&ds, &EmConfig::default()).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for id in truth.model.annotators.keys() {
        let est = model.mixing_product(id).ok_or(format!("annotator {id} missing"))?;
        worst = worst.max(rel_frobenius(&est, &truth.model.mixing_product(id).unwrap()));
    }
    let took = within(Duration::from_secs(60), start)?;
    check(worst < 0.05, format!("max relative Frobenius error of F_k Theta^T {worst:.4}, {took:.2?}"))
}

fn held_out_prediction() -> Outcome {
    let word = SimSpec {
        m: 500,
        k: 21,
        ratings_per_instance: 21,
        tau_range: [0.1, 0.1],
        f_style: FStyle::Coupled { off_diag_mass: 0.3 },
        seed: 31,
        ..SimSpec::default()
    };
    let (words, _) = generate(&word).map_err(|e| e.to_string())?;
    let (fitted, _) = fit_em(&words, &EmConfig::default()).map_err(|e| e.to_string())?;
    let mut details = Vec::new();
    let mut ok = true;
    for (di, dim) in fitted.dimensions.names().iter().enumerate() {
        let sent = SimSpec {
            missing_pattern: MissingPattern::DropDim { dim: dim.clone() },
            seed: 40 + di as u64,
            ..SimSpec::sentence_scale()
        };
        let (ds, truth) = generate_with_model(&fitted, &sent).map_err(|e| e.to_string())?;
        let report = predict_dataset(&fitted, &ds, &PredictionConfig::new(dim.as_str()))
            .map_err(|e| e.to_string())?;
        if report.predictions.len() != 100 {
            return Err(format!("{dim}: {} predictions", report.predictions.len()));
        }
        let latent: Vec<f64> = truth.latent.iter().map(|(_, a)| a[di]).collect();
        let predicted: Vec<f64> = report.predictions.iter().map(|p| p.target_value).collect();
        let feature_only: Vec<f64> = ds
            .instances()
            .iter()
            .map(|i| fitted.prior_mean(&i.features)[di])
            .collect();
        let r_pred = corr(&predicted, &latent);
        let r_base = corr(&feature_only, &latent);
        ok &= r_pred > 0.9 && r_pred > r_base;
        details.push(format!("{dim} r={r_pred:.4} vs Theta^T x r={r_base:.4}"));
    }
    check(ok, details.join("; "))
}

fn identity_degeneracy() -> Outcome {
    let spec = SimSpec {
        f_style: FStyle::Identity,
        missing_pattern: MissingPattern::DropDim {
            dim: "arousal".into(),
        },
        seed: 5,
        ..SimSpec::sentence_scale()
    };
    let (ds, truth) = generate(&spec).map_err(|e| e.to_string())?;
    let report = predict_dataset(&truth.model, &ds, &PredictionConfig::new("arousal"))
        .map_err(|e| e.to_string())?;
    let flagged = report
        .predictions
        .iter()
        .filter(|p| p.condition_flag == ConditionFlag::RidgeResolved)
        .count();
    check(
        flagged == report.predictions.len() && flagged == 100 && report.failures.is_empty(),
        format!("{flagged}/{} predictions ridge-resolved", report.predictions.len()),
    )
}

fn metric_goldens() -> Outcome {
    let s = |x: &[f64], y: &[f64]| PairedSeries::new(x.to_vec(), y.to_vec()).unwrap();
    let shift = ccc(&s(&[1., 2., 3.], &[2., 3., 4.])).map_err(|e| e.to_string())?;
    let flip = ccc(&s(&[1., 2., 3.], &[3., 2., 1.])).map_err(|e| e.to_string())?;
    let mut r = rng(9);
    let mut violations = 0;
    for _ in 0..10_000 {
        let n = r.random_range(2..40);
        let slope = 3.0 * gauss(&mut r);
        let offset = 2.0 * gauss(&mut r);
        let x: Vec<f64> = (0..n).map(|_| gauss(&mut r)).collect();
        let y: Vec<f64> = x.iter().map(|v| slope * v + offset + gauss(&mut r)).collect();
        let series = s(&x, &y);
        if let (Ok(c), Ok(p)) = (ccc(&series), pearson(&series)) {
            if c.abs() > p.abs() + 1e-12 {
                violations += 1;
            }
        }
    }
    check(
        (shift - 4.0 / 7.0).abs() <= 1e-12 && (flip + 1.0).abs() <= 1e-12 && violations == 0,
        format!("ccc shift {shift}, ccc flip {flip}, {violations} |ccc|>|pearson| violations"),
    )
}

fn m_step_stationarity() -> Outcome {
    let mut r = rng(808);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let d = 1 + case % 3;
        let model = random_model(&mut r, 3, d, 3);
        let ds = random_dataset(&mut r, &model, 20);
        let est = e_step_dataset(&model, &ds).map_err(|e| e.to_string())?;
        let updated = m_step(&ds, &est, 1e-8).map_err(|e| e.to_string())?;
        worst = worst.max(q_gradient_max(&updated, &ds, &est));
    }
    check(worst < 1e-4, format!("50 cases, max |dQ| {worst:.3e}"))
}

fn run_cli(args: &[&str], dir: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_normfusion"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`{}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn end_to_end_pipeline() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    std::fs::write(dir.join("word.toml"), "M = 200\nK = 21\nratings_per_instance = 21\nseed = 12\n")
        .map_err(|e| e.to_string())?;
    std::fs::write(
        dir.join("sentence.toml"),
        "M = 100\nK = 21\nratings_per_instance = 21\nseed = 13\n\n[missing_pattern]\nkind = \"drop_dim\"\ndim = \"valence\"\n",
    )
    .map_err(|e| e.to_string())?;

    let start = Instant::now();
    run_cli(&["simulate", "--spec", "word.toml", "--out-dir", "word"], dir)?;
    run_cli(
        &["train", "--annotations", "word/annotations.csv", "--features", "word/features.csv", "--out", "model.json"],
        dir,
    )?;
    run_cli(
        &["simulate", "--spec", "sentence.toml", "--from-model", "model.json", "--out-dir", "sent"],
        dir,
    )?;
    run_cli(
        &["predict", "--model", "model.json", "--annotations", "sent/annotations.csv", "--target-dim", "valence", "--out", "pred.csv"],
        dir,
    )?;
    let table = run_cli(
        &["eval", "--pred", "pred.csv", "--ref", "sent/latent.csv", "--metrics", "ccc,pearson,mse"],
        dir,
    )?;
    let took = within(Duration::from_secs(30), start)?;
    let header_ok = ["ccc", "pearson", "mse"].iter().all(|m| table.contains(m));
    let row_ok = table.lines().any(|l| l.starts_with("valence"));
    check(header_ok && row_ok, format!("all commands exit 0 in {took:.2?}"))
}

fn baseline_ordering() -> Outcome {
    let mut r = rng(10);
    let dims = Dimensions::default_for(3).unwrap();
    let vocab: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
    let lexicon = NormLexicon::new(
        dims,
        vocab[..250]
            .iter()
            .map(|w| (w.clone(), (0..3).map(|_| 1.0 + 8.0 * r.random::<f64>()).collect())),
    )
    .map_err(|e| e.to_string())?;
    let stop = StopList::english_default();
    let (mut checked, mut violations) = (0, 0);
    for _ in 0..1000 {
        let len = r.random_range(1..25);
        let sentence: Vec<String> = (0..len)
            .map(|_| {
                if r.random_bool(0.2) {
                    DEFAULT_STOPWORDS[r.random_range(0..DEFAULT_STOPWORDS.len())].to_string()
                } else {
                    vocab[r.random_range(0..vocab.len())].clone()
                }
            })
            .collect();
        let agg = |a| aggregate_norms(&sentence, &lexicon, &stop, a);
        let count = content_words(&sentence, &lexicon, &stop).len();
        let all: Vec<_> = Aggregator::ALL.iter().map(|a| agg(*a)).collect();
        let [Some(mean), Some(max), Some(min), Some(sum)] = [&all[0], &all[1], &all[2], &all[3]]
        else {
            if count != 0 || all.iter().any(Option::is_some) {
                violations += 1;
            }
            continue;
        };
        for d in 0..3 {
            let tol = 1e-12 * max[d].abs().max(1.0);
            if !(min[d] <= mean[d] + tol && mean[d] <= max[d] + tol) {
                violations += 1;
            }
            if (sum[d] - mean[d] * count as f64).abs() > 1e-12 * sum[d].abs().max(1.0) {
                violations += 1;
            }
        }
        checked += 1;
    }
    check(violations == 0, format!("{checked} non-empty sentences, {violations} violations"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 EM monotonicity", em_monotonicity),
        ("2 E-step oracle equivalence", e_step_oracle),
        ("3 likelihood Monte Carlo cross-check", likelihood_cross_check),
        ("4 parameter recovery", parameter_recovery),
        ("5 held-out dimension prediction", held_out_prediction),
        ("6 identity degeneracy", identity_degeneracy),
        ("7 metric golden values", metric_goldens),
        ("8 M-step stationarity", m_step_stationarity),
        ("9 end-to-end CLI pipeline", end_to_end_pipeline),
        ("10 baseline ordering", baseline_ordering),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
