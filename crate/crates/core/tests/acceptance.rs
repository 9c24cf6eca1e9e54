//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the test harness so every line is printed. A failing
//! criterion is reported but only fails the process when
//! `ACCEPTANCE_STRICT=1` is set.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sshp::analysis::{elbow_scan, kmeans, kruskal_wallis};
use sshp::inference::{fit_with, FitOptions, FittedModel};
use sshp::intensity::{cumulative_base, log_likelihood};
use sshp::model::*;
use sshp::prediction::evaluate_predictions;
use sshp::simulation::*;

type Outcome = Result<String, String>;

const INIT_TAG: u64 = 6;
const SPLIT_TAG: u64 = 5;
const PREDICT_TAG: u64 = 7;

fn likelihood() -> Outcome {
    let mut r = rng(101);
    let (mut worst_direct, mut worst_quad) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let pair = random_pair(&mut r);
        let horizon = pair.s * r.random_range(10.0..100.0);
        let k = r.random_range(1..=200);
        let times = random_times(&mut r, k, horizon, &pair, 0.0);
        let fast = log_likelihood(&times, horizon, &pair).map_err(|e| e.to_string())?;
        let excitation: f64 = times
            .iter()
            .map(|&x| pair.alpha * (1.0 - (-pair.beta * (horizon - x)).exp()))
            .sum();
        let quad = quadrature_log_likelihood(&times, horizon, &pair);
        worst_quad = worst_quad.max(rel_err(fast, quad));
        // O(K^2) excitation sums with the same closed-form base compensator,
        // so the 1e-10 check isolates the recursion
        let direct = direct_log_sum(&times, &pair) - cumulative_base(horizon, &pair).weighted(&pair) - excitation;
        worst_direct = worst_direct.max(rel_err(fast, direct));
    }
    let msg = format!("max rel err vs direct {worst_direct:.1e} (tol 1e-10), vs quadrature {worst_quad:.1e} (tol 1e-6)");
    if worst_direct <= 1e-10 && worst_quad <= 1e-6 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gradients() -> Outcome {
    let mut r = rng(102);
    for draw in 0..20 {
        let mut pair = random_pair(&mut r);
        pair.b = r.random_range(0.05..0.9);
        let horizon = pair.s * r.random_range(20.0..100.0);
        let k = r.random_range(5..=200);
        let times = random_times(&mut r, k, horizon, &pair, 1e-3);
        gradient_check(&pair, &times, horizon).map_err(|m| format!("draw {draw}: {m}"))?;
    }
    Ok("9 partials x 20 draws within rel 1e-4 of central differences".into())
}

fn sampler() -> Outcome {
    let mut pair = typical_pair();
    pair.components = Components::ablate("s").unwrap();
    pair.gamma_d = 6.0;
    pair.gamma_o = 3.0;
    let expected = quadrature_compensator(&[], 100.0, &pair);
    let counts: Vec<f64> = (0..2000)
        .map(|seed| sample_sequence(&pair, 0.0, 100.0, seed).map(|s| s.len() as f64))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let (mean, sd) = mean_sd(&counts);
    let se = sd / (counts.len() as f64).sqrt();
    let z = (mean - expected).abs() / se;

    let mut gaps = Vec::new();
    let mut seed = 0;
    while gaps.len() < 5000 {
        let mut pair = typical_pair();
        pair.m = (seed % 7) as f64 - 3.0;
        let seq = sample_sequence(&pair, 0.0, 100.0, 5000 + seed).map_err(|e| e.to_string())?;
        gaps.extend(rescaled_gaps(&seq.timestamps, &pair));
        seed += 1;
    }
    let ks = ks_unit_exponential(&gaps);
    let crit = ks_critical_1pct(gaps.len());
    let msg = format!(
        "Poisson mean count {mean:.3} vs {expected:.3} ({z:.2} SE, limit 3); KS {ks:.4} vs {crit:.4} on {} gaps",
        gaps.len()
    );
    if z < 3.0 && ks < crit {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn desk_config() -> SyntheticConfig {
    SyntheticConfig {
        students: 50,
        assignments: 10,
        s: 1.0,
        beta: 1.0,
        deadline: 80.0,
        horizon: 100.0,
        matrix_rank: Some(2),
        mask_fraction: 0.1,
        seed: 0,
        ..SyntheticConfig::default()
    }
}

fn desk_hyper() -> HyperParams {
    HyperParams {
        beta: 1.0,
        s: 1.0,
        gamma0: 100.0,
        eta: 2.0,
        rho: 1.0,
        ..HyperParams::default()
    }
}

fn fit_desk(train: &Dataset) -> Result<FittedModel, String> {
    let h = desk_hyper();
    let init = init_parameters(
        train.num_students(),
        train.num_assignments(),
        h.beta,
        h.s,
        derive_seed(0, INIT_TAG),
        &InitConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    fit_with(train, &h, Components::all(), init, &FitOptions::default()).map_err(|e| e.to_string())
}

fn rmse(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut sum, mut n) = (0.0, 0.0);
    for (a, b) in pairs {
        sum += (a - b) * (a - b);
        n += 1.0;
    }
    (sum / n).sqrt()
}

/// RMSE of the habit phase, with each error wrapped into `[-s/2, s/2]`:
/// the intensity is periodic in `p` with period `s`.
fn phase_rmse(fit: &nalgebra::DVector<f64>, truth: &nalgebra::DVector<f64>, s: f64) -> f64 {
    rmse(fit.iter().zip(truth.iter()).map(|(&a, &b)| {
        let d = (a - b).rem_euclid(s);
        (d.min(s - d), 0.0)
    }))
}

fn recovery() -> Outcome {
    let data = generate_synthetic(&desk_config()).map_err(|e| e.to_string())?;
    let ds = &data.dataset;
    let events: usize = ds.observed().map(EventSequence::len).sum();
    let model = fit_desk(ds)?;
    let (fit, truth) = (&model.parameters, &data.truth);
    let keys: Vec<(usize, usize)> = ds.observed().map(EventSequence::key).collect();
    let cells = |a: &DMatrix<f64>, b: &DMatrix<f64>| rmse(keys.iter().map(|&k| (a[k], b[k])));
    let vec_rmse = |a: &nalgebra::DVector<f64>, b: &nalgebra::DVector<f64>| rmse(a.iter().copied().zip(b.iter().copied()));
    // (symbol, recovered RMSE, reference row value)
    let rows = [
        ("v", vec_rmse(&fit.v, &truth.v), 1.33),
        ("b", vec_rmse(&fit.b, &truth.b), 0.10),
        ("p", phase_rmse(&fit.p, &truth.p, truth.s), 1.33),
        ("c", vec_rmse(&fit.c, &truth.c), 0.09),
        ("A", cells(&fit.alpha, &truth.alpha), 0.05),
        ("M", cells(&fit.m, &truth.m), 2.64),
        ("Gd", cells(&fit.gamma_d, &truth.gamma_d), 1.65),
        ("Go", cells(&fit.gamma_o, &truth.gamma_o), 1.08),
        ("Gh", cells(&fit.gamma_h, &truth.gamma_h), 0.16),
    ];
    let masked: Vec<(usize, usize)> = data.masked.iter().map(EventSequence::key).collect();
    let a_fit: Vec<f64> = masked.iter().map(|&k| fit.alpha[k]).collect();
    let a_true: Vec<f64> = masked.iter().map(|&k| truth.alpha[k]).collect();
    let r = pearson(&a_fit, &a_true);

    let mut failed = Vec::new();
    let mut parts = Vec::new();
    for (name, value, reference) in rows {
        let ok = value <= 3.0 * reference;
        parts.push(format!("{name} {value:.3}/{:.2}{}", 3.0 * reference, if ok { "" } else { "!" }));
        if !ok {
            failed.push(name);
        }
    }
    if !(r > 0.5) {
        failed.push("masked-A r");
    }
    let msg = format!(
        "{:.0} events/pair; RMSE/limit: {}; masked A r {r:.3} (limit 0.5){}",
        events as f64 / keys.len() as f64,
        parts.join(", "),
        if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
    );
    if failed.is_empty() {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn prediction() -> Outcome {
    let data = generate_synthetic(&desk_config()).map_err(|e| e.to_string())?;
    let mut split = split_dataset(
        &data.dataset,
        SplitConfig {
            holdout_fraction: 0.0,
            train_fraction: 0.7,
            seed: derive_seed(0, SPLIT_TAG),
        },
    )
    .map_err(|e| e.to_string())?;
    split.complete_test = data.masked.clone();
    let model = fit_desk(&split.train)?;
    let report = evaluate_predictions(&model, &split, 10, 1000, derive_seed(0, PREDICT_TAG)).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, set) in [("partial", &report.partial), ("complete", &report.complete)] {
        let set = set.as_ref().ok_or(format!("no {name} test set"))?;
        let wins = set.model.iter().zip(&set.baseline).filter(|(m, b)| m.rmse < b.rmse).count();
        let lost: Vec<String> = set
            .model
            .iter()
            .zip(&set.baseline)
            .filter(|(m, b)| m.rmse >= b.rmse)
            .map(|(m, b)| format!("{}:{:.2}>={:.2}", m.index, m.rmse, b.rmse))
            .collect();
        ok &= set.model.len() == 10 && wins == 10;
        parts.push(format!(
            "{name} below oracle at {wins}/10 (idx1 {:.2} vs {:.2}, idx10 {:.2} vs {:.2}){}",
            set.model[0].rmse,
            set.baseline[0].rmse,
            set.model.last().unwrap().rmse,
            set.baseline.last().unwrap().rmse,
            if lost.is_empty() { String::new() } else { format!(" [lost {}]", lost.join(" ")) }
        ));
    }
    let msg = parts.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Pair feature vectors (as in the fitted-parameter features) drawn from
/// three regimes. Regime means sit on a triangle: regime 1 shifts the pair
/// weights, regime 2 shifts the student vector and half the pair weights.
/// Every shift is four within-regime standard deviations per feature.
fn regime_features(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    // alpha, m, gamma_d, gamma_o, gamma_h, v, b, p, c
    const BASE: [f64; 9] = [0.2, -4.0, 10.0, 3.0, 0.3, 12.0, 0.3, 2.0, 1.1];
    const SD: [f64; 9] = [0.05, 1.5, 2.0, 1.0, 0.05, 3.0, 0.05, 1.5, 0.05];
    const SHIFT: [[f64; 9]; 3] = [
        [0.0; 9],
        [1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        [0.5, 0.5, 0.5, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0],
    ];
    let (students, assignments) = (60, 8);
    let mut r = rng(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut r) };
    let mut feats = Vec::new();
    let mut truth = Vec::new();
    for i in 0..students {
        let g = i % 3;
        let at = |k: usize, z: f64| BASE[k] + 4.0 * SD[k] * SHIFT[g][k] + SD[k] * z;
        let student: Vec<f64> = (5..9).map(|k| at(k, normal())).collect();
        for _ in 0..assignments {
            let mut row: Vec<f64> = (0..5).map(|k| at(k, normal())).collect();
            row.extend(&student);
            feats.push(row);
            truth.push(g);
        }
    }
    (feats, truth)
}

fn purity(labels: &[usize], truth: &[usize], k: usize) -> f64 {
    let mut counts = vec![[0usize; 3]; k];
    for (&l, &t) in labels.iter().zip(truth) {
        counts[l][t] += 1;
    }
    counts.iter().map(|c| *c.iter().max().unwrap()).sum::<usize>() as f64 / labels.len() as f64
}

fn clustering() -> Outcome {
    let (feats, truth) = regime_features(31);
    let scan = elbow_scan(&feats, &[1, 2, 3, 4, 5, 6, 7, 8], 8, 20).map_err(|e| e.to_string())?;
    let km = kmeans(&feats, 3, 8, 20).map_err(|e| e.to_string())?;
    let pur = purity(&km.labels, &truth, 3);
    let kw = kruskal_wallis(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]]).map_err(|e| e.to_string())?;
    let kw_ok = (kw.h - 7.2).abs() < 1e-9 && (kw.p - 0.02732).abs() < 1e-5;
    let msg = format!(
        "3 regimes, {} pairs: elbow suggests {:?}, purity {pur:.3} (limit 0.9); KW H {:.4}, p {:.5}",
        feats.len(),
        scan.suggested,
        kw.h,
        kw.p
    );
    if scan.suggested == Some(3) && pur >= 0.9 && kw_ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn cli_binary() -> Result<PathBuf, String> {
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let dir = exe.parent().and_then(Path::parent).ok_or("no target directory")?;
    let bin = dir.join(format!("sshp{}", std::env::consts::EXE_SUFFIX));
    if !bin.exists() {
        let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
        let status = Command::new(cargo)
            .args(["build", "-q", "-p", "sshp-cli", "--bin", "sshp"])
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() || !bin.exists() {
            return Err(format!("could not build {}", bin.display()));
        }
    }
    Ok(bin)
}

fn run_cli(bin: &Path, args: &[&str], out: &Path, threads: usize) -> Result<(), String> {
    let output = Command::new(bin)
        .args(args)
        .arg("--output")
        .arg(out)
        .args(["--threads", &threads.to_string()])
        .output()
        .map_err(|e| e.to_string())?;
    if output.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&output.stderr)))
    }
}

fn dir_contents(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .map(|e| {
            let e = e.map_err(|e| e.to_string())?;
            let bytes = std::fs::read(e.path()).map_err(|e| e.to_string())?;
            Ok((e.file_name().to_string_lossy().into_owned(), bytes))
        })
        .collect::<Result<_, String>>()?;
    files.sort();
    Ok(files)
}

fn reproducibility() -> Outcome {
    let bin = cli_binary()?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let data = root.join("data");
    let s = |p: &Path| p.to_string_lossy().into_owned();
    run_cli(
        &bin,
        &["simulate", "--seed", "7", "--students", "8", "--assignments", "3", "--rank", "1", "--set", "synthetic.mask_fraction=0.25"],
        &data,
        1,
    )?;
    let common = [
        "--events".to_string(),
        s(&data.join("events.csv")),
        "--assignments".into(),
        s(&data.join("assignments.csv")),
        "--seed".into(),
        "7".into(),
    ];
    let model = s(&root.join("model").join("model.json"));
    let heldout = s(&data.join("masked_events.csv"));
    let with = |head: &[&str], tail: &[&str]| -> Vec<String> {
        head.iter()
            .map(|x| x.to_string())
            .chain(common.iter().cloned())
            .chain(tail.iter().map(|x| x.to_string()))
            .collect()
    };
    run_cli(&bin, &as_strs(&with(&["fit"], &["--max-iter", "60", "--scale", "1"])), &root.join("model"), 1)?;
    let commands: Vec<(&str, Vec<String>)> = vec![
        (
            "simulate",
            vec!["simulate", "--seed", "7", "--students", "8", "--assignments", "3", "--rank", "1"]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        ("fit", with(&["fit"], &["--max-iter", "60", "--scale", "1"])),
        ("predict", with(&["predict"], &["--model", &model, "--n-trials", "50", "--z-max", "4"])),
        (
            "evaluate",
            with(
                &["evaluate"],
                &["--max-iter", "40", "--scale", "1", "--heldout", &heldout, "--holdout", "0.2", "--n-trials", "50", "--z-max", "4"],
            ),
        ),
        ("cluster", with(&["cluster"], &["--model", &model, "--restarts", "5"])),
    ];
    let mut checked = Vec::new();
    for (name, args) in &commands {
        let args = as_strs(args);
        let mut runs = Vec::new();
        for (rep, threads) in [(0, 1), (1, 1), (2, 4)] {
            let out = root.join(format!("{name}-{rep}"));
            run_cli(&bin, &args, &out, threads)?;
            runs.push(dir_contents(&out)?);
        }
        if runs[0].is_empty() || runs.iter().any(|r| r != &runs[0]) {
            return Err(format!("{name}: outputs differ between reruns or thread counts"));
        }
        checked.push(format!("{name} ({} files)", runs[0].len()));
    }
    Ok(format!("byte-identical at threads 1, 1, 4: {}", checked.join(", ")))
}

fn as_strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    // `cargo test --test acceptance -- 4 5` runs only the listed criteria
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Outcome, Duration); 7] = [
        ("likelihood correctness", likelihood, Duration::from_secs(60)),
        ("gradient correctness", gradients, Duration::from_secs(60)),
        ("sampler correctness", sampler, Duration::from_secs(300)),
        ("parameter recovery", recovery, Duration::from_secs(1800)),
        ("prediction vs Poisson oracle", prediction, Duration::from_secs(600)),
        ("clustering", clustering, Duration::from_secs(60)),
        ("CLI reproducibility", reproducibility, Duration::from_secs(1800)),
    ];
    let mut failures = 0;
    let mut ran = 0;
    for (n, (name, check, budget)) in criteria.into_iter().enumerate() {
        if !only.is_empty() && !only.contains(&(n + 1)) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let outcome = check();
        let took = started.elapsed();
        let outcome = match outcome {
            Ok(msg) if took > budget => Err(format!("{msg}; took {:.0}s, budget {}s", took.as_secs_f64(), budget.as_secs())),
            other => other,
        };
        let (status, msg) = match &outcome {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        if outcome.is_err() {
            failures += 1;
        }
        println!("criterion {} [{name}]: {status} ({:.1}s) {msg}", n + 1, took.as_secs_f64());
    }
    println!("acceptance: {} of {ran} criteria pass", ran - failures);
    if failures > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
