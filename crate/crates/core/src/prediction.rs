//! Monte Carlo next-arrival prediction and per-index scoring.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::io::{create as create_csv, flush as flush_csv};
use crate::inference::FittedModel;
use crate::intensity::ExcitationState;
use crate::model::{Dataset, EventSequence, SplitDataset};
use crate::simulation::{derive_seed, next_arrival, pair_rng, ConditionalIntensity};

/// Prediction gives up when no arrival is found within this many pair
/// windows after the anchor.
pub const HORIZON_LIMIT: f64 = 10.0;
/// Bootstrap resamples for the RMSE confidence intervals.
pub const BOOTSTRAP_RESAMPLES: usize = 1000;
const BOOTSTRAP_TAG: u64 = 4;

/// Predicted next arrivals of one pair, in hours from course start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub student: usize,
    pub assignment: usize,
    pub anchor: f64,
    pub times: Vec<f64>,
    pub n_trials: usize,
}

/// Predicts `z` arrivals after `anchor` (model clock).
///
/// Each index averages `n_trials` sampled waits from the current anchor; the
/// predicted time then joins the history and becomes the next anchor.
/// `history` holds the events up to the anchor. Fails when a trial finds no
/// arrival before `limit`.
pub fn predict_arrivals<I: ConditionalIntensity + ?Sized, R: Rng + ?Sized>(
    model: &I,
    history: &[f64],
    anchor: f64,
    z: usize,
    n_trials: usize,
    limit: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if z == 0 || n_trials == 0 {
        return Err(Error::InvalidArgument("z and the number of trials must be at least 1".into()));
    }
    let mut state = ExcitationState::default();
    for &x in history.iter().filter(|&&x| x <= anchor) {
        model.record_event(&mut state, x);
    }
    let mut anchor = anchor;
    let mut out = Vec::with_capacity(z);
    for _ in 0..z {
        let mut total = 0.0;
        for _ in 0..n_trials {
            match next_arrival(model, anchor, limit, &state, rng)? {
                Some(x) => total += x - anchor,
                None => {
                    return Err(Error::Numerical(format!(
                        "no arrival between {anchor} and {limit}"
                    )))
                }
            }
        }
        let next = anchor + total / n_trials as f64;
        if !(next > anchor) {
            return Err(Error::Numerical(format!("predicted time {next} does not advance past {anchor}")));
        }
        model.record_event(&mut state, next);
        out.push(next);
        anchor = next;
    }
    Ok(out)
}

/// Predicts the next `z` events of a pair from `history` (hours). The anchor
/// is the last event, or the window start when there is none.
pub fn predict_next_arrivals(
    model: &FittedModel,
    dataset: &Dataset,
    history: &EventSequence,
    z: usize,
    n_trials: usize,
    seed: u64,
) -> Result<PredictionResult> {
    let (i, j) = history.key();
    let pair = model.parameters.pair(i, j, &dataset.assignments[j], model.components);
    let origin = history.window_start;
    let times = history.relative_times();
    let anchor = times.last().copied().unwrap_or(0.0);
    let limit = anchor + HORIZON_LIMIT * history.horizon();
    let mut rng = pair_rng(seed, i, j);
    let predicted = predict_arrivals(&pair, &times, anchor, z, n_trials, limit, &mut rng).map_err(|e| match e {
        Error::Numerical(msg) => Error::Numerical(format!("pair {}: {msg}", dataset.pair_label(i, j))),
        other => other,
    })?;
    Ok(PredictionResult {
        student: i,
        assignment: j,
        anchor: anchor + origin,
        times: predicted.into_iter().map(|t| t + origin).collect(),
        n_trials,
    })
}

fn check_grid(model: &FittedModel, dataset: &Dataset) -> Result<()> {
    let same_assignments = model
        .assignments
        .iter()
        .eq(dataset.assignments.iter().map(|a| &a.assignment_id));
    if model.students != dataset.students || !same_assignments {
        return Err(Error::Data(
            "model students/assignments do not match the dataset".into(),
        ));
    }
    Ok(())
}

/// Predicts for many pairs in parallel; results keep the input order.
pub fn predict_many(
    model: &FittedModel,
    dataset: &Dataset,
    histories: &[EventSequence],
    z: usize,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<PredictionResult>> {
    check_grid(model, dataset)?;
    histories
        .par_iter()
        .map(|h| predict_next_arrivals(model, dataset, h, z, n_trials, seed))
        .collect()
}

/// Predicts every cell of the grid: observed pairs from their history,
/// the rest from their window start.
pub fn predict_dataset(
    model: &FittedModel,
    dataset: &Dataset,
    z: usize,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<PredictionResult>> {
    let histories: Vec<EventSequence> = (0..dataset.num_students())
        .flat_map(|i| (0..dataset.num_assignments()).map(move |j| (i, j)))
        .map(|(i, j)| {
            dataset
                .sequences
                .get(&(i, j))
                .cloned()
                .unwrap_or_else(|| dataset.empty_sequence(i, j))
        })
        .collect();
    predict_many(model, dataset, &histories, z, n_trials, seed)
}

/// RMSE at one prediction index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexScore {
    /// 1-based.
    pub index: usize,
    pub rmse: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSetReport {
    pub model: Vec<IndexScore>,
    /// Homogeneous Poisson oracle with the pair's true rate.
    pub baseline: Vec<IndexScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub z_max: usize,
    pub n_trials: usize,
    pub seed: u64,
    pub partial: Option<TestSetReport>,
    pub complete: Option<TestSetReport>,
}

/// Per-index RMSE of `predicted` against `truth` (one row per pair) with a
/// percentile bootstrap over pairs. Rows may be shorter than `z_max`; a
/// pair counts at the indices covered by both rows.
pub fn score_predictions(predicted: &[Vec<f64>], truth: &[Vec<f64>], z_max: usize, seed: u64) -> Vec<IndexScore> {
    assert_eq!(predicted.len(), truth.len());
    // squared residuals per pair, truncated to the common length
    let sq: Vec<Vec<f64>> = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| p.iter().zip(t).take(z_max).map(|(a, b)| (a - b) * (a - b)).collect())
        .collect();
    let rmse_of = |rows: &mut dyn Iterator<Item = &Vec<f64>>, idx: usize| -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for r in rows {
            if let Some(&e) = r.get(idx) {
                sum += e;
                n += 1;
            }
        }
        (n > 0).then(|| (sum / n as f64).sqrt())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, BOOTSTRAP_TAG));
    let mut boot: Vec<Vec<f64>> = vec![Vec::with_capacity(BOOTSTRAP_RESAMPLES); z_max];
    if !sq.is_empty() {
        let mut pick = Vec::with_capacity(sq.len());
        for _ in 0..BOOTSTRAP_RESAMPLES {
            pick.clear();
            pick.extend((0..sq.len()).map(|_| rng.random_range(0..sq.len())));
            for (idx, samples) in boot.iter_mut().enumerate() {
                if let Some(r) = rmse_of(&mut pick.iter().map(|&k| &sq[k]), idx) {
                    samples.push(r);
                }
            }
        }
    }

    (0..z_max)
        .filter_map(|idx| {
            let rmse = rmse_of(&mut sq.iter(), idx)?;
            let n_pairs = sq.iter().filter(|r| r.len() > idx).count();
            let samples = &mut boot[idx];
            samples.sort_by(f64::total_cmp);
            let (lo, hi) = if samples.is_empty() {
                (rmse, rmse)
            } else {
                (quantile(samples, 0.025), quantile(samples, 0.975))
            };
            Some(IndexScore {
                index: idx + 1,
                rmse,
                ci_lo: lo.min(rmse),
                ci_hi: hi.max(rmse),
                n_pairs,
            })
        })
        .collect()
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Expected arrivals of a homogeneous Poisson process with the pair's full
/// observed rate `K / T`, starting at `anchor`.
fn poisson_oracle(full: &EventSequence, anchor: f64, z: usize) -> Vec<f64> {
    let rate = full.len() as f64 / full.horizon();
    (1..=z).map(|k| anchor + k as f64 / rate).collect()
}

/// Predicts the partially- and completely-missing test sets of `split` and
/// scores model and Poisson oracle per index.
pub fn evaluate_predictions(
    model: &FittedModel,
    split: &SplitDataset,
    z_max: usize,
    n_trials: usize,
    seed: u64,
) -> Result<PredictionReport> {
    if z_max == 0 || n_trials == 0 {
        return Err(Error::InvalidArgument("z_max and the number of trials must be at least 1".into()));
    }
    if split.partial_test.is_empty() && split.complete_test.is_empty() {
        return Err(Error::Data("the split has no test pairs".into()));
    }
    let train = &split.train;

    let partial = if split.partial_test.is_empty() {
        None
    } else {
        let histories: Vec<EventSequence> = split
            .partial_test
            .keys()
            .map(|k| train.sequences.get(k).cloned().unwrap_or_else(|| train.empty_sequence(k.0, k.1)))
            .collect();
        let preds = predict_many(model, train, &histories, z_max, n_trials, seed)?;
        let mut truth = Vec::new();
        let mut oracle = Vec::new();
        for ((key, future), pred) in split.partial_test.iter().zip(&preds) {
            let history = &train.sequences[key];
            let full = EventSequence {
                timestamps: history.timestamps.iter().chain(&future.timestamps).copied().collect(),
                ..future.clone()
            };
            truth.push(future.timestamps.iter().take(z_max).copied().collect::<Vec<_>>());
            oracle.push(poisson_oracle(&full, pred.anchor, z_max));
        }
        Some((preds, truth, oracle))
    };

    let complete = if split.complete_test.is_empty() {
        None
    } else {
        let histories: Vec<EventSequence> = split
            .complete_test
            .iter()
            .map(|s| EventSequence {
                timestamps: Vec::new(),
                ..s.clone()
            })
            .collect();
        let preds = predict_many(model, train, &histories, z_max, n_trials, seed)?;
        let truth = split
            .complete_test
            .iter()
            .map(|s| s.timestamps.iter().take(z_max).copied().collect::<Vec<_>>())
            .collect();
        let oracle = split
            .complete_test
            .iter()
            .map(|s| poisson_oracle(s, s.window_start, z_max))
            .collect();
        Some((preds, truth, oracle))
    };

    let covered = |t: &Option<(Vec<PredictionResult>, Vec<Vec<f64>>, Vec<Vec<f64>>)>| {
        t.as_ref().is_some_and(|(_, truth, _)| truth.iter().any(|r| !r.is_empty()))
    };
    if !covered(&partial) && !covered(&complete) {
        return Err(Error::Data("no test pair has a future event to score".into()));
    }

    let report = |t: Option<(Vec<PredictionResult>, Vec<Vec<f64>>, Vec<Vec<f64>>)>| {
        t.map(|(preds, truth, oracle)| {
            let predicted: Vec<Vec<f64>> = preds.into_iter().map(|p| p.times).collect();
            TestSetReport {
                model: score_predictions(&predicted, &truth, z_max, seed),
                baseline: score_predictions(&oracle, &truth, z_max, seed),
            }
        })
    };
    Ok(PredictionReport {
        z_max,
        n_trials,
        seed,
        partial: report(partial),
        complete: report(complete),
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Writes `rmse_by_index.csv`. Oracle rows carry the test set name with a
/// `_poisson` suffix.
pub fn write_rmse_csv(report: &PredictionReport, path: &Path) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(["index", "rmse", "ci_lo", "ci_hi", "n_pairs", "testset"])?;
    for (name, set) in [("partial", &report.partial), ("complete", &report.complete)] {
        let Some(set) = set else { continue };
        for (suffix, scores) in [("", &set.model), ("_poisson", &set.baseline)] {
            for s in scores {
                w.write_record([
                    s.index.to_string(),
                    s.rmse.to_string(),
                    s.ci_lo.to_string(),
                    s.ci_hi.to_string(),
                    s.n_pairs.to_string(),
                    format!("{name}{suffix}"),
                ])?;
            }
        }
    }
    flush_csv(w, path)
}

/// Writes `predictions.csv` with one row per predicted event.
pub fn write_predictions_csv(results: &[PredictionResult], dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(["student_id", "assignment_id", "index", "predicted_time"])?;
    for r in results {
        for (k, t) in r.times.iter().enumerate() {
            w.write_record([
                dataset.students[r.student].as_str(),
                dataset.assignments[r.assignment].assignment_id.as_str(),
                &(k + 1).to_string(),
                &t.to_string(),
            ])?;
        }
    }
    flush_csv(w, path)
}

/// Writes the report as pretty JSON.
pub fn write_report_json(report: &PredictionReport, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))?;
    Ok(())
}
