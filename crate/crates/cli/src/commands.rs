use std::path::Path;

use anyhow::{Context, Result};
use log::{info, warn};
use serde::Serialize;
use sshp::analysis::{cluster_pairs, grade_test, write_centroids_csv, write_clusters_csv, write_json};
use sshp::inference::{fit_with, FittedModel};
use sshp::model::{
    init_parameters, load_dataset, read_sequences, split_dataset, write_dataset, write_sequences, Components, Dataset, SplitConfig,
    SplitDataset,
};
use sshp::prediction::{evaluate_predictions, predict_dataset, write_predictions_csv, write_rmse_csv};
use sshp::simulation::{derive_seed, generate_synthetic};

use crate::config::RunConfig;
use crate::UsageError;

const SPLIT_TAG: u64 = 5;
const INIT_TAG: u64 = 6;
const PREDICT_TAG: u64 = 7;
const CLUSTER_TAG: u64 = 8;

fn prepare(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(cfg, &out.join("resolved_config.json"))?;
    Ok(())
}

fn components(cfg: &RunConfig) -> Result<Components> {
    Ok(Components::ablate(&cfg.ablate)?)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let (Some(events), Some(assignments)) = (&cfg.data.events, &cfg.data.assignments) else {
        return Err(UsageError("data.events and data.assignments are required (--events, --assignments)".into()).into());
    };
    let dataset = load_dataset(
        events,
        assignments,
        cfg.data.grades.as_deref(),
        cfg.hyper.s,
        cfg.data.course_end_hours,
    )?;
    info!(
        "loaded {} students, {} assignments, {} observed pairs",
        dataset.num_students(),
        dataset.num_assignments(),
        dataset.observed().count()
    );
    Ok(dataset)
}

fn load_model(path: &Path) -> Result<FittedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| sshp::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let model: FittedModel = serde_json::from_str(&text)
        .map_err(sshp::Error::from)
        .with_context(|| format!("reading model {}", path.display()))?;
    model.parameters.check_constraints()?;
    Ok(model)
}

fn split(cfg: &RunConfig, dataset: &Dataset) -> Result<SplitDataset> {
    Ok(split_dataset(
        dataset,
        SplitConfig {
            holdout_fraction: cfg.split.holdout_fraction,
            train_fraction: cfg.split.train_fraction,
            seed: derive_seed(cfg.seed, SPLIT_TAG),
        },
    )?)
}

fn fit_model(cfg: &RunConfig, train: &Dataset) -> Result<FittedModel> {
    let init = init_parameters(
        train.num_students(),
        train.num_assignments(),
        cfg.hyper.beta,
        cfg.hyper.s,
        derive_seed(cfg.seed, INIT_TAG),
        &cfg.init,
    )?;
    let model = fit_with(train, &cfg.hyper, components(cfg)?, init, &cfg.fit)?;
    info!(
        "fit: loss {:.6} after {} iterations",
        model.diagnostics.final_loss, model.diagnostics.iterations
    );
    Ok(model)
}

/// Loads `cfg.model` if set. Its time scale replaces `hyper.s`, since the
/// data must be read on the clock the model was fitted on.
fn pre_fitted(cfg: &RunConfig) -> Result<(RunConfig, Option<FittedModel>)> {
    let mut cfg = cfg.clone();
    let Some(path) = &cfg.model else {
        return Ok((cfg, None));
    };
    let model = load_model(path)?;
    if model.parameters.s != cfg.hyper.s {
        info!("using the model's time scale s = {}", model.parameters.s);
        cfg.hyper.s = model.parameters.s;
    }
    Ok((cfg, Some(model)))
}

fn write_loss_trace(model: &FittedModel, path: &Path) -> Result<()> {
    let mut text = String::from("step,stage,loss\n");
    let starts = &model.diagnostics.stage_starts;
    for (step, loss) in model.diagnostics.loss_trace.iter().enumerate() {
        let stage = starts.iter().rposition(|&s| s <= step).unwrap_or(0);
        text.push_str(&format!("{step},{stage},{loss}\n"));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct GroundTruth<'a> {
    course_end_hours: f64,
    masked_pairs: Vec<(&'a str, &'a str)>,
    parameters: &'a sshp::model::ParameterStore,
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut synthetic = cfg.synthetic.clone();
    synthetic.seed = cfg.seed;
    if synthetic.s != cfg.hyper.s {
        warn!(
            "synthetic.s = {} differs from hyper.s = {}; reload the data with --scale {}",
            synthetic.s, cfg.hyper.s, synthetic.s
        );
    }
    let data = generate_synthetic(&synthetic)?;
    prepare(cfg, out)?;
    let ds = &data.dataset;
    write_dataset(ds, &out.join("events.csv"), &out.join("assignments.csv"), None)?;
    write_sequences(&out.join("masked_events.csv"), ds, &data.masked)?;
    let truth = GroundTruth {
        course_end_hours: ds.course_end,
        masked_pairs: data
            .masked
            .iter()
            .map(|s| (ds.students[s.student].as_str(), ds.assignments[s.assignment].assignment_id.as_str()))
            .collect(),
        parameters: &data.truth,
    };
    write_json(&truth, &out.join("ground_truth.json"))?;
    info!(
        "simulated {} observed and {} masked pairs",
        ds.observed().count(),
        data.masked.len()
    );
    Ok(())
}

pub fn fit(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dataset = load_data(cfg)?;
    let train = if cfg.fit_on_split {
        split(cfg, &dataset)?.train
    } else {
        dataset
    };
    let model = fit_model(cfg, &train)?;
    prepare(cfg, out)?;
    write_json(&model, &out.join("model.json"))?;
    write_loss_trace(&model, &out.join("loss_trace.csv"))
}

pub fn predict(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (cfg, Some(model)) = pre_fitted(cfg)? else {
        return Err(UsageError("predict needs a fitted model (--model)".into()).into());
    };
    let cfg = &cfg;
    let dataset = load_data(cfg)?;
    let results = predict_dataset(
        &model,
        &dataset,
        cfg.hyper.z_max,
        cfg.hyper.n_trials,
        derive_seed(cfg.seed, PREDICT_TAG),
    )?;
    prepare(cfg, out)?;
    write_predictions_csv(&results, &dataset, &out.join("predictions.csv"))?;
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (cfg, pre) = pre_fitted(cfg)?;
    let cfg = &cfg;
    let mut dataset = load_data(cfg)?;
    let heldout = match &cfg.data.heldout {
        Some(path) => read_sequences(path, &mut dataset)?,
        None => Vec::new(),
    };
    let mut split = split(cfg, &dataset)?;
    if !heldout.is_empty() {
        split.complete_test.extend(heldout.into_iter().filter(|s| !s.is_empty()));
        split.complete_test.sort_by_key(|s| s.key());
        let before = split.complete_test.len();
        split.complete_test.dedup_by_key(|s| s.key());
        if split.complete_test.len() != before {
            return Err(sshp::Error::Data("held-out pairs overlap the dataset".into()).into());
        }
    }
    let fitted = pre.is_none();
    let model = match pre {
        Some(m) => m,
        None => fit_model(cfg, &split.train)?,
    };
    let report = evaluate_predictions(
        &model,
        &split,
        cfg.hyper.z_max,
        cfg.hyper.n_trials,
        derive_seed(cfg.seed, PREDICT_TAG),
    )?;
    prepare(cfg, out)?;
    if fitted {
        write_json(&model, &out.join("model.json"))?;
    }
    write_rmse_csv(&report, &out.join("rmse_by_index.csv"))?;
    write_json(&report, &out.join("report.json"))?;
    Ok(())
}

pub fn cluster(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (cfg, pre) = pre_fitted(cfg)?;
    let cfg = &cfg;
    let dataset = load_data(cfg)?;
    let model = match pre {
        Some(m) => m,
        None => fit_model(cfg, &dataset)?,
    };
    let report = cluster_pairs(&model, &dataset, &cfg.cluster, derive_seed(cfg.seed, CLUSTER_TAG))?;
    let grades = grade_test(&report, &dataset)?;
    prepare(cfg, out)?;
    write_clusters_csv(&report, &dataset, &out.join("clusters.csv"))?;
    write_centroids_csv(&report, model.parameters.s, &out.join("centroids.csv"))?;
    write_json(&grades, &out.join("grade_test.json"))?;
    write_json(&report, &out.join("cluster_report.json"))?;
    Ok(())
}
