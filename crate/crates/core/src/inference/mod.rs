//! Joint maximum-likelihood fitting of every observed pair.
//!
//! The smooth part is the summed negative log-likelihood over observed
//! pairs; the matrices additionally carry a trace-norm penalty `rho`. Each
//! iteration takes a gradient step from a Nesterov search point, projects
//! (singular-value soft-threshold by `rho / gamma`, then the box
//! constraints) and accepts once the backtracking sufficient-decrease test
//! holds. Reported losses are per observed pair.

mod complete;
mod prox;
mod warm;

use std::time::Instant;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intensity::{log_likelihood, log_likelihood_gradient_fisher, GradientRecord};
use crate::model::{Components, Dataset, HyperParams, ParameterStore};

pub use prox::{prox_matrix, prox_vector, Bounds};
pub use complete::{complete_unobserved, soft_impute, CompletionConfig};
pub use warm::{warm_start, WarmStartConfig};

/// Consecutive small relative changes required to stop.
const PATIENCE: usize = 5;
/// Backtracking gives up once gamma has grown by this factor in total.
const GAMMA_BLOWUP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub final_loss: f64,
    pub iterations: usize,
    /// Loss (negative mean log-likelihood) of the initial point and of every
    /// accepted iterate, run after run.
    pub loss_trace: Vec<f64>,
    /// Index into `loss_trace` where each gradient run starts.
    pub stage_starts: Vec<usize>,
    pub converged: bool,
    pub final_gamma: f64,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Fitted parameters with the settings and diagnostics that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub students: Vec<String>,
    pub assignments: Vec<String>,
    pub parameters: ParameterStore,
    pub hyper: HyperParams,
    pub components: Components,
    /// Ablated components as letters (`s`, `o`, `h`, `d`), empty for the full model.
    pub ablated: String,
    pub diagnostics: FitDiagnostics,
}

struct PairData {
    student: usize,
    assignment: usize,
    label: String,
    times: Vec<f64>,
    horizon: f64,
}

/// Objective over a fixed set of observed pairs.
struct Objective<'a> {
    dataset: &'a Dataset,
    pairs: Vec<PairData>,
    components: Components,
}

impl<'a> Objective<'a> {
    fn new(dataset: &'a Dataset, components: Components) -> Result<Self> {
        let pairs: Vec<PairData> = dataset
            .observed()
            .map(|seq| PairData {
                student: seq.student,
                assignment: seq.assignment,
                label: dataset.pair_label(seq.student, seq.assignment),
                times: seq.relative_times(),
                horizon: seq.horizon(),
            })
            .collect();
        if pairs.is_empty() {
            return Err(Error::Data("no observed sequences to fit".into()));
        }
        Ok(Self {
            dataset,
            pairs,
            components,
        })
    }

    fn pair_params(&self, store: &ParameterStore, pd: &PairData) -> crate::model::PairParameters {
        store.pair(
            pd.student,
            pd.assignment,
            &self.dataset.assignments[pd.assignment],
            self.components,
        )
    }

    /// Summed negative log-likelihood. Errors name the first non-finite pair.
    fn value(&self, store: &ParameterStore) -> Result<f64> {
        let terms: Vec<Result<f64>> = self
            .pairs
            .par_iter()
            .map(|pd| log_likelihood(&pd.times, pd.horizon, &self.pair_params(store, pd)))
            .collect();
        let mut total = 0.0;
        for (pd, term) in self.pairs.iter().zip(terms) {
            let ll = term?;
            if !ll.is_finite() {
                return Err(Error::Numerical(format!("non-finite log-likelihood for pair {}", pd.label)));
            }
            total -= ll;
        }
        Ok(total)
    }

    /// Summed negative log-likelihood, its gradient and the empirical Fisher
    /// diagonal, reduced in pair order.
    fn value_gradient_fisher(&self, store: &ParameterStore) -> Result<(f64, ParameterStore, ParameterStore)> {
        let terms: Vec<Result<(f64, GradientRecord, GradientRecord)>> = self
            .pairs
            .par_iter()
            .map(|pd| log_likelihood_gradient_fisher(&pd.times, pd.horizon, &self.pair_params(store, pd)))
            .collect();
        let mut grad = store.zeros_like();
        let mut fisher = store.zeros_like();
        let mut total = 0.0;
        for (pd, term) in self.pairs.iter().zip(terms) {
            let (ll, g, f) = term?;
            if !ll.is_finite() || !g.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite log-likelihood or gradient for pair {}",
                    pd.label
                )));
            }
            total -= ll;
            let (i, j) = (pd.student, pd.assignment);
            for (store, rec, sign) in [(&mut grad, g, -1.0), (&mut fisher, f, 1.0)] {
                store.alpha[(i, j)] += sign * rec.alpha;
                store.m[(i, j)] += sign * rec.m;
                store.gamma_h[(i, j)] += sign * rec.gamma_h;
                store.gamma_o[(i, j)] += sign * rec.gamma_o;
                store.gamma_d[(i, j)] += sign * rec.gamma_d;
                store.c[i] += sign * rec.c;
                store.p[i] += sign * rec.p;
                store.b[i] += sign * rec.b;
                store.v[i] += sign * rec.v;
            }
        }
        Ok((total, grad, fisher))
    }

    /// Diagonal metric: the Fisher diagonal, raised where needed so that a
    /// unit-`gamma` step moves no coordinate further than its trust length.
    fn metric(&self, store: &ParameterStore, grad: &ParameterStore, fisher: &ParameterStore) -> ParameterStore {
        let mut metric = fisher.clone();
        let trust = trust_lengths(store);
        for ((d, g), t) in metric.slices_mut().into_iter().zip(grad.slices()).zip(trust) {
            for (di, gi) in d.iter_mut().zip(g) {
                *di = di.max(gi.abs() / t).max(f64::MIN_POSITIVE);
            }
        }
        metric
    }
}

/// Per-symbol cap on a unit-`gamma` step, in storage order
/// (c, p, b, v, alpha, m, gamma_h, gamma_o, gamma_d).
fn trust_lengths(store: &ParameterStore) -> [f64; 9] {
    [0.25, store.s / 8.0, 0.1, 2.0, 0.1, 1.0, 0.25, 1.0, 2.0]
}

/// Median of the metric over the cells that carry data, used to turn the
/// trace-norm penalty into a per-matrix threshold.
fn block_scale(metric: &[f64], grad: &[f64]) -> f64 {
    let mut vals: Vec<f64> = metric
        .iter()
        .zip(grad)
        .filter(|(_, g)| **g != 0.0)
        .map(|(d, _)| *d)
        .collect();
    if vals.is_empty() {
        return 1.0;
    }
    vals.sort_by(f64::total_cmp);
    vals[vals.len() / 2]
}

fn zip_map(a: &ParameterStore, b: &ParameterStore, f: impl Fn(f64, f64) -> f64) -> ParameterStore {
    let mut out = a.clone();
    for (dst, src) in out.slices_mut().into_iter().zip(b.slices()) {
        for (x, &y) in dst.iter_mut().zip(src) {
            *x = f(*x, y);
        }
    }
    out
}

fn inner(a: &ParameterStore, b: &ParameterStore) -> f64 {
    a.slices()
        .into_iter()
        .zip(b.slices())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .sum()
}

fn check_shapes(train: &Dataset, init: &ParameterStore) -> Result<()> {
    if init.num_students() != train.num_students() || init.num_assignments() != train.num_assignments() {
        return Err(Error::InvalidArgument(format!(
            "initial parameters are {}x{} but the dataset is {}x{}",
            init.num_students(),
            init.num_assignments(),
            train.num_students(),
            train.num_assignments()
        )));
    }
    Ok(())
}

struct RunResult {
    params: ParameterStore,
    loss_trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    gamma: f64,
}

/// One accelerated proximal-gradient run from `init`.
fn run(objective: &Objective, hyper: &HyperParams, init: ParameterStore) -> Result<RunResult> {
    let n_pairs = objective.pairs.len() as f64;
    let mut x = init;
    x.beta = hyper.beta;
    x.s = hyper.s;
    x.apply_components(objective.components);
    let mut x_prev = x.clone();
    let mut f_x = objective.value(&x)?;
    let mut trace = vec![f_x / n_pairs];

    // momentum sequence: t_prev = α_{i-1}, t = α_i
    let (mut t_prev, mut t) = (0.0_f64, 1.0_f64);
    let mut gamma = hyper.gamma0;
    let gamma_floor = hyper.gamma0.min(1.0);
    let mut iterations = 0;
    let mut quiet = 0;
    let mut converged = false;
    let mut attempts = 0;

    'outer: while iterations < hyper.max_iter {
        attempts += 1;
        if attempts > 10 * hyper.max_iter {
            break;
        }
        let a = (t_prev - 1.0) / t;
        let mut y = zip_map(&x, &x_prev, |xi, pi| xi + a * (xi - pi));
        prox::clamp_store(&mut y);
        let momentum = y != x;

        let (f_y, g_y, fisher) = objective.value_gradient_fisher(&y)?;
        let metric = objective.metric(&y, &g_y, &fisher);
        let (d_slices, g_slices) = (metric.slices(), g_y.slices());
        let scales: [f64; 5] = std::array::from_fn(|k| block_scale(d_slices[4 + k], g_slices[4 + k]));
        let (z, f_z) = loop {
            let mut step = y.clone();
            for ((dst, g), d) in step.slices_mut().into_iter().zip(g_y.slices()).zip(metric.slices()) {
                for ((x, gi), di) in dst.iter_mut().zip(g).zip(d) {
                    *x -= gi / (gamma * di);
                }
            }
            let thresholds = scales.map(|sc| hyper.rho / (gamma * sc));
            let z = prox::project_store(&step, thresholds);
            let diff = zip_map(&z, &y, |zi, yi| zi - yi);
            let weighted = zip_map(&diff, &metric, |di, mi| di * mi);
            let model = f_y + inner(&g_y, &diff) + 0.5 * gamma * inner(&diff, &weighted);
            match objective.value(&z) {
                Ok(f_z) if f_z.is_finite() && f_z <= model => break (z, f_z),
                Ok(_) => {}
                // a step can leave the region where the likelihood is finite
                Err(Error::Numerical(_)) => {}
                Err(e) => return Err(e),
            }
            gamma *= hyper.eta;
            if gamma > hyper.gamma0 * GAMMA_BLOWUP {
                debug!("backtracking exhausted at iteration {iterations}");
                converged = true;
                break 'outer;
            }
        };

        if f_z > f_x {
            if momentum {
                // restart the momentum from the current iterate
                x_prev = x.clone();
                t_prev = 0.0;
                t = 1.0;
            } else {
                gamma *= hyper.eta;
                if gamma > hyper.gamma0 * GAMMA_BLOWUP {
                    converged = true;
                    break;
                }
            }
            continue;
        }

        iterations += 1;
        // let the step grow back after backtracking; the metric changes
        // between iterations, so an old rejection says little about the next
        gamma = (gamma / hyper.eta).max(gamma_floor);
        let rel_change = (f_x - f_z).abs() / f_x.abs().max(1e-12);
        x_prev = std::mem::replace(&mut x, z);
        f_x = f_z;
        trace.push(f_x / n_pairs);
        if iterations % 100 == 0 {
            debug!("iteration {iterations}: loss {:.6} gamma {gamma}", f_x / n_pairs);
        }

        quiet = if rel_change < hyper.tol { quiet + 1 } else { 0 };
        if quiet >= PATIENCE {
            converged = true;
            break;
        }
        t_prev = t;
        t = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
    }
    Ok(RunResult {
        params: x,
        loss_trace: trace,
        iterations,
        converged,
        gamma,
    })
}

fn assemble(
    train: &Dataset,
    hyper: &HyperParams,
    components: Components,
    params: ParameterStore,
    diagnostics: FitDiagnostics,
) -> FittedModel {
    FittedModel {
        students: train.students.clone(),
        assignments: train.assignments.iter().map(|a| a.assignment_id.clone()).collect(),
        parameters: params,
        hyper: hyper.clone(),
        components,
        ablated: components.ablated(),
        diagnostics,
    }
}

/// Fits all observed pairs of `train` starting from `init` with a single
/// accelerated proximal-gradient run.
pub fn fit(
    train: &Dataset,
    hyper: &HyperParams,
    components: Components,
    init: ParameterStore,
) -> Result<FittedModel> {
    let started = Instant::now();
    hyper.validate()?;
    init.check_constraints()?;
    check_shapes(train, &init)?;
    let objective = Objective::new(train, components)?;
    let res = run(&objective, hyper, init)?;
    let wall = started.elapsed().as_secs_f64();
    let final_loss = *res.loss_trace.last().expect("trace holds the initial loss");
    info!(
        "fit finished after {} iterations in {wall:.2}s, loss {final_loss:.6}",
        res.iterations
    );
    let diagnostics = FitDiagnostics {
        final_loss,
        iterations: res.iterations,
        stage_starts: vec![0],
        loss_trace: res.loss_trace,
        converged: res.converged,
        final_gamma: res.gamma,
        wall_time_secs: wall,
    };
    Ok(assemble(train, hyper, components, res.params, diagnostics))
}

/// Schedule around the gradient runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Number of (gradient run, warm start) rounds before the final run.
    pub rounds: usize,
    pub warm_start: WarmStartConfig,
    /// Fill cells without training events by low-rank completion after the
    /// final run.
    pub complete_unobserved: bool,
    pub completion: CompletionConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            rounds: 3,
            warm_start: WarmStartConfig::default(),
            complete_unobserved: true,
            completion: CompletionConfig::default(),
        }
    }
}

impl FitOptions {
    /// A single gradient run with nothing around it (same as [`fit`]).
    pub fn plain() -> Self {
        Self {
            rounds: 0,
            warm_start: WarmStartConfig {
                enabled: false,
                ..WarmStartConfig::default()
            },
            complete_unobserved: false,
            completion: CompletionConfig::default(),
        }
    }
}

/// Alternates gradient runs with the deadline warm start, runs once more,
/// then completes unobserved cells.
pub fn fit_with(
    train: &Dataset,
    hyper: &HyperParams,
    components: Components,
    init: ParameterStore,
    options: &FitOptions,
) -> Result<FittedModel> {
    let started = Instant::now();
    hyper.validate()?;
    init.check_constraints()?;
    check_shapes(train, &init)?;
    let objective = Objective::new(train, components)?;

    let rounds = if options.warm_start.enabled { options.rounds } else { 0 };
    let mut current = init;
    let mut trace = Vec::new();
    let mut stage_starts = Vec::new();
    let mut iterations = 0;
    let mut last = None;
    for round in 0..=rounds {
        stage_starts.push(trace.len());
        let res = run(&objective, hyper, current)?;
        iterations += res.iterations;
        trace.extend_from_slice(&res.loss_trace);
        debug!("round {round}: loss {:.6}", res.loss_trace.last().copied().unwrap_or(f64::NAN));
        current = if round < rounds {
            warm_start(train, &res.params, components, &options.warm_start)?
        } else {
            res.params.clone()
        };
        last = Some(res);
    }
    let last = last.expect("at least one run");
    let final_loss = *trace.last().expect("trace holds the initial loss");
    if options.complete_unobserved {
        complete_unobserved(train, &mut current, &options.completion);
    }
    let wall = started.elapsed().as_secs_f64();
    info!("fit finished after {iterations} iterations in {wall:.2}s, loss {final_loss:.6}");
    let diagnostics = FitDiagnostics {
        final_loss,
        iterations,
        stage_starts,
        loss_trace: trace,
        converged: last.converged,
        final_gamma: last.gamma,
        wall_time_secs: wall,
    };
    Ok(assemble(train, hyper, components, current, diagnostics))
}

/// Per-pair mean negative log-likelihood of `store` on `dataset`.
pub fn mean_loss(dataset: &Dataset, store: &ParameterStore, components: Components) -> Result<f64> {
    let objective = Objective::new(dataset, components)?;
    Ok(objective.value(store)? / objective.pairs.len() as f64)
}
