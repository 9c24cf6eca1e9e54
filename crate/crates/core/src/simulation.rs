//! Ogata thinning and synthetic course generation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intensity::{base_rate, deadline_kernel, ExcitationState, DEADLINE_EPS};
use crate::model::{AssignmentSchedule, Components, Dataset, EventSequence, PairParameters, ParameterStore};

/// Relative slack allowed before a proposal above the bound counts as a
/// violation (absorbs rounding in the bound itself).
const BOUND_SLACK: f64 = 1e-9;

/// A conditional intensity that can be sampled by thinning. Times are on the
/// pair clock.
pub trait ConditionalIntensity {
    /// λ(t) given the excitation state of all events before `t`.
    fn intensity(&self, t: f64, state: &ExcitationState) -> f64;
    /// An upper bound of λ on `[t, t + lookahead]` when no event occurs.
    fn upper_bound(&self, t: f64, lookahead: f64, state: &ExcitationState) -> f64;
    /// Adds an event at `t` to the state.
    fn record_event(&self, state: &mut ExcitationState, t: f64);
    /// Length of the window over which a bound is trusted.
    fn lookahead(&self) -> f64;
}

impl ConditionalIntensity for PairParameters {
    fn intensity(&self, t: f64, state: &ExcitationState) -> f64 {
        let mut rate = base_rate(t, self);
        if self.components.excitation {
            rate += self.alpha * self.beta * state.decayed(t, self.beta);
        }
        rate
    }

    fn upper_bound(&self, t: f64, lookahead: f64, state: &ExcitationState) -> f64 {
        let k = self.components;
        let mut bound = 0.0;
        if k.habit {
            bound += self.gamma_h * (self.c + 1.0);
        }
        if k.opening {
            bound += self.gamma_o * self.b.powf(t / self.s);
        }
        if k.deadline {
            bound += self.gamma_d * deadline_sup(self, t, t + lookahead);
        }
        if k.excitation {
            bound += self.alpha * self.beta * state.decayed(t, self.beta);
        }
        bound
    }

    fn record_event(&self, state: &mut ExcitationState, t: f64) {
        state.push(t, self.beta);
    }

    fn lookahead(&self) -> f64 {
        self.s / 4.0
    }
}

/// Supremum of the unweighted deadline kernel over `[t0, t1]`.
///
/// In `u = ln w` the log-kernel is `−u²/v − u + const`, concave with its
/// maximum at `u = −v/2`, so the supremum over an interval of `w` sits at the
/// mode clamped into that interval.
fn deadline_sup(pair: &PairParameters, t0: f64, t1: f64) -> f64 {
    let end = pair.deadline_end();
    let w_hi = end - t0 / pair.s;
    if w_hi < DEADLINE_EPS {
        return 0.0;
    }
    let w_lo = (end - t1 / pair.s).max(DEADLINE_EPS);
    let mode = (-pair.v / 2.0).exp();
    deadline_kernel(mode.clamp(w_lo, w_hi), pair.v)
}

/// Homogeneous rate, used as a test seam for the samplers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantRate(pub f64);

impl ConditionalIntensity for ConstantRate {
    fn intensity(&self, _t: f64, _state: &ExcitationState) -> f64 {
        self.0
    }

    fn upper_bound(&self, _t: f64, _lookahead: f64, _state: &ExcitationState) -> f64 {
        self.0
    }

    fn record_event(&self, _state: &mut ExcitationState, _t: f64) {}

    fn lookahead(&self) -> f64 {
        1.0
    }
}

/// Dominating rate of `pair` on `[t, t + lookahead]` given the (pair-clock)
/// history of events before `t`.
pub fn local_intensity_bound(pair: &PairParameters, history: &[f64], t: f64, lookahead: f64) -> f64 {
    assert!(lookahead > 0.0, "lookahead must be positive");
    let before: Vec<f64> = history.iter().copied().take_while(|&x| x < t).collect();
    let state = ExcitationState::from_history(&before, pair.beta);
    pair.upper_bound(t, lookahead, &state)
}

/// Draws the first event after `t` and before `limit`, or `None` if there is
/// none. `state` holds the events before `t`.
pub fn next_arrival<I: ConditionalIntensity + ?Sized, R: Rng + ?Sized>(
    model: &I,
    mut t: f64,
    limit: f64,
    state: &ExcitationState,
    rng: &mut R,
) -> Result<Option<f64>> {
    let lookahead = model.lookahead();
    while t < limit {
        let bound = model.upper_bound(t, lookahead, state);
        let window_end = (t + lookahead).min(limit);
        if !(bound > 0.0) {
            t = window_end;
            continue;
        }
        let wait: f64 = Exp1.sample(rng);
        let proposal = t + wait / bound;
        if proposal > window_end {
            t = window_end;
            continue;
        }
        let rate = model.intensity(proposal, state);
        if !rate.is_finite() || rate > bound * (1.0 + BOUND_SLACK) {
            return Err(Error::Numerical(format!(
                "thinning bound violated at t = {proposal}: intensity {rate} > bound {bound}"
            )));
        }
        t = proposal;
        if rng.random::<f64>() * bound < rate && proposal > state.last_time {
            return Ok(Some(proposal));
        }
    }
    Ok(None)
}

/// Samples all events in `(0, horizon]` on the pair clock.
pub fn sample_times<I: ConditionalIntensity + ?Sized, R: Rng + ?Sized>(
    model: &I,
    horizon: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut state = ExcitationState::default();
    let mut times = Vec::new();
    let mut t = 0.0;
    while let Some(x) = next_arrival(model, t, horizon, &state, rng)? {
        model.record_event(&mut state, x);
        times.push(x);
        t = x;
    }
    Ok(times)
}

/// Samples one sequence of `pair` on the window `[t_start, t_end]` (hours),
/// where `t_start` is the origin of the pair clock.
pub fn sample_sequence(pair: &PairParameters, t_start: f64, t_end: f64, seed: u64) -> Result<EventSequence> {
    if !(t_end > t_start) {
        return Err(Error::InvalidArgument(format!(
            "sampling window [{t_start}, {t_end}] is empty"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times = sample_times(pair, t_end - t_start, &mut rng)?;
    EventSequence::new(
        pair.student,
        pair.assignment,
        times.into_iter().map(|x| x + t_start).collect(),
        t_start,
        t_end,
    )
}

/// Independent random stream for pair (i, j) under `seed`.
pub fn pair_rng(seed: u64, student: usize, assignment: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((student as u64) << 32) | assignment as u64);
    rng
}

/// Seed for a named sub-task of a run, so different stages never share a
/// stream.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Mean and standard deviation of a generating normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalSpec {
    pub mean: f64,
    pub sd: f64,
}

impl NormalSpec {
    pub const fn new(mean: f64, sd: f64) -> Self {
        Self { mean, sd }
    }
}

/// Closed interval a drawn value must land in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

/// Legal ranges for generated parameters. Vector draws and i.i.d. matrix
/// draws are resampled until they fall inside; factor-model matrices are
/// clamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruncationBounds {
    pub alpha: Interval,
    pub gamma: Interval,
    pub v: Interval,
    pub b: Interval,
    pub c: Interval,
}

impl Default for TruncationBounds {
    fn default() -> Self {
        Self {
            alpha: Interval::new(0.0, 0.9),
            gamma: Interval::new(0.0, f64::MAX),
            v: Interval::new(1.0, f64::MAX),
            b: Interval::new(0.01, 0.99),
            c: Interval::new(1.0, f64::MAX),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub students: usize,
    pub assignments: usize,
    pub alpha: NormalSpec,
    pub m: NormalSpec,
    pub gamma_d: NormalSpec,
    pub gamma_o: NormalSpec,
    pub gamma_h: NormalSpec,
    pub v: NormalSpec,
    pub b: NormalSpec,
    pub p: NormalSpec,
    pub c: NormalSpec,
    /// Deadline in scaled units after the opening.
    pub deadline: f64,
    /// Observation window length in scaled units; hours are `horizon * s`.
    pub horizon: f64,
    pub s: f64,
    pub beta: f64,
    /// When set, each matrix is `mean + sd * Z` with `Z` a standardized
    /// product of two Gaussian factors of this rank, instead of i.i.d. cells.
    pub matrix_rank: Option<usize>,
    pub bounds: TruncationBounds,
    pub mask_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            students: 500,
            assignments: 20,
            alpha: NormalSpec::new(0.4, 0.1),
            m: NormalSpec::new(0.0, 5.0),
            gamma_d: NormalSpec::new(15.0, 3.0),
            gamma_o: NormalSpec::new(5.0, 3.0),
            gamma_h: NormalSpec::new(0.5, 0.1),
            v: NormalSpec::new(20.0, 10.0),
            b: NormalSpec::new(0.5, 0.3),
            p: NormalSpec::new(6.0, 4.0),
            c: NormalSpec::new(1.2, 0.1),
            deadline: 80.0,
            horizon: 100.0,
            s: 1.0,
            beta: 1.0,
            matrix_rank: None,
            bounds: TruncationBounds::default(),
            mask_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.students == 0 || self.assignments == 0 {
            return Err(Error::InvalidArgument("synthetic grid must be non-empty".into()));
        }
        let normals = [
            self.alpha, self.m, self.gamma_d, self.gamma_o, self.gamma_h, self.v, self.b, self.p, self.c,
        ];
        if normals.iter().any(|n| !(n.sd >= 0.0) || !n.mean.is_finite() || !n.sd.is_finite()) {
            return Err(Error::InvalidArgument("generating normals need finite means and sd >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::InvalidArgument("mask_fraction must lie in [0, 1)".into()));
        }
        if !(self.s > 0.0) || !(self.beta > 0.0) || !(self.horizon > 0.0) || !(self.deadline > 0.0) {
            return Err(Error::InvalidArgument("s, beta, horizon and deadline must be positive".into()));
        }
        if self.matrix_rank == Some(0) {
            return Err(Error::InvalidArgument("matrix_rank must be at least 1".into()));
        }
        let b = self.bounds;
        if !(b.b.lo > 0.0 && b.b.hi < 1.0) || b.c.lo < 1.0 || b.v.lo <= 0.0 || b.alpha.lo < 0.0 || b.gamma.lo < 0.0 {
            return Err(Error::InvalidArgument("truncation bounds leave the constraint set".into()));
        }
        Ok(())
    }

    pub fn num_masked(&self) -> usize {
        (self.mask_fraction * (self.students * self.assignments) as f64).floor() as usize
    }
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// Observed pairs only; masked cells are absent.
    pub dataset: Dataset,
    /// Sequences of the masked pairs, in (student, assignment) order.
    pub masked: Vec<EventSequence>,
    pub truth: ParameterStore,
}

const MAX_REDRAWS: usize = 100;

fn truncated(rng: &mut ChaCha8Rng, spec: NormalSpec, range: Interval, what: &str) -> Result<f64> {
    for _ in 0..MAX_REDRAWS {
        let z: f64 = StandardNormal.sample(rng);
        let x = spec.mean + spec.sd * z;
        if range.contains(x) {
            return Ok(x);
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not draw {what} inside [{}, {}] in {MAX_REDRAWS} attempts",
        range.lo, range.hi
    )))
}

fn factor_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rank: usize) -> DMatrix<f64> {
    let mut normal = |_, _| -> f64 { StandardNormal.sample(&mut *rng) };
    let u = DMatrix::from_fn(rows, rank, &mut normal);
    let v = DMatrix::from_fn(cols, rank, &mut normal);
    (u * v.transpose()) / (rank as f64).sqrt()
}

fn draw_matrix(
    rng: &mut ChaCha8Rng,
    config: &SyntheticConfig,
    spec: NormalSpec,
    range: Interval,
    what: &str,
) -> Result<DMatrix<f64>> {
    let (rows, cols) = (config.students, config.assignments);
    match config.matrix_rank {
        Some(rank) => {
            let z = factor_matrix(rng, rows, cols, rank);
            Ok(z.map(|x| (spec.mean + spec.sd * x).clamp(range.lo, range.hi)))
        }
        None => {
            let mut out = DMatrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    out[(i, j)] = truncated(rng, spec, range, what)?;
                }
            }
            Ok(out)
        }
    }
}

/// Draws `m` so that every pair's deadline stimulus ends after the opening.
fn draw_lags(rng: &mut ChaCha8Rng, config: &SyntheticConfig) -> Result<DMatrix<f64>> {
    let legal = Interval::new(f64::NEG_INFINITY, config.deadline - DEADLINE_EPS);
    match config.matrix_rank {
        Some(_) => {
            for _ in 0..MAX_REDRAWS {
                let m = draw_matrix(rng, config, config.m, Interval::new(f64::NEG_INFINITY, f64::MAX), "m")?;
                if m.iter().all(|&x| legal.contains(x)) {
                    return Ok(m);
                }
            }
            Err(Error::InvalidArgument(format!(
                "could not draw m below the deadline in {MAX_REDRAWS} attempts"
            )))
        }
        None => draw_matrix(rng, config, config.m, legal, "m"),
    }
}

/// Draws a ground-truth parameter store from `config`.
pub fn draw_ground_truth(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<ParameterStore> {
    config.validate()?;
    let b = config.bounds;
    let free = Interval::new(f64::NEG_INFINITY, f64::MAX);
    let mut vector = |spec: NormalSpec, range: Interval, what: &str| -> Result<DVector<f64>> {
        let vals = (0..config.students)
            .map(|_| truncated(rng, spec, range, what))
            .collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(vals))
    };
    let c = vector(config.c, b.c, "c")?;
    let p = vector(config.p, free, "p")?;
    let bv = vector(config.b, b.b, "b")?;
    let v = vector(config.v, b.v, "v")?;
    Ok(ParameterStore {
        beta: config.beta,
        s: config.s,
        c,
        p,
        b: bv,
        v,
        alpha: draw_matrix(rng, config, config.alpha, b.alpha, "alpha")?,
        m: draw_lags(rng, config)?,
        gamma_h: draw_matrix(rng, config, config.gamma_h, b.gamma, "gamma_h")?,
        gamma_o: draw_matrix(rng, config, config.gamma_o, b.gamma, "gamma_o")?,
        gamma_d: draw_matrix(rng, config, config.gamma_d, b.gamma, "gamma_d")?,
    })
}

/// Empty course skeleton matching `config`: every assignment opens at 0 and
/// every window ends at `horizon * s` hours.
pub fn synthetic_skeleton(config: &SyntheticConfig) -> Dataset {
    let width = (config.students.max(config.assignments) as f64).log10().floor() as usize + 1;
    Dataset {
        students: (0..config.students).map(|i| format!("u{i:0width$}")).collect(),
        assignments: (0..config.assignments)
            .map(|j| AssignmentSchedule {
                assignment_id: format!("a{j:0width$}"),
                open_time: 0.0,
                deadline: config.deadline,
                label: None,
            })
            .collect(),
        sequences: BTreeMap::new(),
        grades: BTreeMap::new(),
        course_end: config.horizon * config.s,
    }
}

/// Samples every pair of `truth` on the skeleton's windows, in parallel with
/// per-pair streams.
pub fn sample_course(
    skeleton: &Dataset,
    truth: &ParameterStore,
    components: Components,
    seed: u64,
) -> Result<Vec<EventSequence>> {
    let cells: Vec<(usize, usize)> = (0..skeleton.num_students())
        .flat_map(|i| (0..skeleton.num_assignments()).map(move |j| (i, j)))
        .collect();
    cells
        .par_iter()
        .map(|&(i, j)| {
            let schedule = &skeleton.assignments[j];
            let pair = truth.pair(i, j, schedule, components);
            let mut rng = pair_rng(seed, i, j);
            let start = schedule.open_time;
            let times = sample_times(&pair, skeleton.course_end - start, &mut rng)?;
            EventSequence::new(i, j, times.into_iter().map(|x| x + start).collect(), start, skeleton.course_end)
        })
        .collect()
}

const TAG_PARAMS: u64 = 1;
const TAG_EVENTS: u64 = 2;
const TAG_MASK: u64 = 3;

/// Draws ground truth, samples every pair and masks a random subset.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let mut param_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_PARAMS));
    let truth = draw_ground_truth(config, &mut param_rng)?;
    let mut dataset = synthetic_skeleton(config);
    let sequences = sample_course(&dataset, &truth, Components::all(), derive_seed(config.seed, TAG_EVENTS))?;

    let mut cells: Vec<(usize, usize)> = sequences.iter().map(EventSequence::key).collect();
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_MASK));
    cells.shuffle(&mut mask_rng);
    let mut masked_keys: Vec<(usize, usize)> = cells[..config.num_masked()].to_vec();
    masked_keys.sort_unstable();

    let mut masked = Vec::with_capacity(masked_keys.len());
    for seq in sequences {
        if masked_keys.binary_search(&seq.key()).is_ok() {
            masked.push(seq);
        } else {
            dataset.sequences.insert(seq.key(), seq);
        }
    }
    Ok(SyntheticData {
        dataset,
        masked,
        truth,
    })
}
