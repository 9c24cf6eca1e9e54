//! Conditional intensity of a stimuli-sensitive Hawkes process.
//!
//! On the pair clock `t` (hours since the assignment opened):
//!
//! ```text
//! λ(t) = γʰ·μʰ(t) + γᵒ·μᵒ(t) + γᵈ·μᵈ(t) + Σ_{x<t} αβ·exp(−β(t − x))
//!
//! μʰ(t) = sin(2π(t + p)/s) + c                      habit
//! μᵒ(t) = b^(t/s)                                   opening
//! μᵈ(t) = exp(−(ln w)²/v) / (√(2πv)·w),  w = d − m − t/s   deadline (w > 0)
//! ```
//!
//! together with the closed-form compensators of each base term, the O(K)
//! log-likelihood and its gradient with respect to every learnable symbol.

use std::f64::consts::{PI, SQRT_2, TAU};

use statrs::function::erf::{erf, erfc};

use crate::error::{Error, Result};
use crate::model::{EventSequence, PairParameters};

/// Below this remaining deadline distance (scaled units) the deadline rate
/// is zero and its compensator is saturated.
pub const DEADLINE_EPS: f64 = 1e-8;

/// Floor applied to λ at an event inside the log.
pub const LOG_FLOOR: f64 = 1e-10;

/// Below this |ln b · t/s| the opening compensator derivative uses its
/// series expansion.
const OPENING_SERIES_CUTOFF: f64 = 1e-3;

/// `(s / 2^{3/2})`, the mass scale of the deadline kernel.
fn deadline_scale(s: f64) -> f64 {
    s / (2.0 * SQRT_2)
}

/// `erf(a) - erf(b)` without cancellation when both arguments share a sign.
fn erf_diff(a: f64, b: f64) -> f64 {
    if a >= 0.0 && b >= 0.0 {
        erfc(b) - erfc(a)
    } else if a <= 0.0 && b <= 0.0 {
        erfc(-a) - erfc(-b)
    } else {
        erf(a) - erf(b)
    }
}

fn erf_prime(x: f64) -> f64 {
    2.0 / PI.sqrt() * (-x * x).exp()
}

/// Unweighted habit term `sin(2π(t+p)/s) + c`.
pub fn habit_rate(t: f64, pair: &PairParameters) -> f64 {
    (TAU * (t + pair.p) / pair.s).sin() + pair.c
}

/// Unweighted opening term `b^(t/s)`.
pub fn opening_rate(t: f64, pair: &PairParameters) -> f64 {
    pair.b.powf(t / pair.s)
}

/// Reversed log-normal deadline kernel in `w = d − m − t/s`.
pub fn deadline_kernel(w: f64, v: f64) -> f64 {
    if w < DEADLINE_EPS {
        return 0.0;
    }
    let lw = w.ln();
    (-lw * lw / v).exp() / ((TAU * v).sqrt() * w)
}

/// Unweighted deadline term; zero once `t/s >= d − m`.
pub fn deadline_rate(t: f64, pair: &PairParameters) -> f64 {
    deadline_kernel(pair.deadline_end() - t / pair.s, pair.v)
}

/// Self-excitation `Σ_{x<t} αβ·exp(−β(t − x))` from a history on the pair
/// clock. Events at or after `t` are ignored.
pub fn excitation_rate(t: f64, history: &[f64], pair: &PairParameters) -> f64 {
    if !pair.components.excitation {
        return 0.0;
    }
    let ab = pair.alpha * pair.beta;
    history
        .iter()
        .take_while(|&&x| x < t)
        .map(|&x| ab * (-pair.beta * (t - x)).exp())
        .sum()
}

/// Weighted base rate `γʰμʰ + γᵒμᵒ + γᵈμᵈ` with switched-off terms omitted.
pub fn base_rate(t: f64, pair: &PairParameters) -> f64 {
    let k = pair.components;
    let mut total = 0.0;
    if k.habit {
        total += pair.gamma_h * habit_rate(t, pair);
    }
    if k.opening {
        total += pair.gamma_o * opening_rate(t, pair);
    }
    if k.deadline {
        total += pair.gamma_d * deadline_rate(t, pair);
    }
    total
}

/// Full conditional intensity λ(t) given a history on the pair clock.
pub fn total_intensity(t: f64, pair: &PairParameters, history: &[f64]) -> f64 {
    base_rate(t, pair) + excitation_rate(t, history, pair)
}

/// Integrals of the three unweighted base terms over `[0, t]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BaseCompensators {
    pub habit: f64,
    pub opening: f64,
    pub deadline: f64,
}

impl BaseCompensators {
    /// Weighted total, honouring the pair's component switches.
    pub fn weighted(&self, pair: &PairParameters) -> f64 {
        let k = pair.components;
        let mut total = 0.0;
        if k.habit {
            total += pair.gamma_h * self.habit;
        }
        if k.opening {
            total += pair.gamma_o * self.opening;
        }
        if k.deadline {
            total += pair.gamma_d * self.deadline;
        }
        total
    }
}

fn habit_compensator(t: f64, pair: &PairParameters) -> f64 {
    let (s, p) = (pair.s, pair.p);
    -(s / TAU) * ((TAU * (t + p) / s).cos() - (TAU * p / s).cos()) + pair.c * t
}

/// `∫₀ᵗ b^(u/s) du = s(b^(t/s) − 1)/ln b`, written as `t·expm1(x)/x` with
/// `x = ln b · t/s` so that `b → 1` stays finite.
fn opening_compensator(t: f64, pair: &PairParameters) -> f64 {
    let ln_b = pair.b.ln();
    if ln_b == 0.0 {
        t
    } else {
        pair.s * (ln_b * t / pair.s).exp_m1() / ln_b
    }
}

/// Remaining deadline distance at `t`, floored at the guard so that the
/// compensator saturates exactly where the rate switches off.
fn guarded_w(t: f64, pair: &PairParameters) -> f64 {
    (pair.deadline_end() - t / pair.s).max(DEADLINE_EPS)
}

fn deadline_compensator(t: f64, pair: &PairParameters) -> f64 {
    let end = pair.deadline_end();
    if end <= DEADLINE_EPS {
        return 0.0;
    }
    let sv = pair.v.sqrt();
    deadline_scale(pair.s) * erf_diff(end.ln() / sv, guarded_w(t, pair).ln() / sv)
}

/// Compensators of the habit, opening and deadline terms at `t >= 0`.
pub fn cumulative_base(t: f64, pair: &PairParameters) -> BaseCompensators {
    BaseCompensators {
        habit: habit_compensator(t, pair),
        opening: opening_compensator(t, pair),
        deadline: deadline_compensator(t, pair),
    }
}

/// Running state of the exponential excitation kernel.
///
/// `r` is `Σ_{x ≤ last_time} exp(−β(last_time − x))`, i.e. the kernel sum
/// just after the most recent event (0 with no events).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExcitationState {
    pub r: f64,
    pub last_time: f64,
}

impl ExcitationState {
    pub fn from_history(history: &[f64], beta: f64) -> Self {
        let mut state = Self::default();
        for &x in history {
            state.push(x, beta);
        }
        state
    }

    pub fn push(&mut self, t: f64, beta: f64) {
        self.r = self.r * (-beta * (t - self.last_time)).exp() + 1.0;
        self.last_time = t;
    }

    /// Kernel sum at `t >= last_time`, before any event at `t` is added.
    pub fn decayed(&self, t: f64, beta: f64) -> f64 {
        if self.r == 0.0 {
            0.0
        } else {
            self.r * (-beta * (t - self.last_time)).exp()
        }
    }
}

/// Partial derivatives of one sequence's log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradientRecord {
    pub alpha: f64,
    pub m: f64,
    pub gamma_h: f64,
    pub gamma_o: f64,
    pub gamma_d: f64,
    pub c: f64,
    pub p: f64,
    pub b: f64,
    pub v: f64,
}

impl GradientRecord {
    fn fields_mut(&mut self) -> [&mut f64; 9] {
        [
            &mut self.alpha,
            &mut self.m,
            &mut self.gamma_h,
            &mut self.gamma_o,
            &mut self.gamma_d,
            &mut self.c,
            &mut self.p,
            &mut self.b,
            &mut self.v,
        ]
    }

    fn fields(&self) -> [f64; 9] {
        [
            self.alpha,
            self.m,
            self.gamma_h,
            self.gamma_o,
            self.gamma_d,
            self.c,
            self.p,
            self.b,
            self.v,
        ]
    }

    fn add_scaled(&mut self, other: &Self, k: f64) {
        for (dst, src) in self.fields_mut().into_iter().zip(other.fields()) {
            *dst += k * src;
        }
    }

    fn add_squares(&mut self, other: &Self) {
        for (dst, src) in self.fields_mut().into_iter().zip(other.fields()) {
            *dst += src * src;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|x| x.is_finite())
    }
}

fn check_times(times: &[f64], horizon: f64) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InvalidArgument(
            "log-likelihood of an empty sequence is undefined".into(),
        ));
    }
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    Ok(())
}

/// Log-likelihood of relative event times `times` (sorted, in `[0, horizon]`)
/// observed over `[0, horizon]`, in O(K).
pub fn log_likelihood(times: &[f64], horizon: f64, pair: &PairParameters) -> Result<f64> {
    check_times(times, horizon)?;
    let excite = pair.components.excitation;
    let ab = pair.alpha * pair.beta;
    let mut r = 0.0;
    let mut prev = times[0];
    let mut sum_log = 0.0;
    let mut tail = 0.0;
    for (k, &x) in times.iter().enumerate() {
        if k > 0 {
            r = (1.0 + r) * (-pair.beta * (x - prev)).exp();
        }
        prev = x;
        let mut lambda = base_rate(x, pair);
        if excite {
            lambda += ab * r;
        }
        sum_log += lambda.max(LOG_FLOOR).ln();
        tail += (-pair.beta * (horizon - x)).exp() - 1.0;
    }
    let mut ll = sum_log - cumulative_base(horizon, pair).weighted(pair);
    if excite {
        ll += pair.alpha * tail;
    }
    Ok(ll)
}

/// Log-likelihood of a sequence over its full observation window.
pub fn sequence_log_likelihood(seq: &EventSequence, pair: &PairParameters) -> Result<f64> {
    log_likelihood(&seq.relative_times(), seq.horizon(), pair)
}

/// Log-likelihood and its exact gradient over relative times. `β` and `s`
/// are hyperparameters and get no partials.
pub fn log_likelihood_with_gradient(
    times: &[f64],
    horizon: f64,
    pair: &PairParameters,
) -> Result<(f64, GradientRecord)> {
    gradient_pass(times, horizon, pair, None)
}

/// Log-likelihood, gradient and the empirical Fisher diagonal
/// `Σ_τ (∂ log λ(x_τ)/∂θ)²`, a curvature estimate that is exact for the
/// stimulus weights.
pub fn log_likelihood_gradient_fisher(
    times: &[f64],
    horizon: f64,
    pair: &PairParameters,
) -> Result<(f64, GradientRecord, GradientRecord)> {
    let mut fisher = GradientRecord::default();
    let (ll, g) = gradient_pass(times, horizon, pair, Some(&mut fisher))?;
    Ok((ll, g, fisher))
}

fn gradient_pass(
    times: &[f64],
    horizon: f64,
    pair: &PairParameters,
    mut fisher: Option<&mut GradientRecord>,
) -> Result<(f64, GradientRecord)> {
    check_times(times, horizon)?;
    let k = pair.components;
    let (s, beta, v) = (pair.s, pair.beta, pair.v);
    let ab = pair.alpha * beta;
    let end = pair.deadline_end();
    let ln_b = pair.b.ln();

    let mut g = GradientRecord::default();
    let mut r = 0.0;
    let mut prev = times[0];
    let mut sum_log = 0.0;
    let mut tail = 0.0;

    for (idx, &x) in times.iter().enumerate() {
        if idx > 0 {
            r = (1.0 + r) * (-beta * (x - prev)).exp();
        }
        prev = x;
        tail += (-beta * (horizon - x)).exp() - 1.0;

        let phase = TAU * (x + pair.p) / s;
        let mu_h = phase.sin() + pair.c;
        let mu_o = (ln_b * x / s).exp();
        let w = end - x / s;
        let mu_d = deadline_kernel(w, v);

        let mut lambda = 0.0;
        if k.habit {
            lambda += pair.gamma_h * mu_h;
        }
        if k.opening {
            lambda += pair.gamma_o * mu_o;
        }
        if k.deadline {
            lambda += pair.gamma_d * mu_d;
        }
        if k.excitation {
            lambda += ab * r;
        }
        if lambda < LOG_FLOOR {
            sum_log += LOG_FLOOR.ln();
            continue;
        }
        sum_log += lambda.ln();
        let inv = 1.0 / lambda;

        let mut e = GradientRecord::default();
        if k.excitation {
            e.alpha = beta * r * inv;
        }
        if k.habit {
            e.gamma_h = mu_h * inv;
            e.c = pair.gamma_h * inv;
            e.p = pair.gamma_h * (TAU / s) * phase.cos() * inv;
        }
        if k.opening {
            e.gamma_o = mu_o * inv;
            e.b = pair.gamma_o * (x / s) * mu_o / pair.b * inv;
        }
        if k.deadline && mu_d > 0.0 {
            let lw = w.ln();
            e.gamma_d = mu_d * inv;
            // dμᵈ/dm = −dμᵈ/dw
            e.m = pair.gamma_d * mu_d * (2.0 * lw / (v * w) + 1.0 / w) * inv;
            e.v = pair.gamma_d * mu_d * (lw * lw / (v * v) - 0.5 / v) * inv;
        }
        g.add_scaled(&e, 1.0);
        if let Some(f) = fisher.as_deref_mut() {
            f.add_squares(&e);
        }
    }

    let comp = cumulative_base(horizon, pair);
    let mut ll = sum_log - comp.weighted(pair);

    if k.excitation {
        ll += pair.alpha * tail;
        g.alpha += tail;
    }
    if k.habit {
        g.gamma_h -= comp.habit;
        g.c -= pair.gamma_h * horizon;
        g.p -= pair.gamma_h * ((TAU * (horizon + pair.p) / s).sin() - (TAU * pair.p / s).sin());
    }
    if k.opening {
        g.gamma_o -= comp.opening;
        g.b -= pair.gamma_o * opening_compensator_db(horizon, pair);
    }
    if k.deadline {
        g.gamma_d -= comp.deadline;
        let (dm, dv) = deadline_compensator_partials(horizon, pair);
        g.m -= pair.gamma_d * dm;
        g.v -= pair.gamma_d * dv;
    }
    Ok((ll, g))
}

/// Gradient of a sequence's log-likelihood over its full window.
pub fn sequence_log_likelihood_gradient(
    seq: &EventSequence,
    pair: &PairParameters,
) -> Result<GradientRecord> {
    log_likelihood_with_gradient(&seq.relative_times(), seq.horizon(), pair).map(|(_, g)| g)
}

/// `∂/∂b ∫₀ᵀ b^(u/s) du = s·τ²·g(x)/b` with `τ = T/s`, `x = τ·ln b` and
/// `g(x) = (x·eˣ − eˣ + 1)/x²`.
fn opening_compensator_db(t: f64, pair: &PairParameters) -> f64 {
    let tau = t / pair.s;
    let x = pair.b.ln() * tau;
    let g = if x.abs() < OPENING_SERIES_CUTOFF {
        0.5 + x / 3.0 + x * x / 8.0
    } else {
        (x * x.exp() - x.exp_m1()) / (x * x)
    };
    pair.s * tau * tau * g / pair.b
}

/// Partials of the unweighted deadline compensator at `t` with respect to
/// `m` and `v`.
fn deadline_compensator_partials(t: f64, pair: &PairParameters) -> (f64, f64) {
    let end = pair.deadline_end();
    if end <= DEADLINE_EPS {
        return (0.0, 0.0);
    }
    let scale = deadline_scale(pair.s);
    let sv = pair.v.sqrt();
    let raw_w = end - t / pair.s;
    let saturated = raw_w < DEADLINE_EPS;
    let w = raw_w.max(DEADLINE_EPS);
    let (y0, y1) = (end.ln(), w.ln());
    let (z0, z1) = (y0 / sv, y1 / sv);

    // d/dm of erf(ln(d − m)/√v) = −erf'(z)/((d − m)√v)
    let mut dm = -erf_prime(z0) / (end * sv);
    if !saturated {
        dm += erf_prime(z1) / (w * sv);
    }
    // d/dv of erf(y/√v) = −erf'(y/√v)·y/(2 v^{3/2})
    let dz_dv = |y: f64, z: f64| -erf_prime(z) * y / (2.0 * pair.v * sv);
    let dv = dz_dv(y0, z0) - dz_dv(y1, z1);
    (scale * dm, scale * dv)
}
