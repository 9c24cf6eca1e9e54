//! Independent oracles shared by the integration and acceptance tests.
//!
//! Nothing here calls the closed-form compensators or the recursive
//! likelihood; everything is brute force or numerical.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sshp::intensity::{base_rate, log_likelihood, log_likelihood_with_gradient, DEADLINE_EPS};
use sshp::model::{Components, PairParameters};

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const K15_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const G7_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = K15_WEIGHTS[7] * fc;
    let mut gauss = G7_WEIGHTS[3] * fc;
    for i in 0..7 {
        let x = h * GK_NODES[i];
        let pair = f(c - x) + f(c + x);
        kronrod += K15_WEIGHTS[i] * pair;
        if i % 2 == 1 {
            gauss += G7_WEIGHTS[i / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Globally adaptive integration: repeatedly bisects the segment with the
/// largest error estimate until the total estimate drops below `tol` or the
/// subdivision budget runs out.
fn adaptive(f: &dyn Fn(f64) -> f64, pts: &[f64], tol: f64) -> f64 {
    const BUDGET: usize = 20_000;
    let mut segs: Vec<(f64, f64, f64, f64)> = pts
        .windows(2)
        .map(|w| {
            let (v, e) = gk15(f, w[0], w[1]);
            (w[0], w[1], v, e)
        })
        .collect();
    for _ in 0..BUDGET {
        let total_err: f64 = segs.iter().map(|s| s.3).sum();
        let total: f64 = segs.iter().map(|s| s.2).sum();
        if total_err <= tol.max(1e-15 * total.abs()) {
            break;
        }
        let (idx, &(a, b, _, _)) = segs
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .unwrap();
        let m = 0.5 * (a + b);
        if !(m > a && m < b) {
            break;
        }
        let (lv, le) = gk15(f, a, m);
        let (rv, re) = gk15(f, m, b);
        segs[idx] = (a, m, lv, le);
        segs.push((m, b, rv, re));
    }
    segs.iter().map(|s| s.2).sum()
}

/// Adaptive Gauss-Kronrod (7/15) integral of `f` over `[a, b]`, with extra
/// breakpoints (ignored when outside the interval).
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, breaks: &[f64], tol: f64) -> f64 {
    let mut pts: Vec<f64> = std::iter::once(a)
        .chain(breaks.iter().copied().filter(|&x| x > a && x < b))
        .chain(std::iter::once(b))
        .collect();
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    if pts.len() < 2 {
        return 0.0;
    }
    adaptive(&f, &pts, tol)
}

/// Breakpoints that grade the quadrature toward the end of the deadline
/// support, where the kernel can spike.
pub fn deadline_breaks(pair: &PairParameters) -> Vec<f64> {
    let end = pair.deadline_end();
    let mut out = vec![pair.s * end, pair.s * (end - DEADLINE_EPS)];
    let mode = (-pair.v / 2.0).exp();
    out.push(pair.s * (end - mode));
    for k in 0..=9 {
        out.push(pair.s * (end - 10f64.powi(-k)));
    }
    out
}

/// λ(t) summed term by term over the whole history.
pub fn direct_intensity(t: f64, pair: &PairParameters, history: &[f64]) -> f64 {
    let mut excitation = 0.0;
    if pair.components.excitation {
        for &x in history {
            if x < t {
                excitation += pair.alpha * pair.beta * (-pair.beta * (t - x)).exp();
            }
        }
    }
    base_rate(t, pair) + excitation
}

/// ∫₀ᵀ λ by quadrature, splitting at every event.
pub fn quadrature_compensator(times: &[f64], horizon: f64, pair: &PairParameters) -> f64 {
    let mut breaks = deadline_breaks(pair);
    breaks.extend_from_slice(times);
    integrate(|u| direct_intensity(u, pair, times), 0.0, horizon, &breaks, 1e-11)
}

/// Σ log λ(xτ) with the O(K²) direct excitation sum (floored as in the
/// model).
pub fn direct_log_sum(times: &[f64], pair: &PairParameters) -> f64 {
    times
        .iter()
        .map(|&x| direct_intensity(x, pair, times).max(sshp::intensity::LOG_FLOOR).ln())
        .sum()
}

/// Σ log λ − quadrature(∫λ).
pub fn quadrature_log_likelihood(times: &[f64], horizon: f64, pair: &PairParameters) -> f64 {
    direct_log_sum(times, pair) - quadrature_compensator(times, horizon, pair)
}

/// Kolmogorov-Smirnov statistic of `samples` against the unit exponential.
pub fn ks_unit_exponential(samples: &[f64]) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = 1.0 - (-x).exp();
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// A random parameter draw inside the constraint set, around the magnitudes
/// used for synthetic courses.
pub fn random_pair(rng: &mut impl Rng) -> PairParameters {
    let s = if rng.random_bool(0.5) { 1.0 } else { 24.0 };
    PairParameters {
        student: 0,
        assignment: 0,
        alpha: rng.random_range(0.0..0.9),
        beta: rng.random_range(0.5..3.0),
        s,
        p: rng.random_range(-12.0..12.0),
        c: rng.random_range(1.0..1.6),
        b: rng.random_range(0.05..0.95),
        v: rng.random_range(1.0..40.0),
        m: rng.random_range(-10.0..10.0),
        gamma_h: rng.random_range(0.0..1.0),
        gamma_o: rng.random_range(0.0..10.0),
        gamma_d: rng.random_range(0.0..25.0),
        deadline: rng.random_range(20.0..90.0),
        components: Components::all(),
    }
}

/// Sorted uniform event times on `[0, horizon]`, kept at least `gap`
/// (scaled units) away from the end of the deadline support so that finite
/// differences in `m` never straddle the support boundary.
pub fn random_times(rng: &mut impl Rng, k: usize, horizon: f64, pair: &PairParameters, gap: f64) -> Vec<f64> {
    let end_hours = pair.s * pair.deadline_end();
    let mut times: Vec<f64> = Vec::with_capacity(k);
    while times.len() < k {
        let t = rng.random_range(0.0..horizon);
        if (t - end_hours).abs() > gap * pair.s {
            times.push(t);
        }
    }
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Central finite difference of `f` at `x` with step `1e-5·max(1, |x|)`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-5 * x.abs().max(1.0);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Compares every analytic partial with a central finite difference
/// (relative 1e-4, absolute floor 1e-7).
pub fn gradient_check(pair: &PairParameters, times: &[f64], horizon: f64) -> Result<(), String> {
    let (_, g) = log_likelihood_with_gradient(times, horizon, pair).map_err(|e| e.to_string())?;
    let ll = |p: PairParameters| log_likelihood(times, horizon, &p).unwrap();
    let cases: [(&str, f64, f64, fn(&mut PairParameters, f64)); 9] = [
        ("alpha", g.alpha, pair.alpha, |p, x| p.alpha = x),
        ("m", g.m, pair.m, |p, x| p.m = x),
        ("gamma_h", g.gamma_h, pair.gamma_h, |p, x| p.gamma_h = x),
        ("gamma_o", g.gamma_o, pair.gamma_o, |p, x| p.gamma_o = x),
        ("gamma_d", g.gamma_d, pair.gamma_d, |p, x| p.gamma_d = x),
        ("c", g.c, pair.c, |p, x| p.c = x),
        ("p", g.p, pair.p, |p, x| p.p = x),
        ("b", g.b, pair.b, |p, x| p.b = x),
        ("v", g.v, pair.v, |p, x| p.v = x),
    ];
    for (name, analytic, at, set) in cases {
        let fd = central_difference(
            |x| {
                let mut q = *pair;
                set(&mut q, x);
                ll(q)
            },
            at,
        );
        let tol = 1e-4 * analytic.abs().max(fd.abs()).max(1e-3);
        if (analytic - fd).abs() > tol {
            return Err(format!("d/d{name}: analytic {analytic} vs finite difference {fd}"));
        }
    }
    Ok(())
}

/// Time-rescaled inter-arrival gaps ∫ λ between consecutive events (and from
/// 0 to the first), by quadrature of the direct intensity.
pub fn rescaled_gaps(times: &[f64], pair: &PairParameters) -> Vec<f64> {
    let mut breaks = deadline_breaks(pair);
    breaks.extend_from_slice(times);
    let mut prev = 0.0;
    times
        .iter()
        .map(|&x| {
            let gap = integrate(|u| direct_intensity(u, pair, times), prev, x, &breaks, 1e-11);
            prev = x;
            gap
        })
        .collect()
}

/// A pair with every component on, near the synthetic generating means.
pub fn typical_pair() -> PairParameters {
    PairParameters {
        student: 0,
        assignment: 0,
        alpha: 0.4,
        beta: 1.0,
        s: 1.0,
        p: 6.0,
        c: 1.2,
        b: 0.5,
        v: 20.0,
        m: 0.0,
        gamma_h: 0.5,
        gamma_o: 5.0,
        gamma_d: 15.0,
        deadline: 80.0,
        components: Components::all(),
    }
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Wraps a parameter store as a fitted model of `dataset` (no fit run).
pub fn as_model(store: &sshp::model::ParameterStore, dataset: &sshp::model::Dataset) -> sshp::inference::FittedModel {
    sshp::inference::FittedModel {
        students: dataset.students.clone(),
        assignments: dataset.assignments.iter().map(|a| a.assignment_id.clone()).collect(),
        parameters: store.clone(),
        hyper: sshp::model::HyperParams {
            s: store.s,
            beta: store.beta,
            ..Default::default()
        },
        components: Components::all(),
        ablated: String::new(),
        diagnostics: sshp::inference::FitDiagnostics {
            final_loss: 0.0,
            iterations: 0,
            loss_trace: vec![0.0],
            stage_starts: vec![0],
            converged: true,
            final_gamma: 1.0,
            wall_time_secs: 0.0,
        },
    }
}
