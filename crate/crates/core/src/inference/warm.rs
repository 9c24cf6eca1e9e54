//! Per-pair discrete search for the deadline lag before the joint fit.
//!
//! The likelihood in `m` has a narrow peak where the end of the deadline
//! support sits just after the pair's closing burst, and many small local
//! maxima elsewhere, so gradient steps from an arbitrary start rarely reach
//! it. Candidate lags put the support end a short distance after each event;
//! each is scored jointly with a few deadline weights, other parameters held
//! at their current values.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::intensity::log_likelihood;
use crate::model::{Components, Dataset, ParameterStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmStartConfig {
    pub enabled: bool,
    /// Gaps (scaled units) between an event and a candidate support end.
    pub gaps: Vec<f64>,
    /// Deadline weights tried with each candidate lag.
    pub gamma_d: Vec<f64>,
    /// Deadline shapes tried with each candidate lag (ascending); each
    /// student keeps the median of its pairs' preferred shapes. Empty keeps `v`.
    pub v: Vec<f64>,
    /// Largest move of `m` from its current value (scaled units).
    pub max_shift: f64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            gaps: vec![0.05, 0.2, 0.5],
            gamma_d: vec![0.5, 1.0, 2.0, 5.0, 10.0, 20.0],
            v: vec![2.0, 5.0, 10.0, 20.0, 40.0],
            max_shift: 15.0,
        }
    }
}

/// Returns `store` with `m` and `gamma_d` of every observed pair set to the
/// best candidate (kept as is when nothing beats the current values).
pub fn warm_start(
    train: &Dataset,
    store: &ParameterStore,
    components: Components,
    config: &WarmStartConfig,
) -> Result<ParameterStore> {
    let mut out = store.clone();
    if !config.enabled || !components.deadline {
        return Ok(out);
    }
    let shapes: Vec<Option<f64>> = if config.v.is_empty() {
        vec![None]
    } else {
        config.v.iter().copied().map(Some).collect()
    };
    let seqs: Vec<_> = train.observed().collect();
    // per pair and shape: (log-likelihood, m, gamma_d) of the best candidate
    let picks: Vec<Result<Vec<(f64, f64, f64)>>> = seqs
        .par_iter()
        .map(|seq| {
            let schedule = &train.assignments[seq.assignment];
            let base = store.pair(seq.student, seq.assignment, schedule, components);
            let times = seq.relative_times();
            let horizon = seq.horizon();
            shapes
                .iter()
                .map(|shape| {
                    let mut start = base;
                    if let Some(v) = *shape {
                        start.v = v;
                    }
                    let mut best = (log_likelihood(&times, horizon, &start)?, start.m, start.gamma_d);
                    for &x in &times {
                        for &gap in &config.gaps {
                            let m = base.deadline - x / base.s - gap;
                            if (m - base.m).abs() > config.max_shift {
                                continue;
                            }
                            for &gd in &config.gamma_d {
                                let mut trial = start;
                                trial.m = m;
                                trial.gamma_d = gd;
                                let ll = log_likelihood(&times, horizon, &trial)?;
                                if ll > best.0 {
                                    best = (ll, m, gd);
                                }
                            }
                        }
                    }
                    Ok(best)
                })
                .collect()
        })
        .collect();
    let picks = picks.into_iter().collect::<Result<Vec<_>>>()?;

    // each student keeps the median of its pairs' preferred shapes
    let mut preferred: Vec<Vec<usize>> = vec![Vec::new(); store.num_students()];
    for (seq, pick) in seqs.iter().zip(&picks) {
        let k = pick
            .iter()
            .enumerate()
            .fold(0, |best, (k, p)| if p.0 > pick[best].0 { k } else { best });
        preferred[seq.student].push(k);
    }
    let chosen: Vec<usize> = preferred
        .into_iter()
        .map(|mut ks| {
            ks.sort_unstable();
            ks.get(ks.len() / 2).copied().unwrap_or(0)
        })
        .collect();
    for (seq, pick) in seqs.iter().zip(&picks) {
        let k = chosen[seq.student];
        let (_, m, gd) = pick[k];
        out.m[(seq.student, seq.assignment)] = m;
        out.gamma_d[(seq.student, seq.assignment)] = gd;
        if let Some(v) = shapes[k] {
            out.v[seq.student] = v;
        }
    }
    Ok(out)
}
