use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub p: f64,
    pub df: usize,
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank. Also
/// returns `Σ (t³ − t)` over tie groups.
fn average_ranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        let t = (end - start) as f64;
        ties += t * t * t - t;
        start = end;
    }
    (ranks, ties)
}

/// Kruskal-Wallis H test with tie correction; `p` is the chi-squared
/// survival at `H` with `groups − 1` degrees of freedom. When every value is
/// tied, `H = 0` and `p = 1`.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalWallis> {
    if groups.len() < 2 {
        return Err(Error::InvalidArgument("need at least two groups".into()));
    }
    if let Some(g) = groups.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("group {g} is empty")));
    }
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    if all.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("grades must be finite".into()));
    }
    let n = all.len() as f64;
    if all.len() < 3 {
        return Err(Error::InvalidArgument("need at least three observations".into()));
    }
    let df = groups.len() - 1;
    let (ranks, ties) = average_ranks(&all);
    let correction = 1.0 - ties / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(KruskalWallis { h: 0.0, p: 1.0, df });
    }
    let mean_rank = (n + 1.0) / 2.0;
    let mut offset = 0;
    let mut sum = 0.0;
    for g in groups {
        let r = &ranks[offset..offset + g.len()];
        let mean = r.iter().sum::<f64>() / g.len() as f64;
        sum += g.len() as f64 * (mean - mean_rank).powi(2);
        offset += g.len();
    }
    let h = 12.0 / (n * (n + 1.0)) * sum / correction;
    let p = if h > 0.0 { gamma_ur(df as f64 / 2.0, h / 2.0) } else { 1.0 };
    Ok(KruskalWallis { h, p, df })
}
