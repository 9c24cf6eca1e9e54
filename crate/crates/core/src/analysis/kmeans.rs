use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_LLOYD_ITERS: usize = 300;

/// Best-of-restarts k-means on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub k: usize,
    pub labels: Vec<usize>,
    /// Cluster centres in the original feature units.
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares of the chosen run (standardized units).
    pub loss: f64,
    /// Loss of every restart, in restart order.
    pub restart_losses: Vec<f64>,
}

/// Per-dimension mean and standard deviation (population). Constant
/// dimensions get a unit scale so they standardize to zero.
pub(crate) struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub(crate) fn fit(points: &[Vec<f64>]) -> Self {
        let n = points.len() as f64;
        let dim = points[0].len();
        let mean: Vec<f64> = (0..dim).map(|d| points.iter().map(|p| p[d]).sum::<f64>() / n).collect();
        let scale = (0..dim)
            .map(|d| {
                let var = points.iter().map(|p| (p[d] - mean[d]).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 1e-12 * (1.0 + mean[d].abs()) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub(crate) fn apply(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub(crate) fn invert(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| x * s + m).collect()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centres: &[Vec<f64>]) -> (usize, f64) {
    centres
        .iter()
        .enumerate()
        .map(|(c, centre)| (c, dist2(p, centre)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn seed_centres(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centres = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centres.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, centres.last().unwrap()));
        }
    }
    centres
}

/// One Lloyd run; returns labels, centres and loss.
fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<Vec<f64>>, f64) {
    let dim = points[0].len();
    let mut centres = seed_centres(points, k, rng);
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(points) {
            let (c, _) = nearest(p, &centres);
            if *l != c {
                *l = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // move an empty centre onto the worst-served point
                let far = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, dist2(p, &centres[labels[i]])))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
                    .0;
                centres[c] = points[far].clone();
                labels[far] = c;
            }
        }
    }
    for (l, p) in labels.iter_mut().zip(points) {
        *l = nearest(p, &centres).0;
    }
    let loss = labels.iter().zip(points).map(|(&l, p)| dist2(p, &centres[l])).sum();
    (labels, centres, loss)
}

fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut sorted: Vec<&Vec<f64>> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    sorted.dedup();
    sorted.len()
}

/// Clusters `features` into `k` groups.
///
/// Features are standardized per dimension first. Each restart uses
/// k-means++ seeding from its own stream under `seed`; the lowest loss wins,
/// ties going to the earlier restart.
pub fn kmeans(features: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    if k == 0 || restarts == 0 {
        return Err(Error::InvalidArgument("k and restarts must be at least 1".into()));
    }
    let dim = features.first().map_or(0, Vec::len);
    if dim == 0 || features.iter().any(|f| f.len() != dim || f.iter().any(|x| !x.is_finite())) {
        return Err(Error::Data("features must be nonempty, finite and of equal dimension".into()));
    }
    let distinct = count_distinct(features);
    if distinct < k {
        return Err(Error::Data(format!("{distinct} distinct points cannot form {k} clusters")));
    }
    let std = Standardizer::fit(features);
    let points: Vec<Vec<f64>> = features.iter().map(|f| std.apply(f)).collect();

    let runs: Vec<(Vec<usize>, Vec<Vec<f64>>, f64)> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            lloyd(&points, k, &mut rng)
        })
        .collect();
    let restart_losses: Vec<f64> = runs.iter().map(|r| r.2).collect();
    let best = (0..restarts)
        .min_by(|&a, &b| restart_losses[a].total_cmp(&restart_losses[b]).then(a.cmp(&b)))
        .expect("at least one restart");
    let (labels, centres, loss) = runs.into_iter().nth(best).expect("index in range");
    Ok(KMeansResult {
        k,
        labels,
        centroids: centres.iter().map(|c| std.invert(c)).collect(),
        loss,
        restart_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowScan {
    pub ks: Vec<usize>,
    pub losses: Vec<f64>,
    /// Interior k of largest discrete curvature; `None` without an interior
    /// point.
    pub suggested: Option<usize>,
}

/// Runs [`kmeans`] for each k of `k_range` (ascending) and picks the elbow.
pub fn elbow_scan(features: &[Vec<f64>], k_range: &[usize], seed: u64, restarts: usize) -> Result<ElbowScan> {
    if k_range.is_empty() || k_range.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("k range must be nonempty and strictly ascending".into()));
    }
    let losses = k_range
        .iter()
        .map(|&k| kmeans(features, k, seed, restarts).map(|r| r.loss))
        .collect::<Result<Vec<_>>>()?;
    let suggested = (1..losses.len().saturating_sub(1))
        .map(|t| (t, losses[t - 1] - 2.0 * losses[t] + losses[t + 1]))
        .fold(None, |best: Option<(usize, f64)>, cur| match best {
            Some(b) if b.1 >= cur.1 => Some(b),
            _ => Some(cur),
        })
        .map(|(t, _)| k_range[t]);
    Ok(ElbowScan {
        ks: k_range.to_vec(),
        losses,
        suggested,
    })
}
