//! Clustering of fitted per-pair parameters and grade comparisons across
//! clusters.

mod kmeans;
mod stats;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use kmeans::{elbow_scan, kmeans, ElbowScan, KMeansResult};
pub use stats::{kruskal_wallis, KruskalWallis};

use crate::error::{Error, Result};
use crate::model::io::{create as create_csv, flush as flush_csv};
use crate::inference::FittedModel;
use crate::model::Dataset;

/// Feature order of [`PairFeature::values`].
pub const FEATURE_NAMES: [&str; 9] = ["alpha", "m", "gamma_d", "gamma_o", "gamma_h", "v", "b", "p", "c"];

/// Fitted parameters of one pair: matrix cells then the student's vector
/// entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFeature {
    pub student: usize,
    pub assignment: usize,
    pub values: [f64; 9],
}

/// Features of the observed pairs of `dataset` under `model`.
pub fn pair_features(model: &FittedModel, dataset: &Dataset) -> Result<Vec<PairFeature>> {
    let p = &model.parameters;
    if p.num_students() != dataset.num_students() || p.num_assignments() != dataset.num_assignments() {
        return Err(Error::Data("model grid does not match the dataset".into()));
    }
    let out: Vec<PairFeature> = dataset
        .observed()
        .map(|seq| {
            let (i, j) = seq.key();
            PairFeature {
                student: i,
                assignment: j,
                values: [
                    p.alpha[(i, j)],
                    p.m[(i, j)],
                    p.gamma_d[(i, j)],
                    p.gamma_o[(i, j)],
                    p.gamma_h[(i, j)],
                    p.v[i],
                    p.b[i],
                    p.p[i],
                    p.c[i],
                ],
            }
        })
        .collect();
    if let Some(f) = out.iter().find(|f| f.values.iter().any(|x| !x.is_finite())) {
        return Err(Error::Numerical(format!(
            "non-finite fitted parameter at pair {}",
            dataset.pair_label(f.student, f.assignment)
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeSummary {
    pub cluster: usize,
    pub n: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
    /// Centres in original units, features as in [`FEATURE_NAMES`].
    pub centroids: Vec<Vec<f64>>,
    pub loss: f64,
    pub grades: Vec<GradeSummary>,
    /// Per cluster and feature: normal 95% interval of the mean.
    pub feature_ci: Vec<Vec<(f64, f64)>>,
    pub elbow: Option<ElbowScan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: usize,
    pub b: usize,
    pub h: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeTest {
    pub group_sizes: Vec<usize>,
    /// Absent when fewer than two clusters carry grades.
    pub omnibus: Option<KruskalWallis>,
    pub pairwise: Vec<PairwiseTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Fixed cluster count; when absent the elbow of `k_range` is used.
    pub k: Option<usize>,
    pub k_range: Vec<usize>,
    pub restarts: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: None,
            k_range: (1..=8).collect(),
            restarts: 20,
        }
    }
}

fn median(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0),
    }
}

/// Clusters the observed pairs of `dataset` by their fitted parameters.
pub fn cluster_pairs(model: &FittedModel, dataset: &Dataset, config: &ClusterConfig, seed: u64) -> Result<ClusterReport> {
    let feats = pair_features(model, dataset)?;
    if feats.is_empty() {
        return Err(Error::Data("no observed pairs to cluster".into()));
    }
    let points: Vec<Vec<f64>> = feats.iter().map(|f| f.values.to_vec()).collect();
    let (k, elbow) = match config.k {
        Some(k) => (k, None),
        None => {
            let max_k = kmeans_distinct_limit(&points);
            let range: Vec<usize> = config.k_range.iter().copied().filter(|&k| k <= max_k).collect();
            let scan = elbow_scan(&points, &range, seed, config.restarts)?;
            (scan.suggested.unwrap_or(scan.ks[0]), Some(scan))
        }
    };
    let result = kmeans(&points, k, seed, config.restarts)?;

    let mut grades = Vec::with_capacity(k);
    let mut feature_ci = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<usize> = (0..feats.len()).filter(|&i| result.labels[i] == c).collect();
        let mut g: Vec<f64> = members
            .iter()
            .filter_map(|&i| dataset.grades.get(&(feats[i].student, feats[i].assignment)).copied())
            .collect();
        g.sort_by(f64::total_cmp);
        grades.push(GradeSummary {
            cluster: c,
            n: g.len(),
            mean: (!g.is_empty()).then(|| g.iter().sum::<f64>() / g.len() as f64),
            median: median(&g),
        });
        let n = members.len() as f64;
        feature_ci.push(
            (0..FEATURE_NAMES.len())
                .map(|d| {
                    let mean = members.iter().map(|&i| points[i][d]).sum::<f64>() / n;
                    let var = if members.len() > 1 {
                        members.iter().map(|&i| (points[i][d] - mean).powi(2)).sum::<f64>() / (n - 1.0)
                    } else {
                        0.0
                    };
                    let half = 1.96 * (var / n).sqrt();
                    (mean - half, mean + half)
                })
                .collect(),
        );
    }
    Ok(ClusterReport {
        k,
        pairs: feats.iter().map(|f| (f.student, f.assignment)).collect(),
        labels: result.labels,
        centroids: result.centroids,
        loss: result.loss,
        grades,
        feature_ci,
        elbow,
    })
}

fn kmeans_distinct_limit(points: &[Vec<f64>]) -> usize {
    let mut rows: Vec<Vec<u64>> = points.iter().map(|p| p.iter().map(|x| x.to_bits()).collect()).collect();
    rows.sort();
    rows.dedup();
    rows.len()
}

/// Kruskal-Wallis across clusters (omnibus and every pair of clusters),
/// using the grades of the clustered pairs.
pub fn grade_test(report: &ClusterReport, dataset: &Dataset) -> Result<GradeTest> {
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); report.k];
    for (&(i, j), &label) in report.pairs.iter().zip(&report.labels) {
        if let Some(&g) = dataset.grades.get(&(i, j)) {
            groups[label].push(g);
        }
    }
    let group_sizes = groups.iter().map(Vec::len).collect();
    let graded: Vec<(usize, &Vec<f64>)> = groups.iter().enumerate().filter(|(_, g)| !g.is_empty()).collect();
    let total: usize = graded.iter().map(|(_, g)| g.len()).sum();
    let omnibus = if graded.len() >= 2 && total >= 3 {
        Some(kruskal_wallis(&graded.iter().map(|(_, g)| (*g).clone()).collect::<Vec<_>>())?)
    } else {
        None
    };
    let mut pairwise = Vec::new();
    for (x, &(a, ga)) in graded.iter().enumerate() {
        for &(b, gb) in &graded[x + 1..] {
            if ga.len() + gb.len() < 3 {
                continue;
            }
            let t = kruskal_wallis(&[ga.clone(), gb.clone()])?;
            pairwise.push(PairwiseTest { a, b, h: t.h, p: t.p });
        }
    }
    Ok(GradeTest {
        group_sizes,
        omnibus,
        pairwise,
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Writes `clusters.csv`: one row per pair with its label.
pub fn write_clusters_csv(report: &ClusterReport, dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(["student_id", "assignment_id", "label"])?;
    for (&(i, j), label) in report.pairs.iter().zip(&report.labels) {
        w.write_record([
            dataset.students[i].as_str(),
            dataset.assignments[j].assignment_id.as_str(),
            &label.to_string(),
        ])?;
    }
    flush_csv(w, path)
}

/// Writes `centroids.csv`: original units followed by the display-scaled
/// columns (`m` in days, `alpha` and `b` times ten).
pub fn write_centroids_csv(report: &ClusterReport, s: f64, path: &Path) -> Result<()> {
    let mut w = create_csv(path)?;
    let mut header = vec!["cluster".to_string(), "size".to_string()];
    header.extend(FEATURE_NAMES.iter().map(|n| n.to_string()));
    header.extend(["alpha_x10", "m_days", "b_x10"].map(String::from));
    w.write_record(&header)?;
    for (c, centre) in report.centroids.iter().enumerate() {
        let size = report.labels.iter().filter(|&&l| l == c).count();
        let mut row = vec![c.to_string(), size.to_string()];
        row.extend(centre.iter().map(|x| x.to_string()));
        row.push((centre[0] * 10.0).to_string());
        row.push((centre[1] * s / 24.0).to_string());
        row.push((centre[6] * 10.0).to_string());
        w.write_record(&row)?;
    }
    flush_csv(w, path)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))?;
    Ok(())
}
