//! Filling of cells that carry no training events.
//!
//! Such cells only move through the nuclear-norm shrinkage during the fit,
//! which barely touches them. Soft-impute keeps the fitted cells fixed and
//! replaces the rest with a shrunken low-rank reconstruction, lowering the
//! threshold step by step from half the top singular value. Row and column
//! effects are removed first, so the threshold follows the interaction part
//! rather than the overall level of the matrix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::model::{Dataset, ParameterStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletionConfig {
    /// Final threshold as a fraction of the top singular value.
    pub final_fraction: f64,
    /// Threshold multiplier between continuation steps.
    pub decay: f64,
    /// Inner iterations per threshold.
    pub max_inner: usize,
    /// Remove the additive row and column effects of the known cells before
    /// the low-rank step.
    pub center: bool,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            final_fraction: 0.1,
            decay: 0.7,
            max_inner: 100,
            center: true,
        }
    }
}

/// Least-squares fit of `mu + row_i + col_j` to the known cells by
/// alternating updates. Rows or columns without known cells get 0.
fn additive_effects(mat: &DMatrix<f64>, known: &DMatrix<bool>) -> DMatrix<f64> {
    const SWEEPS: usize = 50;
    let (n, k) = mat.shape();
    let cells: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .filter(|&c| known[c])
        .collect();
    if cells.is_empty() {
        return DMatrix::zeros(n, k);
    }
    let mu = cells.iter().map(|&c| mat[c]).sum::<f64>() / cells.len() as f64;
    let (mut row, mut col) = (vec![0.0; n], vec![0.0; k]);
    for _ in 0..SWEEPS {
        let mut acc = vec![(0.0, 0usize); n];
        for &(i, j) in &cells {
            acc[i].0 += mat[(i, j)] - mu - col[j];
            acc[i].1 += 1;
        }
        for (r, (sum, cnt)) in row.iter_mut().zip(acc) {
            *r = if cnt > 0 { sum / cnt as f64 } else { 0.0 };
        }
        let mut acc = vec![(0.0, 0usize); k];
        for &(i, j) in &cells {
            acc[j].0 += mat[(i, j)] - mu - row[i];
            acc[j].1 += 1;
        }
        for (c, (sum, cnt)) in col.iter_mut().zip(acc) {
            *c = if cnt > 0 { sum / cnt as f64 } else { 0.0 };
        }
    }
    DMatrix::from_fn(n, k, |i, j| mu + row[i] + col[j])
}

/// Soft-impute of the cells where `known` is false; known cells are returned
/// unchanged.
pub fn soft_impute(mat: &DMatrix<f64>, known: &DMatrix<bool>, config: &CompletionConfig) -> DMatrix<f64> {
    assert_eq!(mat.shape(), known.shape());
    if known.iter().all(|&k| k) || mat.is_empty() {
        return mat.clone();
    }
    if config.center {
        let effects = additive_effects(mat, known);
        let inner = CompletionConfig {
            center: false,
            ..*config
        };
        return soft_impute(&(mat - &effects), known, &inner) + effects;
    }
    let top = mat.clone().svd(false, false).singular_values.max();
    if top <= 0.0 {
        return mat.clone();
    }
    let decay = config.decay.clamp(0.05, 0.95);
    let floor = config.final_fraction.max(0.0) * top;
    let mut z = mat.clone();
    let mut lam = 0.5 * top;
    loop {
        for _ in 0..config.max_inner {
            let mut svd = z.clone().svd(true, true);
            svd.singular_values.apply(|s| *s = (*s - lam).max(0.0));
            let low = svd.recompose().expect("both factors were computed");
            let next = DMatrix::from_fn(mat.nrows(), mat.ncols(), |i, j| {
                if known[(i, j)] {
                    mat[(i, j)]
                } else {
                    low[(i, j)]
                }
            });
            let change = (&next - &z).norm();
            z = next;
            if change < 1e-9 * top {
                break;
            }
        }
        if lam <= floor {
            break;
        }
        lam = (lam * decay).max(floor);
    }
    z
}

/// Completes every pair matrix of `store` over the cells without training
/// events in `train`.
pub fn complete_unobserved(train: &Dataset, store: &mut ParameterStore, config: &CompletionConfig) {
    let (n, k) = (store.num_students(), store.num_assignments());
    let mut known = DMatrix::from_element(n, k, false);
    for seq in train.observed() {
        known[(seq.student, seq.assignment)] = true;
    }
    for (mat, nonneg) in [
        (&mut store.alpha, true),
        (&mut store.m, false),
        (&mut store.gamma_h, true),
        (&mut store.gamma_o, true),
        (&mut store.gamma_d, true),
    ] {
        let mut filled = soft_impute(mat, &known, config);
        if nonneg {
            filled.apply(|x| *x = x.max(0.0));
        }
        *mat = filled;
    }
}
