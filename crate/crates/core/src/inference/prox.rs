//! Projections used by the proximal steps.

use nalgebra::{DMatrix, DVector};

use crate::model::{ParameterStore, OPEN_INTERVAL_EPS};

/// Closed interval used to clamp a vector symbol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const C: Bounds = Bounds {
        lo: 1.0,
        hi: f64::INFINITY,
    };
    pub const V: Bounds = Bounds {
        lo: OPEN_INTERVAL_EPS,
        hi: f64::INFINITY,
    };
    pub const B: Bounds = Bounds {
        lo: OPEN_INTERVAL_EPS,
        hi: 1.0 - OPEN_INTERVAL_EPS,
    };
    pub const FREE: Bounds = Bounds {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    /// Bounds for the vector symbols in storage order (c, p, b, v).
    pub const VECTORS: [Bounds; 4] = [Self::C, Self::FREE, Self::B, Self::V];

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }
}

/// Singular-value soft-thresholding by `rho`, then (optionally) clamping
/// negative entries to zero.
pub fn prox_matrix(mat: &DMatrix<f64>, rho: f64, clamp_nonneg: bool) -> DMatrix<f64> {
    assert!(rho >= 0.0, "threshold must be non-negative");
    let mut out = if rho == 0.0 {
        mat.clone()
    } else {
        let mut svd = mat.clone().svd(true, true);
        svd.singular_values.apply(|s| *s = (*s - rho).max(0.0));
        if svd.singular_values.iter().all(|&s| s == 0.0) {
            DMatrix::zeros(mat.nrows(), mat.ncols())
        } else {
            svd.recompose().expect("both factors were computed")
        }
    };
    if clamp_nonneg {
        out.apply(|x| *x = x.max(0.0));
    }
    out
}

/// Elementwise clamp to `bounds`.
pub fn prox_vector(vec: &DVector<f64>, bounds: Bounds) -> DVector<f64> {
    vec.map(|x| bounds.clamp(x))
}

/// Clamps every symbol of `store` into its box (non-negativity for
/// A and Γ, intervals for the vectors). No singular-value shrinkage.
pub(crate) fn clamp_store(store: &mut ParameterStore) {
    for (vec, bounds) in store.vectors_mut().into_iter().zip(Bounds::VECTORS) {
        vec.apply(|x| *x = bounds.clamp(*x));
    }
    for (idx, mat) in store.matrices_mut().into_iter().enumerate() {
        if idx != 1 {
            mat.apply(|x| *x = x.max(0.0));
        }
    }
}

/// Full projection of a store: trace-norm shrinkage of each matrix by its
/// threshold (storage order alpha, m, gamma_h, gamma_o, gamma_d; non-negativity
/// for all but `M`), clamps for the vectors.
pub(crate) fn project_store(store: &ParameterStore, thresholds: [f64; 5]) -> ParameterStore {
    let mut out = store.clone();
    for (idx, (mat, rho)) in out.matrices_mut().into_iter().zip(thresholds).enumerate() {
        *mat = prox_matrix(mat, rho, idx != 1);
    }
    for (vec, bounds) in out.vectors_mut().into_iter().zip(Bounds::VECTORS) {
        *vec = prox_vector(vec, bounds);
    }
    out
}
