use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ParameterStore, OPEN_INTERVAL_EPS};
use crate::error::{Error, Result};

/// Closed interval an initial value is drawn from, uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitRange {
    pub lo: f64,
    pub hi: f64,
}

impl InitRange {
    /// `center` jittered by +-`frac` (relative).
    pub fn jitter(center: f64, frac: f64) -> Self {
        let d = (center * frac).abs();
        Self {
            lo: center - d,
            hi: center + d,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

/// Initial value ranges for every learnable symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub alpha: InitRange,
    pub m: InitRange,
    pub gamma_h: InitRange,
    pub gamma_o: InitRange,
    pub gamma_d: InitRange,
    pub c: InitRange,
    pub p: InitRange,
    pub b: InitRange,
    pub v: InitRange,
}

impl Default for InitConfig {
    fn default() -> Self {
        let j = |x| InitRange::jitter(x, 0.1);
        Self {
            alpha: j(0.1),
            m: j(0.0),
            gamma_h: j(0.5),
            gamma_o: j(1.0),
            gamma_d: j(1.0),
            // 1.1 +- 10% reaches below the c >= 1 bound; the lower end is cut there.
            c: InitRange { lo: 1.0, hi: 1.21 },
            p: j(0.0),
            b: j(0.5),
            v: j(10.0),
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha", self.alpha),
            ("m", self.m),
            ("gamma_h", self.gamma_h),
            ("gamma_o", self.gamma_o),
            ("gamma_d", self.gamma_d),
            ("c", self.c),
            ("p", self.p),
            ("b", self.b),
            ("v", self.v),
        ];
        for (name, r) in all {
            if !r.lo.is_finite() || !r.hi.is_finite() || r.lo > r.hi {
                return Err(Error::InvalidArgument(format!(
                    "init range for {name} is not a finite interval: [{}, {}]",
                    r.lo, r.hi
                )));
            }
        }
        let violation = |name: &str, r: InitRange, what: &str| {
            Err(Error::InvalidArgument(format!(
                "init range for {name} [{}, {}] violates {what}",
                r.lo, r.hi
            )))
        };
        for (name, r) in [
            ("alpha", self.alpha),
            ("gamma_h", self.gamma_h),
            ("gamma_o", self.gamma_o),
            ("gamma_d", self.gamma_d),
        ] {
            if r.lo < 0.0 {
                return violation(name, r, "non-negativity");
            }
        }
        if self.c.lo < 1.0 {
            return violation("c", self.c, "c >= 1");
        }
        if self.v.lo < OPEN_INTERVAL_EPS {
            return violation("v", self.v, "v > 0");
        }
        if self.b.lo < OPEN_INTERVAL_EPS || self.b.hi > 1.0 - OPEN_INTERVAL_EPS {
            return violation("b", self.b, "0 < b < 1");
        }
        Ok(())
    }
}

/// Draws an initial parameter store for a `students x assignments` grid.
pub fn init_parameters(
    students: usize,
    assignments: usize,
    beta: f64,
    s: f64,
    seed: u64,
    config: &InitConfig,
) -> Result<ParameterStore> {
    if students == 0 || assignments == 0 {
        return Err(Error::InvalidArgument("grid must have at least one student and one assignment".into()));
    }
    if !(beta > 0.0 && s > 0.0) {
        return Err(Error::InvalidArgument("beta and s must be positive".into()));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vector = |r: InitRange| DVector::from_fn(students, |_, _| r.sample(&mut rng));
    let (c, p, b, v) = (vector(config.c), vector(config.p), vector(config.b), vector(config.v));
    let mut matrix = |r: InitRange| DMatrix::from_fn(students, assignments, |_, _| r.sample(&mut rng));
    let store = ParameterStore {
        beta,
        s,
        c,
        p,
        b,
        v,
        alpha: matrix(config.alpha),
        m: matrix(config.m),
        gamma_h: matrix(config.gamma_h),
        gamma_o: matrix(config.gamma_o),
        gamma_d: matrix(config.gamma_d),
    };
    store.check_constraints()?;
    Ok(store)
}
