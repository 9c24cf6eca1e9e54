//! Domain types shared by every stage of the pipeline: schedules, event
//! sequences, datasets, the parameter store and its per-pair view.

mod init;
pub(crate) mod io;
mod split;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use init::{init_parameters, InitConfig, InitRange};
pub use io::{load_dataset, read_sequences, write_dataset, write_sequences};
pub use split::{split_dataset, SplitConfig, SplitDataset};

/// Lower bound applied to `v` and to `b` (and `1 - b`) by the projections.
pub const OPEN_INTERVAL_EPS: f64 = 1e-6;

/// One assignment of the course.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentSchedule {
    pub assignment_id: String,
    /// Hours from course start.
    pub open_time: f64,
    /// Deadline in scaled units (hours / s) from course start.
    pub deadline: f64,
    #[serde(default)]
    pub label: Option<String>,
}

impl AssignmentSchedule {
    /// Deadline in scaled units measured on the pair clock, which starts at
    /// the assignment opening.
    pub fn relative_deadline(&self, s: f64) -> f64 {
        self.deadline - self.open_time / s
    }
}

/// Activity timestamps of one student-assignment pair.
///
/// `timestamps` are hours from course start, strictly increasing and inside
/// `[window_start, window_end]`. The intensity model works on the pair clock
/// (`t - window_start`), see [`EventSequence::relative_times`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub student: usize,
    pub assignment: usize,
    pub timestamps: Vec<f64>,
    pub window_start: f64,
    pub window_end: f64,
}

impl EventSequence {
    pub fn new(
        student: usize,
        assignment: usize,
        timestamps: Vec<f64>,
        window_start: f64,
        window_end: f64,
    ) -> Result<Self> {
        if !(window_end > window_start) {
            return Err(Error::Data(format!(
                "pair ({student}, {assignment}): empty observation window [{window_start}, {window_end}]"
            )));
        }
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Data(format!(
                "pair ({student}, {assignment}): timestamps are not strictly increasing"
            )));
        }
        if let (Some(&first), Some(&last)) = (timestamps.first(), timestamps.last()) {
            if first < window_start || last > window_end {
                return Err(Error::Data(format!(
                    "pair ({student}, {assignment}): timestamps outside window [{window_start}, {window_end}]"
                )));
            }
        }
        Ok(Self {
            student,
            assignment,
            timestamps,
            window_start,
            window_end,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Observation horizon `T` on the pair clock.
    pub fn horizon(&self) -> f64 {
        self.window_end - self.window_start
    }

    pub fn relative_times(&self) -> Vec<f64> {
        self.timestamps.iter().map(|t| t - self.window_start).collect()
    }

    pub fn key(&self) -> (usize, usize) {
        (self.student, self.assignment)
    }
}

/// A course: students, assignments, the sparse grid of observed sequences
/// and optional grades.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub students: Vec<String>,
    pub assignments: Vec<AssignmentSchedule>,
    /// Keyed by (student index, assignment index). Absent cells are
    /// unobserved pairs.
    pub sequences: BTreeMap<(usize, usize), EventSequence>,
    pub grades: BTreeMap<(usize, usize), f64>,
    /// Course end in hours; every pair window ends here.
    pub course_end: f64,
}

impl Dataset {
    pub fn num_students(&self) -> usize {
        self.students.len()
    }

    pub fn num_assignments(&self) -> usize {
        self.assignments.len()
    }

    /// Pairs with at least one event (the observed set).
    pub fn observed(&self) -> impl Iterator<Item = &EventSequence> {
        self.sequences.values().filter(|s| !s.is_empty())
    }

    pub fn pair_label(&self, student: usize, assignment: usize) -> String {
        format!(
            "({}, {})",
            self.students[student], self.assignments[assignment].assignment_id
        )
    }

    /// An empty sequence spanning the pair window, used for pairs with no
    /// history.
    pub fn empty_sequence(&self, student: usize, assignment: usize) -> EventSequence {
        EventSequence {
            student,
            assignment,
            timestamps: Vec::new(),
            window_start: self.assignments[assignment].open_time,
            window_end: self.course_end,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.students.is_empty() || self.assignments.is_empty() {
            return Err(Error::Data("dataset needs at least one student and one assignment".into()));
        }
        for ((i, j), seq) in &self.sequences {
            if *i >= self.students.len() || *j >= self.assignments.len() {
                return Err(Error::Data(format!("sequence references unknown pair ({i}, {j})")));
            }
            if seq.student != *i || seq.assignment != *j {
                return Err(Error::Data(format!("sequence keyed ({i}, {j}) carries a different pair")));
            }
        }
        Ok(())
    }
}

/// Which terms of the intensity are active. Switching one off gives the
/// ablated model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub excitation: bool,
    pub opening: bool,
    pub habit: bool,
    pub deadline: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self::all()
    }
}

impl Components {
    pub const fn all() -> Self {
        Self {
            excitation: true,
            opening: true,
            habit: true,
            deadline: true,
        }
    }

    pub const fn none() -> Self {
        Self {
            excitation: false,
            opening: false,
            habit: false,
            deadline: false,
        }
    }

    /// Parses an ablation list such as `"d"` or `"s,o"`: each letter removes
    /// one term (`s` self-excitation, `o` opening, `h` habit, `d` deadline).
    pub fn ablate(spec: &str) -> Result<Self> {
        let mut c = Self::all();
        for tok in spec.split(|ch: char| ch == ',' || ch.is_whitespace()).filter(|t| !t.is_empty()) {
            for ch in tok.chars() {
                match ch {
                    's' => c.excitation = false,
                    'o' => c.opening = false,
                    'h' => c.habit = false,
                    'd' => c.deadline = false,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "unknown ablation component '{other}' (expected s, o, h or d)"
                        )))
                    }
                }
            }
        }
        Ok(c)
    }

    pub fn ablated(&self) -> String {
        let mut out = String::new();
        for (on, ch) in [
            (self.excitation, 's'),
            (self.opening, 'o'),
            (self.habit, 'h'),
            (self.deadline, 'd'),
        ] {
            if !on {
                out.push(ch);
            }
        }
        out
    }
}

/// Optimizer, model-scale and prediction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Excitation decay, shared by every pair.
    pub beta: f64,
    /// Time scale in hours; also the habit period.
    pub s: f64,
    /// Initial step-size parameter (steps are `gradient / gamma`).
    pub gamma0: f64,
    /// Backtracking growth factor for `gamma`.
    pub eta: f64,
    /// Trace-norm penalty.
    pub rho: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Monte Carlo trials per predicted arrival.
    pub n_trials: usize,
    /// Number of future arrivals predicted per pair.
    pub z_max: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            beta: 1.0,
            s: 24.0,
            gamma0: 100.0,
            eta: 2.0,
            rho: 1.0,
            max_iter: 2000,
            tol: 1e-5,
            n_trials: 1000,
            z_max: 10,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta", self.beta),
            ("s", self.s),
            ("gamma0", self.gamma0),
            ("tol", self.tol),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {value}")));
            }
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::InvalidArgument(format!("rho must be non-negative, got {}", self.rho)));
        }
        if !(self.eta > 1.0) {
            return Err(Error::InvalidArgument(format!("eta must exceed 1, got {}", self.eta)));
        }
        if self.max_iter == 0 || self.n_trials == 0 || self.z_max == 0 {
            return Err(Error::InvalidArgument(
                "max_iter, n_trials and z_max must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Global scalars, per-student vectors and student x assignment matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    pub beta: f64,
    pub s: f64,
    pub c: DVector<f64>,
    pub p: DVector<f64>,
    pub b: DVector<f64>,
    pub v: DVector<f64>,
    pub alpha: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub gamma_h: DMatrix<f64>,
    pub gamma_o: DMatrix<f64>,
    pub gamma_d: DMatrix<f64>,
}

/// Learnable vector symbols, in storage order.
pub const VECTOR_SYMBOLS: [&str; 4] = ["c", "p", "b", "v"];
/// Learnable matrix symbols, in storage order.
pub const MATRIX_SYMBOLS: [&str; 5] = ["alpha", "m", "gamma_h", "gamma_o", "gamma_d"];

impl ParameterStore {
    pub fn zeros(students: usize, assignments: usize, beta: f64, s: f64) -> Self {
        let mat = || DMatrix::zeros(students, assignments);
        let vec = || DVector::zeros(students);
        Self {
            beta,
            s,
            c: vec(),
            p: vec(),
            b: vec(),
            v: vec(),
            alpha: mat(),
            m: mat(),
            gamma_h: mat(),
            gamma_o: mat(),
            gamma_d: mat(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.num_students(), self.num_assignments(), self.beta, self.s)
    }

    pub fn num_students(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn num_assignments(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn vectors(&self) -> [&DVector<f64>; 4] {
        [&self.c, &self.p, &self.b, &self.v]
    }

    pub fn vectors_mut(&mut self) -> [&mut DVector<f64>; 4] {
        [&mut self.c, &mut self.p, &mut self.b, &mut self.v]
    }

    pub fn matrices(&self) -> [&DMatrix<f64>; 5] {
        [&self.alpha, &self.m, &self.gamma_h, &self.gamma_o, &self.gamma_d]
    }

    pub fn matrices_mut(&mut self) -> [&mut DMatrix<f64>; 5] {
        [
            &mut self.alpha,
            &mut self.m,
            &mut self.gamma_h,
            &mut self.gamma_o,
            &mut self.gamma_d,
        ]
    }

    /// All learnable entries as flat slices (vectors first, then matrices in
    /// column-major storage order).
    pub(crate) fn slices(&self) -> [&[f64]; 9] {
        [
            self.c.as_slice(),
            self.p.as_slice(),
            self.b.as_slice(),
            self.v.as_slice(),
            self.alpha.as_slice(),
            self.m.as_slice(),
            self.gamma_h.as_slice(),
            self.gamma_o.as_slice(),
            self.gamma_d.as_slice(),
        ]
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.c.as_mut_slice(),
            self.p.as_mut_slice(),
            self.b.as_mut_slice(),
            self.v.as_mut_slice(),
            self.alpha.as_mut_slice(),
            self.m.as_mut_slice(),
            self.gamma_h.as_mut_slice(),
            self.gamma_o.as_mut_slice(),
            self.gamma_d.as_mut_slice(),
        ]
    }

    /// Checks shapes and every element constraint of the constrained
    /// objective (`A, Γ >= 0`, `c >= 1`, `v > 0`, `0 < b < 1`).
    pub fn check_constraints(&self) -> Result<()> {
        let (u, n) = (self.num_students(), self.num_assignments());
        if u == 0 || n == 0 {
            return Err(Error::InvalidArgument("parameter store is empty".into()));
        }
        for (name, mat) in MATRIX_SYMBOLS.iter().zip(self.matrices()) {
            if mat.shape() != (u, n) {
                return Err(Error::InvalidArgument(format!("matrix {name} has shape {:?}", mat.shape())));
            }
            if mat.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("matrix {name} has non-finite entries")));
            }
            if *name != "m" && mat.iter().any(|&x| x < 0.0) {
                return Err(Error::InvalidArgument(format!("matrix {name} has negative entries")));
            }
        }
        for (name, vec) in VECTOR_SYMBOLS.iter().zip(self.vectors()) {
            if vec.len() != u {
                return Err(Error::InvalidArgument(format!("vector {name} has length {}", vec.len())));
            }
            if vec.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("vector {name} has non-finite entries")));
            }
        }
        if self.c.iter().any(|&c| c < 1.0) {
            return Err(Error::InvalidArgument("c must be >= 1".into()));
        }
        if self.v.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument("v must be > 0".into()));
        }
        if self.b.iter().any(|&b| b <= 0.0 || b >= 1.0) {
            return Err(Error::InvalidArgument("b must lie in (0, 1)".into()));
        }
        if !(self.beta > 0.0) || !(self.s > 0.0) {
            return Err(Error::InvalidArgument("beta and s must be positive".into()));
        }
        Ok(())
    }

    /// Resolves the parameters of pair (i, j).
    pub fn pair(
        &self,
        student: usize,
        assignment: usize,
        schedule: &AssignmentSchedule,
        components: Components,
    ) -> PairParameters {
        PairParameters {
            student,
            assignment,
            alpha: self.alpha[(student, assignment)],
            beta: self.beta,
            s: self.s,
            p: self.p[student],
            c: self.c[student],
            b: self.b[student],
            v: self.v[student],
            m: self.m[(student, assignment)],
            gamma_h: self.gamma_h[(student, assignment)],
            gamma_o: self.gamma_o[(student, assignment)],
            gamma_d: self.gamma_d[(student, assignment)],
            deadline: schedule.relative_deadline(self.s),
            components,
        }
    }

    /// Zeroes the weight matrices of switched-off components.
    pub fn apply_components(&mut self, components: Components) {
        if !components.excitation {
            self.alpha.fill(0.0);
        }
        if !components.opening {
            self.gamma_o.fill(0.0);
        }
        if !components.habit {
            self.gamma_h.fill(0.0);
        }
        if !components.deadline {
            self.gamma_d.fill(0.0);
        }
    }
}

/// JSON form: scalars, vectors, and matrices as row-major nested arrays.
#[derive(Serialize, Deserialize)]
struct ParameterStoreRepr {
    beta: f64,
    s: f64,
    c: Vec<f64>,
    p: Vec<f64>,
    b: Vec<f64>,
    v: Vec<f64>,
    alpha: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    gamma_h: Vec<Vec<f64>>,
    gamma_o: Vec<Vec<f64>>,
    gamma_d: Vec<Vec<f64>>,
}

fn rows(mat: &DMatrix<f64>) -> Vec<Vec<f64>> {
    mat.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(name: &str, rows: &[Vec<f64>]) -> std::result::Result<DMatrix<f64>, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("matrix {name} is ragged"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl Serialize for ParameterStore {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        ParameterStoreRepr {
            beta: self.beta,
            s: self.s,
            c: self.c.iter().copied().collect(),
            p: self.p.iter().copied().collect(),
            b: self.b.iter().copied().collect(),
            v: self.v.iter().copied().collect(),
            alpha: rows(&self.alpha),
            m: rows(&self.m),
            gamma_h: rows(&self.gamma_h),
            gamma_o: rows(&self.gamma_o),
            gamma_d: rows(&self.gamma_d),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ParameterStore {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let r = ParameterStoreRepr::deserialize(deserializer)?;
        let mat = |name: &str, rows: &[Vec<f64>]| from_rows(name, rows).map_err(serde::de::Error::custom);
        let store = ParameterStore {
            beta: r.beta,
            s: r.s,
            c: DVector::from_vec(r.c),
            p: DVector::from_vec(r.p),
            b: DVector::from_vec(r.b),
            v: DVector::from_vec(r.v),
            alpha: mat("alpha", &r.alpha)?,
            m: mat("m", &r.m)?,
            gamma_h: mat("gamma_h", &r.gamma_h)?,
            gamma_o: mat("gamma_o", &r.gamma_o)?,
            gamma_d: mat("gamma_d", &r.gamma_d)?,
        };
        let shape = store.alpha.shape();
        if store.matrices().iter().any(|m| m.shape() != shape)
            || store.vectors().iter().any(|v| v.len() != shape.0)
        {
            return Err(serde::de::Error::custom("parameter shapes disagree"));
        }
        Ok(store)
    }
}

/// Parameters of a single student-assignment pair, on the pair clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairParameters {
    pub student: usize,
    pub assignment: usize,
    pub alpha: f64,
    pub beta: f64,
    pub s: f64,
    pub p: f64,
    pub c: f64,
    pub b: f64,
    pub v: f64,
    pub m: f64,
    pub gamma_h: f64,
    pub gamma_o: f64,
    pub gamma_d: f64,
    /// Deadline `d` in scaled units on the pair clock.
    pub deadline: f64,
    pub components: Components,
}

impl PairParameters {
    /// `d - m`: the scaled time at which the deadline stimulus ends.
    pub fn deadline_end(&self) -> f64 {
        self.deadline - self.m
    }
}
