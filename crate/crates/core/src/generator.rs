//! Discretized generator of the joint process `(x_t, gamma(t))`.
//!
//! The backward recurrence time drifts forward at unit speed and is reset to
//! zero at every renewal. On a uniform gamma grid the transport term is an
//! upwind (forward) difference, the renewal term couples `(x, gamma_j)` to
//! `(y, 0)` with rate `lambda_x(gamma_j) P(x, y)`. Nodes are ordered
//! state-major: `index = x * n_gamma + j`.
//!
//! The last usable node of each state drops the transport stencil and keeps
//! its hazard, so mass arriving there waits at `gamma_max` and renews. A
//! state whose survival underflows before `gamma_max` closes at its last
//! node with a representable hazard; nodes beyond are never reached from
//! `gamma = 0` and carry the same closure row.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SemiMarkovModel, VolatilityField};

/// Required survival at the end of the recurrence axis.
pub const TRUNCATION_SURVIVAL: f64 = 1e-6;

/// Largest node count accepted by [`expm_dense`].
pub const DENSE_LIMIT: usize = 2000;

/// Safety factor applied to the explicit time-step bound.
pub const CFL_SAFETY: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceGrid {
    gamma_max: f64,
    n_gamma: usize,
    waive_truncation: bool,
}

impl RecurrenceGrid {
    pub fn new(gamma_max: f64, n_gamma: usize) -> Result<Self> {
        if !(gamma_max.is_finite() && gamma_max > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma_max must be positive, got {gamma_max}"
            )));
        }
        if n_gamma < 3 {
            return Err(Error::InvalidParameter(format!(
                "recurrence grid needs at least 3 nodes, got {n_gamma}"
            )));
        }
        Ok(Self {
            gamma_max,
            n_gamma,
            waive_truncation: false,
        })
    }

    /// Grid with step close to `step` reaching far enough that every
    /// density-bearing law has survival below the truncation level.
    pub fn covering(model: &SemiMarkovModel, step: f64) -> Result<Self> {
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::InvalidParameter(format!("grid step must be positive, got {step}")));
        }
        let reach = model
            .laws()
            .iter()
            .filter(|l| l.has_density())
            .map(|l| l.survival_quantile(0.1 * TRUNCATION_SURVIVAL))
            .fold(0.0_f64, f64::max);
        let intervals = ((reach / step).ceil() as usize).max(2);
        Self::new(intervals as f64 * step, intervals + 1)
    }

    /// Skip the survival check at `gamma_max`.
    pub fn with_truncation_waiver(mut self) -> Self {
        self.waive_truncation = true;
        self
    }

    pub fn gamma_max(&self) -> f64 {
        self.gamma_max
    }

    pub fn n_gamma(&self) -> usize {
        self.n_gamma
    }

    pub fn step(&self) -> f64 {
        self.gamma_max / (self.n_gamma - 1) as f64
    }

    pub fn gamma(&self, j: usize) -> f64 {
        j as f64 * self.step()
    }

    pub fn truncation_waived(&self) -> bool {
        self.waive_truncation
    }
}

/// Identity of a discretization; operands of grid arithmetic must share it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridShape {
    pub n_states: usize,
    pub n_gamma: usize,
    pub step: f64,
}

impl GridShape {
    pub fn new(n_states: usize, grid: &RecurrenceGrid) -> Self {
        Self {
            n_states,
            n_gamma: grid.n_gamma(),
            step: grid.step(),
        }
    }

    pub fn len(&self) -> usize {
        self.n_states * self.n_gamma
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, state: usize, j: usize) -> usize {
        state * self.n_gamma + j
    }

    fn ensure_same(&self, other: &GridShape) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

/// Values `f(x_i, gamma_j)` on a (state, gamma) grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    shape: GridShape,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn from_values(shape: GridShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                shape.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("grid function entry {v} is not finite")));
        }
        Ok(Self { shape, values })
    }

    pub fn from_fn(shape: GridShape, f: impl Fn(usize, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(shape.len());
        for x in 0..shape.n_states {
            for j in 0..shape.n_gamma {
                values.push(f(x, j as f64 * shape.step));
            }
        }
        Self { shape, values }
    }

    pub fn constant(shape: GridShape, c: f64) -> Self {
        Self {
            shape,
            values: vec![c; shape.len()],
        }
    }

    /// Samples `map(sigma(x, gamma))` at the grid nodes.
    pub fn from_field(shape: GridShape, field: &VolatilityField, map: impl Fn(f64) -> f64) -> Self {
        Self::from_fn(shape, |x, g| map(field.eval(x, g)))
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, state: usize, j: usize) -> f64 {
        self.values[self.shape.index(state, j)]
    }

    /// Value at `(state, gamma = 0)`.
    pub fn at_origin(&self, state: usize) -> f64 {
        self.at(state, 0)
    }

    /// Linear interpolation in gamma, flat beyond the last node.
    pub fn interpolate(&self, state: usize, gamma: f64) -> f64 {
        let n = self.shape.n_gamma;
        let pos = (gamma / self.shape.step).max(0.0);
        let j = pos.floor() as usize;
        if j >= n - 1 {
            return self.at(state, n - 1);
        }
        let w = pos - j as f64;
        let a = self.at(state, j);
        a + w * (self.at(state, j + 1) - a)
    }

    pub fn hadamard(&self, other: &GridFunction) -> Result<GridFunction> {
        self.shape.ensure_same(&other.shape)?;
        Ok(Self {
            shape: self.shape,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        Self {
            shape: self.shape,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Time stepper used to compute `e^{tQ} f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stepper {
    Euler,
    #[default]
    Rk4,
}

/// Sparse generator in CSR layout, off-diagonal rates only.
///
/// The diagonal is implied by zero row sums; products are evaluated in the
/// difference form `(Qf)_i = sum_k rate_k (f_{col_k} - f_i)`, which maps
/// constants to exactly zero.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    shape: GridShape,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    rates: Vec<f64>,
    exit_rate: Vec<f64>,
    dt_max: f64,
    closure: Vec<usize>,
}

/// Builds the upwind discretization of `Q` on `grid`.
pub fn build_generator(model: &SemiMarkovModel, grid: &RecurrenceGrid) -> Result<GeneratorMatrix> {
    let report = model.validate();
    if !report.is_valid() {
        return Err(Error::InvalidModel(report.to_string()));
    }
    let m = model.n_states();
    let n = grid.n_gamma();
    let h = grid.step();
    let shape = GridShape::new(m, grid);

    let mut hazards = vec![Vec::with_capacity(n); m];
    let mut closure = Vec::with_capacity(m);
    for (x, law) in model.laws().iter().enumerate() {
        if !law.has_density() {
            return Err(Error::NoDensity { state: x });
        }
        let survival = law.survival(grid.gamma_max());
        if survival >= TRUNCATION_SURVIVAL && !grid.truncation_waived() {
            return Err(Error::Truncation {
                state: x,
                gamma_max: grid.gamma_max(),
                survival,
            });
        }
        let mut last = n - 1;
        for j in 0..n {
            match law.hazard(grid.gamma(j)) {
                Ok(rate) if rate.is_finite() => hazards[x].push(rate),
                // Singular hazard at the origin: use the cell average.
                Ok(_) => hazards[x].push(-law.survival(h).ln() / h),
                Err(Error::SurvivalUnderflow { .. }) => {
                    last = j - 1;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        closure.push(last);
    }

    let mut row_ptr = Vec::with_capacity(shape.len() + 1);
    let mut cols = Vec::new();
    let mut rates = Vec::new();
    let mut exit_rate = Vec::with_capacity(shape.len());
    row_ptr.push(0);
    for x in 0..m {
        let last = closure[x];
        for j in 0..n {
            let row = shape.index(x, j);
            let hz = hazards[x][j.min(last)];
            let mut exit = 0.0;
            if j < last {
                cols.push(row + 1);
                rates.push(1.0 / h);
                exit += 1.0 / h;
            }
            for y in 0..m {
                let p = model.transition_prob(x, y);
                let target = shape.index(y, 0);
                if p > 0.0 && hz > 0.0 && target != row {
                    cols.push(target);
                    rates.push(hz * p);
                    exit += hz * p;
                }
            }
            exit_rate.push(exit);
            row_ptr.push(cols.len());
        }
    }
    let max_exit = exit_rate.iter().copied().fold(0.0_f64, f64::max);
    let dt_max = CFL_SAFETY * if max_exit > 0.0 { h.min(1.0 / max_exit) } else { h };

    Ok(GeneratorMatrix {
        shape,
        row_ptr,
        cols,
        rates,
        exit_rate,
        dt_max,
        closure,
    })
}

impl GeneratorMatrix {
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    /// Largest stable time step (CFL bound with safety 0.25).
    pub fn dt_max(&self) -> f64 {
        self.dt_max
    }

    /// Index of the closure node for each state.
    pub fn closure_nodes(&self) -> &[usize] {
        &self.closure
    }

    /// Diagonal entry of row `i` (minus the total exit rate).
    pub fn diagonal(&self, i: usize) -> f64 {
        -self.exit_rate[i]
    }

    /// Off-diagonal `(column, rate)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()].iter().copied().zip(self.rates[span].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.rates.len() + self.dim()
    }

    /// Raw product `out = Q f` on value slices.
    pub fn apply_slice(&self, f: &[f64], out: &mut [f64]) {
        debug_assert_eq!(f.len(), self.dim());
        for (i, o) in out.iter_mut().enumerate() {
            let fi = f[i];
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.rates[k] * (f[self.cols[k]] - fi);
            }
            *o = acc;
        }
    }

    pub fn apply(&self, f: &GridFunction) -> Result<GridFunction> {
        self.shape.ensure_same(&f.shape)?;
        let mut out = vec![0.0; self.dim()];
        self.apply_slice(&f.values, &mut out);
        Ok(GridFunction {
            shape: self.shape,
            values: out,
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            for (j, rate) in self.row(i) {
                dense[(i, j)] += rate;
            }
            dense[(i, i)] = self.diagonal(i);
        }
        dense
    }

    pub fn propagate(&self, f: &GridFunction, t: f64, stepper: Stepper) -> Result<GridFunction> {
        propagate(self, f, t, stepper)
    }
}

/// Free-function form of [`GeneratorMatrix::apply`].
pub fn apply(q: &GeneratorMatrix, f: &GridFunction) -> Result<GridFunction> {
    q.apply(f)
}

/// Reusable work buffers for repeated propagation with one generator.
pub struct Propagator<'a> {
    q: &'a GeneratorMatrix,
    stepper: Stepper,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl<'a> Propagator<'a> {
    pub fn new(q: &'a GeneratorMatrix, stepper: Stepper) -> Self {
        let n = q.dim();
        let buf = || vec![0.0; n];
        Self {
            q,
            stepper,
            k1: buf(),
            k2: buf(),
            k3: buf(),
            k4: match stepper {
                Stepper::Rk4 => buf(),
                Stepper::Euler => Vec::new(),
            },
            tmp: buf(),
        }
    }

    /// Replaces `u` by `e^{tQ} u`.
    pub fn advance(&mut self, u: &mut [f64], t: f64) -> Result<()> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::InvalidParameter(format!("propagation time must be >= 0, got {t}")));
        }
        if t == 0.0 {
            return Ok(());
        }
        let (lo, hi, scale) = u.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, 0.0_f64),
            |(lo, hi, s), &v| (lo.min(v), hi.max(v), s.max(v.abs())),
        );
        let steps = (t / self.q.dt_max).ceil().max(1.0) as usize;
        let dt = t / steps as f64;
        for _ in 0..steps {
            match self.stepper {
                Stepper::Euler => self.euler_step(u, dt),
                Stepper::Rk4 => self.rk4_step(u, dt),
            }
        }
        let tol = 1e-8 * scale;
        let (lower, upper) = (lo - tol, hi + tol);
        if let Some(&value) = u.iter().find(|&&v| !(v >= lower && v <= upper)) {
            return Err(Error::PositivityBreach { value, lower, upper });
        }
        Ok(())
    }

    fn euler_step(&mut self, u: &mut [f64], dt: f64) {
        self.q.apply_slice(u, &mut self.k1);
        for (ui, ki) in u.iter_mut().zip(&self.k1) {
            *ui += dt * ki;
        }
    }

    fn rk4_step(&mut self, u: &mut [f64], dt: f64) {
        let half = 0.5 * dt;
        self.q.apply_slice(u, &mut self.k1);
        for ((t, ui), ki) in self.tmp.iter_mut().zip(u.iter()).zip(&self.k1) {
            *t = ui + half * ki;
        }
        self.q.apply_slice(&self.tmp, &mut self.k2);
        for ((t, ui), ki) in self.tmp.iter_mut().zip(u.iter()).zip(&self.k2) {
            *t = ui + half * ki;
        }
        self.q.apply_slice(&self.tmp, &mut self.k3);
        for ((t, ui), ki) in self.tmp.iter_mut().zip(u.iter()).zip(&self.k3) {
            *t = ui + dt * ki;
        }
        self.q.apply_slice(&self.tmp, &mut self.k4);
        let sixth = dt / 6.0;
        for i in 0..u.len() {
            u[i] += sixth * (self.k1[i] + 2.0 * (self.k2[i] + self.k3[i]) + self.k4[i]);
        }
    }
}

/// `e^{tQ} f` by method-of-lines time stepping under the CFL bound.
pub fn propagate(q: &GeneratorMatrix, f: &GridFunction, t: f64, stepper: Stepper) -> Result<GridFunction> {
    q.shape.ensure_same(&f.shape)?;
    let mut values = f.values.clone();
    Propagator::new(q, stepper).advance(&mut values, t)?;
    Ok(GridFunction {
        shape: f.shape,
        values,
    })
}

/// Dense `e^{tQ}` by scaling and squaring; validation oracle for [`propagate`].
pub fn expm_dense(q: &GeneratorMatrix, t: f64) -> Result<DMatrix<f64>> {
    let n = q.dim();
    if n > DENSE_LIMIT {
        return Err(Error::DimensionTooLarge { n, limit: DENSE_LIMIT });
    }
    if t == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    Ok((q.to_dense() * t).exp())
}

/// Writes a dense matrix as CSV without a header.
pub fn write_dense_csv<W: Write>(matrix: &DMatrix<f64>, mut out: W) -> std::io::Result<()> {
    for i in 0..matrix.nrows() {
        let row: Vec<String> = (0..matrix.ncols()).map(|j| format!("{:e}", matrix[(i, j)])).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
