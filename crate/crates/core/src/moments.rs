//! Moment functionals of realized variance and covariance.
//!
//! Every expectation is `e^{tQ}` applied to a grid function and read off at
//! `(x0, 0)`. Single integrals over `[0, T]` use exact product integration of
//! the piecewise-linear interpolant against the (piecewise-constant)
//! correlation, which is the trapezoid rule when breakpoints sit on nodes.
//! Double integrals use the tensor trapezoid rule; the two-time moments
//! `E[a(s) b(t)]`, `s <= t`, come from lagged sweeps
//! `e^{sQ}[a . e^{(t-s)Q} b]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GeneratorMatrix, GridFunction, Propagator, Stepper};
use crate::model::CorrelationCurve;

/// Negative variances down to this level are treated as round-off.
pub const NEGATIVE_VARIANCE_TOLERANCE: f64 = 1e-10;

/// Uniform quadrature over `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    /// Requested number of intervals; raised if needed to put breakpoints on nodes.
    pub intervals: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self { intervals: 64 }
    }
}

impl QuadratureSpec {
    pub fn new(intervals: usize) -> Result<Self> {
        if intervals < 8 {
            return Err(Error::InvalidParameter(format!(
                "quadrature needs at least 8 intervals, got {intervals}"
            )));
        }
        Ok(Self { intervals })
    }

    /// Uniform grid over `[0, maturity]`. The interval count is the smallest
    /// value in `[intervals, 8 * intervals]` that puts every breakpoint in
    /// `(0, maturity)` on a node; if none does, the requested count is kept
    /// and breakpoints are handled by product integration.
    pub fn grid(&self, maturity: f64, breakpoints: &[f64]) -> Result<TimeGrid> {
        if self.intervals < 8 {
            return Err(Error::InvalidParameter(format!(
                "quadrature needs at least 8 intervals, got {}",
                self.intervals
            )));
        }
        if !(maturity.is_finite() && maturity > 0.0) {
            return Err(Error::InvalidParameter(format!("maturity must be positive, got {maturity}")));
        }
        let inside: Vec<f64> = breakpoints
            .iter()
            .copied()
            .filter(|&b| b > 0.0 && b < maturity)
            .collect();
        let aligned = |n: usize| {
            inside.iter().all(|&b| {
                let pos = b / maturity * n as f64;
                (pos - pos.round()).abs() < 1e-9
            })
        };
        let n = (self.intervals..=8 * self.intervals)
            .find(|&n| aligned(n))
            .unwrap_or(self.intervals);
        Ok(TimeGrid::uniform(maturity, n))
    }

    pub fn grid_for(&self, maturity: f64, rho: Option<&CorrelationCurve>) -> Result<TimeGrid> {
        let bps = rho.map(|r| r.breakpoints_within(0.0, maturity)).unwrap_or_default();
        self.grid(maturity, &bps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    maturity: f64,
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(maturity: f64, intervals: usize) -> Self {
        let step = maturity / intervals as f64;
        let mut times: Vec<f64> = (0..=intervals).map(|k| k as f64 * step).collect();
        times[intervals] = maturity;
        Self { maturity, times }
    }

    pub fn maturity(&self) -> f64 {
        self.maturity
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn intervals(&self) -> usize {
        self.times.len() - 1
    }

    pub fn step(&self) -> f64 {
        self.maturity / self.intervals() as f64
    }

    /// Every other node, when the interval count is even.
    pub fn coarsened(&self) -> Option<TimeGrid> {
        (self.intervals() % 2 == 0 && self.intervals() >= 4)
            .then(|| TimeGrid::uniform(self.maturity, self.intervals() / 2))
    }

    /// Trapezoid weights.
    pub fn weights(&self) -> Vec<f64> {
        self.weights_with(None)
    }

    /// `w_k = int rho_t phi_k(t) dt` for the hat functions `phi_k` of the grid.
    pub fn weights_with(&self, rho: Option<&CorrelationCurve>) -> Vec<f64> {
        let n = self.intervals();
        let mut w = vec![0.0; n + 1];
        for k in 0..n {
            let (a, b) = (self.times[k], self.times[k + 1]);
            let len = b - a;
            let pieces = match rho {
                Some(r) => r.pieces(a, b),
                None => vec![(a, b, 1.0)],
            };
            for (c, d, r) in pieces {
                // int_c^d (b - t)/len dt and int_c^d (t - a)/len dt
                let left = ((b - c).powi(2) - (b - d).powi(2)) / (2.0 * len);
                let right = ((d - a).powi(2) - (c - a).powi(2)) / (2.0 * len);
                w[k] += r * left;
                w[k + 1] += r * right;
            }
        }
        w
    }
}

/// How a moment curve was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    ExactOperator,
    FirstOrder,
}

impl CurveKind {
    pub fn label(&self) -> &'static str {
        match self {
            CurveKind::ExactOperator => "exact-operator",
            CurveKind::FirstOrder => "first-order",
        }
    }
}

/// `E_k = [e^{t_k Q} f](x0, 0)` on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub kind: CurveKind,
}

impl MomentCurve {
    pub fn weighted_sum(&self, weights: &[f64]) -> f64 {
        self.values.iter().zip(weights).map(|(v, w)| v * w).sum()
    }

    /// Every other point, matching [`TimeGrid::coarsened`].
    pub fn coarsened(&self) -> MomentCurve {
        MomentCurve {
            times: self.times.iter().step_by(2).copied().collect(),
            values: self.values.iter().step_by(2).copied().collect(),
            kind: self.kind,
        }
    }

    /// CSV with header `t,value,method`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,value,method\n");
        for (t, v) in self.times.iter().zip(&self.values) {
            out.push_str(&format!("{t},{v:e},{}\n", self.kind.label()));
        }
        out
    }
}

fn check_state(q: &GeneratorMatrix, x0: usize) -> Result<()> {
    if x0 >= q.shape().n_states {
        return Err(Error::InvalidParameter(format!(
            "initial state {x0} out of range for {} states",
            q.shape().n_states
        )));
    }
    Ok(())
}

/// `[e^{t_k Q} f](x0, 0)` for every grid time, stepping through the semigroup.
pub fn moment_curve(
    q: &GeneratorMatrix,
    f: &GridFunction,
    x0: usize,
    grid: &TimeGrid,
    stepper: Stepper,
) -> Result<MomentCurve> {
    check_state(q, x0)?;
    let origin = q.shape().index(x0, 0);
    let mut u = q.apply(f).map(|_| f.values().to_vec())?;
    let mut prop = Propagator::new(q, stepper);
    let mut values = Vec::with_capacity(grid.times.len());
    values.push(u[origin]);
    for w in grid.times.windows(2) {
        prop.advance(&mut u, w[1] - w[0])?;
        values.push(u[origin]);
    }
    Ok(MomentCurve {
        times: grid.times.clone(),
        values,
        kind: CurveKind::ExactOperator,
    })
}

/// `(I + tQ) f` read at `(x0, 0)`.
pub fn first_order_curve(q: &GeneratorMatrix, f: &GridFunction, x0: usize, grid: &TimeGrid) -> Result<MomentCurve> {
    check_state(q, x0)?;
    let qf = q.apply(f)?;
    let (f0, qf0) = (f.at_origin(x0), qf.at_origin(x0));
    Ok(MomentCurve {
        times: grid.times.clone(),
        values: grid.times.iter().map(|&t| f0 + t * qf0).collect(),
        kind: CurveKind::FirstOrder,
    })
}

/// `E[sigma^2(x_t, gamma(t))]` given the squared volatility on the grid.
pub fn second_moment_curve(
    q: &GeneratorMatrix,
    sigma2: &GridFunction,
    x0: usize,
    grid: &TimeGrid,
    stepper: Stepper,
) -> Result<MomentCurve> {
    moment_curve(q, sigma2, x0, grid, stepper)
}

/// `E[sigma^4(x_t, gamma(t))]` given `sigma^4` on the grid.
pub fn fourth_moment_curve(
    q: &GeneratorMatrix,
    sigma4: &GridFunction,
    x0: usize,
    grid: &TimeGrid,
    stepper: Stepper,
) -> Result<MomentCurve> {
    moment_curve(q, sigma4, x0, grid, stepper)
}

/// `E[sigma1 sigma2 (x_t, gamma(t))]` given the pointwise product on the grid.
pub fn mixed_moment_curve(
    q: &GeneratorMatrix,
    product: &GridFunction,
    x0: usize,
    grid: &TimeGrid,
    stepper: Stepper,
) -> Result<MomentCurve> {
    moment_curve(q, product, x0, grid, stepper)
}

/// `table[d][j] = E[a(t_j) b(t_j + t_d)]` for `j + d <= n`, computed as
/// `e^{t_j Q}[a . e^{t_d Q} b](x0, 0)`. Lags run in parallel; each lag is an
/// independent sequential sweep, so results do not depend on thread count.
pub fn lagged_products(
    q: &GeneratorMatrix,
    a: &GridFunction,
    b: &GridFunction,
    x0: usize,
    grid: &TimeGrid,
    stepper: Stepper,
) -> Result<Vec<Vec<f64>>> {
    check_state(q, x0)?;
    let n = grid.intervals();
    let origin = q.shape().index(x0, 0);
    let product = a.hadamard(b)?;
    let dt = grid.step();

    let mut lagged = Vec::with_capacity(n + 1);
    let mut u = b.values().to_vec();
    let mut prop = Propagator::new(q, stepper);
    lagged.push(product.into_values());
    for _ in 1..=n {
        prop.advance(&mut u, dt)?;
        lagged.push(u.iter().zip(a.values()).map(|(x, y)| x * y).collect::<Vec<f64>>());
    }

    lagged
        .into_par_iter()
        .enumerate()
        .map(|(d, mut v)| {
            let mut prop = Propagator::new(q, stepper);
            let mut row = Vec::with_capacity(n - d + 1);
            row.push(v[origin]);
            for _ in 0..(n - d) {
                prop.advance(&mut v, dt)?;
                row.push(v[origin]);
            }
            Ok(row)
        })
        .collect()
}

/// Full matrix `M[i][k] = E[a(t_i) b(t_k)]`.
pub fn two_time_moments(
    q: &GeneratorMatrix,
    a: &GridFunction,
    b: &GridFunction,
    x0: usize,
    grid: &TimeGrid,
    stepper: Stepper,
) -> Result<Vec<Vec<f64>>> {
    let n = grid.intervals();
    let ab = lagged_products(q, a, b, x0, grid, stepper)?;
    let same = a == b;
    let ba = if same {
        None
    } else {
        Some(lagged_products(q, b, a, x0, grid, stepper)?)
    };
    let mut m = vec![vec![0.0; n + 1]; n + 1];
    for (i, row) in m.iter_mut().enumerate() {
        for (k, cell) in row.iter_mut().enumerate() {
            *cell = if i <= k {
                ab[k - i][i]
            } else {
                match &ba {
                    Some(ba) => ba[i - k][k],
                    None => ab[i - k][k],
                }
            };
        }
    }
    Ok(m)
}

/// `sum_{i,k} wi_i wk_k (M[i][k] - ma_i mb_k)`.
pub fn centered_double_sum(m: &[Vec<f64>], ma: &[f64], mb: &[f64], wi: &[f64], wk: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, row) in m.iter().enumerate() {
        let mut inner = 0.0;
        for (k, &v) in row.iter().enumerate() {
            inner += wk[k] * (v - ma[i] * mb[k]);
        }
        total += wi[i] * inner;
    }
    total
}

fn subsample(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    m.iter()
        .step_by(2)
        .map(|row| row.iter().step_by(2).copied().collect())
        .collect()
}

/// Variance of realized variance with its pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizedVarianceStats {
    /// `E[sigma_R^2]`.
    pub mean: f64,
    /// `Var[sigma_R^2]` from the triangular assembly, after clamping.
    pub variance: f64,
    /// Unclamped triangular assembly.
    pub raw_variance: f64,
    /// Same quantity assembled over the full square.
    pub symmetric_variance: f64,
    /// Richardson estimate `(V_n - V_{n/2}) / 3`, when the grid can be halved.
    pub richardson_error: Option<f64>,
}

fn clamp_variance(v: f64) -> Result<f64> {
    if v < -NEGATIVE_VARIANCE_TOLERANCE {
        Err(Error::NegativeVariance(v))
    } else {
        Ok(v.max(0.0))
    }
}

fn triangular_variance(c: &[Vec<f64>], mean: &[f64], w: &[f64], maturity: f64) -> f64 {
    let n = c.len();
    let mut total = 0.0;
    for k in 0..n {
        let mut inner = 0.0;
        for j in 0..k {
            inner += 2.0 * w[j] * (c[j][k] - mean[j] * mean[k]);
        }
        inner += w[k] * (c[k][k] - mean[k] * mean[k]);
        total += w[k] * inner;
    }
    total / (maturity * maturity)
}

/// `Var[(1/T) int_0^T sigma^2 dt] = (2/T^2) int_0^T int_0^t (e^{sQ}[s2 . e^{(t-s)Q} s2] - m_t m_s) ds dt`.
pub fn realized_variance_stats(
    q: &GeneratorMatrix,
    sigma2: &GridFunction,
    x0: usize,
    grid: &TimeGrid,
    stepper: Stepper,
) -> Result<RealizedVarianceStats> {
    let curve = moment_curve(q, sigma2, x0, grid, stepper)?;
    let c = two_time_moments(q, sigma2, sigma2, x0, grid, stepper)?;
    let w = grid.weights();
    let maturity = grid.maturity();
    let mean = curve.weighted_sum(&w) / maturity;
    let raw = triangular_variance(&c, &curve.values, &w, maturity);
    let symmetric = centered_double_sum(&c, &curve.values, &curve.values, &w, &w) / (maturity * maturity);
    let richardson_error = grid.coarsened().map(|coarse| {
        let cw = coarse.weights();
        let coarse_raw = triangular_variance(&subsample(&c), &curve.coarsened().values, &cw, maturity);
        (raw - coarse_raw) / 3.0
    });
    Ok(RealizedVarianceStats {
        mean,
        variance: clamp_variance(raw)?,
        raw_variance: raw,
        symmetric_variance: symmetric,
        richardson_error,
    })
}

/// `Var[sigma_R^2]`, clamped at zero for round-off.
pub fn variance_of_realized_variance(
    q: &GeneratorMatrix,
    sigma2: &GridFunction,
    x0: usize,
    grid: &TimeGrid,
    stepper: Stepper,
) -> Result<f64> {
    Ok(realized_variance_stats(q, sigma2, x0, grid, stepper)?.variance)
}
