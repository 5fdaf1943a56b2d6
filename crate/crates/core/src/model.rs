//! Semi-Markov market models.
//!
//! A model is a finite state space with an embedded transition matrix `P`
//! and one sojourn law per state, i.e. the kernel `P(x, y) G_x(t)`. The
//! volatility field and the correlation curve that drive the assets live
//! next to the model and are validated against it.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

/// Survival level below which the hazard is considered numerically meaningless.
pub const SURVIVAL_FLOOR: f64 = 1e-12;

/// Tolerance on the row sums of the transition matrix.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// Distribution of the time spent in a state before the next renewal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SojournLaw {
    Exponential { rate: f64 },
    Weibull { shape: f64, scale: f64 },
    Gamma { shape: f64, scale: f64 },
    /// Degenerate law. Simulation only: it has no density.
    Deterministic { duration: f64 },
}

impl SojournLaw {
    /// Returns a description of the first invalid parameter, if any.
    pub fn parameter_problem(&self) -> Option<String> {
        let positive = |name: &str, v: f64| {
            (!(v.is_finite() && v > 0.0)).then(|| format!("{name} must be positive and finite, got {v}"))
        };
        match *self {
            SojournLaw::Exponential { rate } => positive("rate", rate),
            SojournLaw::Weibull { shape, scale } | SojournLaw::Gamma { shape, scale } => {
                positive("shape", shape).or_else(|| positive("scale", scale))
            }
            SojournLaw::Deterministic { duration } => positive("duration", duration),
        }
    }

    pub fn has_density(&self) -> bool {
        !matches!(self, SojournLaw::Deterministic { .. })
    }

    pub fn cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        match *self {
            SojournLaw::Exponential { rate } => -(-rate * t).exp_m1(),
            SojournLaw::Weibull { shape, scale } => -(-(t / scale).powf(shape)).exp_m1(),
            SojournLaw::Gamma { shape, scale } => gamma_lr(shape, t / scale),
            SojournLaw::Deterministic { duration } => {
                if t >= duration {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Survival function `1 - G(t)`, computed without cancellation in the tail.
    pub fn survival(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        match *self {
            SojournLaw::Exponential { rate } => (-rate * t).exp(),
            SojournLaw::Weibull { shape, scale } => (-(t / scale).powf(shape)).exp(),
            SojournLaw::Gamma { shape, scale } => gamma_ur(shape, t / scale),
            SojournLaw::Deterministic { duration } => {
                if t >= duration {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    /// Density `g(t)`; `None` for the deterministic law.
    pub fn density(&self, t: f64) -> Option<f64> {
        if t < 0.0 {
            return Some(0.0);
        }
        let value = match *self {
            SojournLaw::Exponential { rate } => rate * (-rate * t).exp(),
            SojournLaw::Weibull { shape, scale } => {
                let z = t / scale;
                if t == 0.0 {
                    weibull_hazard(shape, scale, 0.0)
                } else {
                    shape / scale * z.powf(shape - 1.0) * (-z.powf(shape)).exp()
                }
            }
            SojournLaw::Gamma { shape, scale } => gamma_density(shape, scale, t),
            SojournLaw::Deterministic { .. } => return None,
        };
        Some(value)
    }

    /// Hazard rate `g(t) / (1 - G(t))`.
    pub fn hazard(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::InvalidParameter(format!("hazard time must be finite and >= 0, got {t}")));
        }
        let survival = self.survival(t);
        if survival < SURVIVAL_FLOOR {
            return Err(Error::SurvivalUnderflow { t, survival });
        }
        match *self {
            SojournLaw::Exponential { rate } => Ok(rate),
            SojournLaw::Weibull { shape, scale } => Ok(weibull_hazard(shape, scale, t)),
            SojournLaw::Gamma { shape, scale } => Ok(gamma_density(shape, scale, t) / survival),
            SojournLaw::Deterministic { .. } => Err(Error::InvalidParameter(
                "deterministic sojourn law has no hazard rate".into(),
            )),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            SojournLaw::Exponential { rate } => 1.0 / rate,
            SojournLaw::Weibull { shape, scale } => scale * ln_gamma(1.0 + 1.0 / shape).exp(),
            SojournLaw::Gamma { shape, scale } => shape * scale,
            SojournLaw::Deterministic { duration } => duration,
        }
    }

    /// Smallest `t` with survival at or below `level`.
    pub fn survival_quantile(&self, level: f64) -> f64 {
        match *self {
            SojournLaw::Exponential { rate } => -level.ln() / rate,
            SojournLaw::Weibull { shape, scale } => scale * (-level.ln()).powf(1.0 / shape),
            SojournLaw::Gamma { shape, scale } => scale * gamma_upper_inverse(shape, level),
            SojournLaw::Deterministic { duration } => duration,
        }
    }

    /// Draws one sojourn by inverting the survival function at an open-interval uniform.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u = open_unit(rng);
        match *self {
            SojournLaw::Exponential { rate } => -u.ln() / rate,
            SojournLaw::Weibull { shape, scale } => scale * (-u.ln()).powf(1.0 / shape),
            SojournLaw::Gamma { shape, scale } => scale * gamma_upper_inverse(shape, u),
            SojournLaw::Deterministic { duration } => duration,
        }
    }
}

/// Free-function form of [`SojournLaw::hazard`].
pub fn hazard(law: &SojournLaw, t: f64) -> Result<f64> {
    law.hazard(t)
}

/// Free-function form of [`SojournLaw::sample`].
pub fn sample_sojourn<R: Rng + ?Sized>(law: &SojournLaw, rng: &mut R) -> f64 {
    law.sample(rng)
}

/// Uniform draw on the open interval (0, 1).
pub(crate) fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn weibull_hazard(shape: f64, scale: f64, t: f64) -> f64 {
    if t == 0.0 {
        return match shape.partial_cmp(&1.0) {
            Some(std::cmp::Ordering::Less) => f64::INFINITY,
            Some(std::cmp::Ordering::Equal) => 1.0 / scale,
            _ => 0.0,
        };
    }
    shape / scale * (t / scale).powf(shape - 1.0)
}

fn gamma_density(shape: f64, scale: f64, t: f64) -> f64 {
    if t == 0.0 {
        return match shape.partial_cmp(&1.0) {
            Some(std::cmp::Ordering::Less) => f64::INFINITY,
            Some(std::cmp::Ordering::Equal) => 1.0 / scale,
            _ => 0.0,
        };
    }
    let z = t / scale;
    ((shape - 1.0) * z.ln() - z - ln_gamma(shape)).exp() / scale
}

/// Solves `Q(shape, x) = u` for the regularized upper incomplete gamma function.
fn gamma_upper_inverse(shape: f64, u: f64) -> f64 {
    let mut lo = 0.0_f64;
    let mut hi = shape.max(1.0);
    while gamma_ur(shape, hi) > u {
        lo = hi;
        hi *= 2.0;
    }
    let log_norm = ln_gamma(shape);
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let excess = gamma_ur(shape, x) - u;
        if excess == 0.0 {
            return x;
        }
        if excess > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let dens = ((shape - 1.0) * x.ln() - x - log_norm).exp();
        let mut next = x + excess / dens;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x || hi - lo <= 1e-15 * hi {
            return next;
        }
        x = next;
    }
    x
}

/// Diagnostic severity of a validation finding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Violation,
    Advisory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub severity: Severity,
    pub state: Option<usize>,
    pub message: String,
}

/// Outcome of [`validate`]. An empty list of violations means the model is valid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations().next().is_none()
    }

    pub fn violations(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues.iter().filter(|i| i.severity == Severity::Violation)
    }

    pub fn advisories(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues.iter().filter(|i| i.severity == Severity::Advisory)
    }

    pub(crate) fn violation(&mut self, state: Option<usize>, message: impl Into<String>) {
        self.issues.push(ValidationIssue {
            severity: Severity::Violation,
            state,
            message: message.into(),
        });
    }

    pub(crate) fn advisory(&mut self, state: Option<usize>, message: impl Into<String>) {
        self.issues.push(ValidationIssue {
            severity: Severity::Advisory,
            state,
            message: message.into(),
        });
    }

    pub fn merge(&mut self, other: ValidationReport) {
        self.issues.extend(other.issues);
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            write!(f, "valid")?;
        } else {
            write!(f, "invalid")?;
        }
        for issue in &self.issues {
            let tag = match issue.severity {
                Severity::Violation => "violation",
                Severity::Advisory => "advisory",
            };
            match issue.state {
                Some(s) => write!(f, "\n  {tag} (state {s}): {}", issue.message)?,
                None => write!(f, "\n  {tag}: {}", issue.message)?,
            }
        }
        Ok(())
    }
}

/// Finite-state semi-Markov kernel `P(x, y) G_x(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiMarkovModel {
    transition: Vec<Vec<f64>>,
    laws: Vec<SojournLaw>,
}

impl SemiMarkovModel {
    /// Builds a model, rejecting it if [`validate`] reports any violation.
    pub fn new(transition: Vec<Vec<f64>>, laws: Vec<SojournLaw>) -> Result<Self> {
        let model = Self::unchecked(transition, laws);
        let report = model.validate();
        if !report.is_valid() {
            return Err(Error::InvalidModel(report.to_string()));
        }
        Ok(model)
    }

    /// Builds a model without validation, e.g. to report on file input.
    pub fn unchecked(transition: Vec<Vec<f64>>, laws: Vec<SojournLaw>) -> Self {
        Self { transition, laws }
    }

    pub fn n_states(&self) -> usize {
        self.transition.len()
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn transition_prob(&self, from: usize, to: usize) -> f64 {
        self.transition[from][to]
    }

    pub fn law(&self, state: usize) -> &SojournLaw {
        &self.laws[state]
    }

    pub fn laws(&self) -> &[SojournLaw] {
        &self.laws
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }

    /// Samples the next state from row `from` of `P`.
    pub fn sample_next_state<R: Rng + ?Sized>(&self, from: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let row = &self.transition[from];
        let mut acc = 0.0;
        let mut last_positive = from;
        for (to, &p) in row.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last_positive = to;
                if u < acc {
                    return to;
                }
            }
        }
        last_positive
    }
}

/// Checks the kernel invariants: square stochastic `P`, one valid law per state.
pub fn validate(model: &SemiMarkovModel) -> ValidationReport {
    let mut report = ValidationReport::default();
    let m = model.transition.len();
    if m == 0 {
        report.violation(None, "model has no states");
        return report;
    }
    if model.laws.len() != m {
        report.violation(
            None,
            format!("{} sojourn laws for {m} states", model.laws.len()),
        );
    }
    for (x, row) in model.transition.iter().enumerate() {
        if row.len() != m {
            report.violation(Some(x), format!("row has {} entries, expected {m}", row.len()));
            continue;
        }
        for (y, &p) in row.iter().enumerate() {
            if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
                report.violation(Some(x), format!("entry P({x},{y}) = {p} outside [0, 1]"));
            }
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            report.violation(Some(x), format!("row sum {sum} differs from 1"));
        }
        if row.get(x).copied().unwrap_or(0.0) > 0.0 {
            report.advisory(
                Some(x),
                format!("self-transition P({x},{x}) = {} renews the recurrence time in place", row[x]),
            );
        }
    }
    for (x, law) in model.laws.iter().enumerate() {
        if let Some(problem) = law.parameter_problem() {
            report.violation(Some(x), problem);
        }
        if !law.has_density() {
            report.advisory(
                Some(x),
                "deterministic sojourn law: usable by the simulator only, not by the generator",
            );
        }
    }
    report
}

/// Deterministic instantaneous correlation `rho_t` between the two Wiener drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationCurve {
    Constant(f64),
    /// `values[i]` holds on `[breakpoints[i-1], breakpoints[i])`, with open ends.
    PiecewiseConstant { breakpoints: Vec<f64>, values: Vec<f64> },
}

impl CorrelationCurve {
    pub fn constant(rho: f64) -> Self {
        CorrelationCurve::Constant(rho)
    }

    pub fn piecewise(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let curve = CorrelationCurve::PiecewiseConstant { breakpoints, values };
        match curve.problems().into_iter().next() {
            Some(p) => Err(Error::InvalidParameter(p)),
            None => Ok(curve),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let check = |v: f64, out: &mut Vec<String>| {
            if !(v.is_finite() && v.abs() <= 1.0) {
                out.push(format!("correlation value {v} outside [-1, 1]"));
            }
        };
        match self {
            CorrelationCurve::Constant(rho) => check(*rho, &mut out),
            CorrelationCurve::PiecewiseConstant { breakpoints, values } => {
                if values.len() != breakpoints.len() + 1 {
                    out.push(format!(
                        "{} correlation values for {} breakpoints",
                        values.len(),
                        breakpoints.len()
                    ));
                }
                if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
                    out.push("correlation breakpoints must be strictly increasing".into());
                }
                if breakpoints.iter().any(|b| !b.is_finite()) {
                    out.push("correlation breakpoints must be finite".into());
                }
                for &v in values {
                    check(v, &mut out);
                }
            }
        }
        out
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            CorrelationCurve::Constant(rho) => *rho,
            CorrelationCurve::PiecewiseConstant { breakpoints, values } => {
                let idx = breakpoints.partition_point(|&b| b <= t);
                values[idx]
            }
        }
    }

    /// Breakpoints strictly inside `(a, b)`.
    pub fn breakpoints_within(&self, a: f64, b: f64) -> Vec<f64> {
        match self {
            CorrelationCurve::Constant(_) => Vec::new(),
            CorrelationCurve::PiecewiseConstant { breakpoints, .. } => {
                breakpoints.iter().copied().filter(|&c| c > a && c < b).collect()
            }
        }
    }

    /// Pieces `(start, end, rho)` covering `[a, b]`.
    pub fn pieces(&self, a: f64, b: f64) -> Vec<(f64, f64, f64)> {
        let mut cuts = vec![a];
        cuts.extend(self.breakpoints_within(a, b));
        cuts.push(b);
        cuts.windows(2)
            .map(|w| (w[0], w[1], self.value(0.5 * (w[0] + w[1]))))
            .collect()
    }

    /// `int_a^b rho_t dt`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        self.pieces(a, b).iter().map(|&(s, e, r)| r * (e - s)).sum()
    }

    /// `int_a^b t rho_t dt`.
    pub fn first_moment(&self, a: f64, b: f64) -> f64 {
        self.pieces(a, b)
            .iter()
            .map(|&(s, e, r)| r * 0.5 * (e * e - s * s))
            .sum()
    }

    /// Time average over `[0, T]`.
    pub fn average(&self, maturity: f64) -> f64 {
        self.integral(0.0, maturity) / maturity
    }
}

/// Instantaneous volatility `sigma(x, gamma)` of one asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolatilityField {
    /// One level per state, independent of the recurrence time.
    StateConstant(Vec<f64>),
    /// Piecewise-linear in gamma through `values[x][k]` at `gamma_nodes[k]`,
    /// flat outside the node range.
    Gridded {
        gamma_nodes: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

impl VolatilityField {
    pub fn state_constant(levels: Vec<f64>) -> Self {
        VolatilityField::StateConstant(levels)
    }

    pub fn gridded(gamma_nodes: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        let field = VolatilityField::Gridded { gamma_nodes, values };
        let m = field.n_states();
        match field.problems(m).into_iter().next() {
            Some(p) => Err(Error::InvalidParameter(p)),
            None => Ok(field),
        }
    }

    pub fn n_states(&self) -> usize {
        match self {
            VolatilityField::StateConstant(levels) => levels.len(),
            VolatilityField::Gridded { values, .. } => values.len(),
        }
    }

    pub fn problems(&self, n_states: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_states() != n_states {
            out.push(format!(
                "volatility covers {} states, model has {n_states}",
                self.n_states()
            ));
        }
        let check = |v: f64, out: &mut Vec<String>| {
            if !(v.is_finite() && v >= 0.0) {
                out.push(format!("volatility value {v} must be finite and >= 0"));
            }
        };
        match self {
            VolatilityField::StateConstant(levels) => levels.iter().for_each(|&v| check(v, &mut out)),
            VolatilityField::Gridded { gamma_nodes, values } => {
                if gamma_nodes.is_empty() {
                    out.push("gridded volatility needs at least one gamma node".into());
                }
                if gamma_nodes.windows(2).any(|w| !(w[0] < w[1])) {
                    out.push("gamma nodes must be strictly increasing".into());
                }
                if gamma_nodes.iter().any(|&g| !(g.is_finite() && g >= 0.0)) {
                    out.push("gamma nodes must be finite and >= 0".into());
                }
                for row in values {
                    if row.len() != gamma_nodes.len() {
                        out.push(format!(
                            "volatility row has {} values for {} gamma nodes",
                            row.len(),
                            gamma_nodes.len()
                        ));
                    }
                    row.iter().for_each(|&v| check(v, &mut out));
                }
            }
        }
        out
    }

    pub fn eval(&self, state: usize, gamma: f64) -> f64 {
        match self {
            VolatilityField::StateConstant(levels) => levels[state],
            VolatilityField::Gridded { gamma_nodes, values } => {
                let row = &values[state];
                if gamma <= gamma_nodes[0] {
                    return row[0];
                }
                let last = gamma_nodes.len() - 1;
                if gamma >= gamma_nodes[last] {
                    return row[last];
                }
                let k = gamma_nodes.partition_point(|&g| g <= gamma) - 1;
                let w = (gamma - gamma_nodes[k]) / (gamma_nodes[k + 1] - gamma_nodes[k]);
                row[k] + w * (row[k + 1] - row[k])
            }
        }
    }

    /// Kinks of the interpolant in gamma.
    pub fn knots(&self) -> &[f64] {
        match self {
            VolatilityField::StateConstant(_) => &[],
            VolatilityField::Gridded { gamma_nodes, .. } => gamma_nodes,
        }
    }

    pub fn is_gamma_independent(&self) -> bool {
        match self {
            VolatilityField::StateConstant(_) => true,
            VolatilityField::Gridded { values, .. } => values
                .iter()
                .all(|row| row.iter().all(|&v| v == row[0])),
        }
    }
}
