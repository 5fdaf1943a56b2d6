//! Variance, volatility, covariance and correlation swap prices.
//!
//! Formulas are evaluated with unit notional; the report scales by the
//! contract notional at the end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GeneratorMatrix, GridFunction, Stepper};
use crate::model::{CorrelationCurve, VolatilityField};
use crate::moments::{
    centered_double_sum, moment_curve, realized_variance_stats, two_time_moments, MomentCurve,
    QuadratureSpec, TimeGrid,
};

/// Expected realized variance below this makes the volatility and
/// correlation expansions meaningless.
pub const DEGENERATE_MEAN: f64 = 1e-12;
/// `Var{V}/E{V}^2` above this flags the convexity adjustment as unreliable.
pub const EXPANSION_WARNING_RATIO: f64 = 0.25;
/// Tolerance of the constant-field normalization self-test.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapKind {
    Variance,
    Volatility,
    Covariance,
    Correlation,
}

impl SwapKind {
    pub fn label(&self) -> &'static str {
        match self {
            SwapKind::Variance => "variance",
            SwapKind::Volatility => "volatility",
            SwapKind::Covariance => "covariance",
            SwapKind::Correlation => "correlation",
        }
    }
}

fn default_notional() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapContract {
    pub kind: SwapKind,
    /// Maturity in years.
    pub maturity: f64,
    /// Continuously compounded risk-free rate.
    pub rate: f64,
    pub strike: f64,
    #[serde(default = "default_notional")]
    pub notional: f64,
}

impl SwapContract {
    pub fn new(kind: SwapKind, maturity: f64, rate: f64, strike: f64) -> Result<Self> {
        let c = Self {
            kind,
            maturity,
            rate,
            strike,
            notional: 1.0,
        };
        c.check()?;
        Ok(c)
    }

    pub fn with_notional(mut self, notional: f64) -> Result<Self> {
        self.notional = notional;
        self.check()?;
        Ok(self)
    }

    /// Hard violations are errors; the returned strings are advisories.
    pub fn check(&self) -> Result<Vec<String>> {
        if !(self.maturity.is_finite() && self.maturity > 0.0) {
            return Err(Error::InvalidParameter(format!("maturity must be positive, got {}", self.maturity)));
        }
        if !self.rate.is_finite() || !self.strike.is_finite() {
            return Err(Error::InvalidParameter("rate and strike must be finite".into()));
        }
        if !self.notional.is_finite() || self.notional == 0.0 {
            return Err(Error::InvalidParameter(format!("notional must be finite and nonzero, got {}", self.notional)));
        }
        let mut advisories = Vec::new();
        if self.kind == SwapKind::Correlation && self.strike.abs() > 1.0 {
            advisories.push(format!("correlation strike {} lies outside [-1, 1]", self.strike));
        }
        Ok(advisories)
    }

    pub fn discount(&self) -> f64 {
        (-self.rate * self.maturity).exp()
    }

    fn expect(&self, kind: SwapKind) -> Result<()> {
        self.check()?;
        if self.kind != kind {
            return Err(Error::InvalidParameter(format!(
                "contract is a {} swap, pricer expects {}",
                self.kind.label(),
                kind.label()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PricingMethod {
    /// Moment curves from the discretized semigroup `e^{tQ}`.
    #[default]
    #[serde(rename = "exact")]
    Exact,
    /// `e^{tQ}` replaced by `I + tQ`.
    #[serde(rename = "first-order")]
    FirstOrder,
}

impl PricingMethod {
    pub fn label(&self) -> &'static str {
        match self {
            PricingMethod::Exact => "exact",
            PricingMethod::FirstOrder => "first-order",
        }
    }
}

/// Which closed form turns the intermediates into a fair value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formula {
    /// `E{V}`.
    Variance,
    /// `sqrt(E{V}) - Var{V} / (8 E{V}^{3/2})`.
    Volatility,
    /// `X0`.
    Covariance,
    /// `X0 / sqrt(Y0 Z0)`.
    CorrelationZeroOrder,
    /// `X0 / sqrt(Y0 Z0) - (C_XY / Y0 + C_XZ / Z0) / (2 sqrt(Y0 Z0))`.
    CorrelationFirstOrder,
}

/// Quantities the price is assembled from. Unused fields stay `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Intermediates {
    pub discount: f64,
    pub strike: f64,
    pub notional: f64,
    /// `E{V}`, expected realized variance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_variance: Option<f64>,
    /// `Var{V}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_of_variance: Option<f64>,
    /// `Var{V} / (8 E{V}^{3/2})`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convexity_adjustment: Option<f64>,
    /// `X0 = (1/T) int rho_t E[s1 s2] dt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance_integral: Option<f64>,
    /// `Y0 = (1/T) int E[s1^2] dt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_integral_1: Option<f64>,
    /// `Z0 = (1/T) int E[s2^2] dt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_integral_2: Option<f64>,
    /// `C_XY = E[XY] - X0 Y0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_covariance_1: Option<f64>,
    /// `C_XZ = E[XZ] - X0 Z0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_covariance_2: Option<f64>,
    /// Uncentered `E[XY]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_moment_1: Option<f64>,
    /// Uncentered `E[XZ]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_moment_2: Option<f64>,
    /// First-order correction added to the zero-order correlation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuadratureDiagnostics {
    pub intervals: usize,
    pub step: f64,
    /// `(I_n - I_{n/2}) / 3` for the fair value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub richardson_error: Option<f64>,
    /// Deviation seen by the constant-field normalization self-test.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingReport {
    pub kind: SwapKind,
    pub method: PricingMethod,
    pub formula: Formula,
    /// Present value, notional included.
    pub price: f64,
    /// Fair strike implied by the intermediates.
    pub fair_value: f64,
    pub intermediates: Intermediates,
    pub diagnostics: QuadratureDiagnostics,
    /// Set when `Var{V}/E{V}^2` exceeds the expansion threshold.
    #[serde(default)]
    pub expansion_warning: bool,
    #[serde(default)]
    pub notes: Vec<String>,
}

fn required(v: Option<f64>, name: &str) -> Result<f64> {
    v.ok_or_else(|| Error::InvalidParameter(format!("report is missing {name}")))
}

fn volatility_fair(mean: f64, var: f64) -> f64 {
    mean.sqrt() - var / (8.0 * mean.powf(1.5))
}

fn correlation_zero(x0: f64, y0: f64, z0: f64) -> f64 {
    x0 / (y0 * z0).sqrt()
}

fn correlation_correction(y0: f64, z0: f64, cxy: f64, cxz: f64) -> f64 {
    -(cxy / y0 + cxz / z0) / (2.0 * (y0 * z0).sqrt())
}

impl PricingReport {
    /// Fair value recomputed from the intermediates under `formula`.
    pub fn recompute_fair_value(&self) -> Result<f64> {
        let m = &self.intermediates;
        Ok(match self.formula {
            Formula::Variance => required(m.expected_variance, "expected_variance")?,
            Formula::Volatility => volatility_fair(
                required(m.expected_variance, "expected_variance")?,
                required(m.variance_of_variance, "variance_of_variance")?,
            ),
            Formula::Covariance => required(m.covariance_integral, "covariance_integral")?,
            Formula::CorrelationZeroOrder => correlation_zero(
                required(m.covariance_integral, "covariance_integral")?,
                required(m.variance_integral_1, "variance_integral_1")?,
                required(m.variance_integral_2, "variance_integral_2")?,
            ),
            Formula::CorrelationFirstOrder => {
                let (y0, z0) = (
                    required(m.variance_integral_1, "variance_integral_1")?,
                    required(m.variance_integral_2, "variance_integral_2")?,
                );
                correlation_zero(required(m.covariance_integral, "covariance_integral")?, y0, z0)
                    + correlation_correction(
                        y0,
                        z0,
                        required(m.cross_covariance_1, "cross_covariance_1")?,
                        required(m.cross_covariance_2, "cross_covariance_2")?,
                    )
            }
        })
    }

    /// Price recomputed from the intermediates.
    pub fn recompute_price(&self) -> Result<f64> {
        let m = &self.intermediates;
        Ok(present_value(m.notional, m.discount, self.recompute_fair_value()?, m.strike))
    }
}

fn present_value(notional: f64, discount: f64, fair: f64, strike: f64) -> f64 {
    notional * discount * (fair - strike)
}

/// Prices swaps on one discretized generator from a fixed initial state.
#[derive(Debug, Clone)]
pub struct PricingEngine {
    generator: GeneratorMatrix,
    initial_state: usize,
    quadrature: QuadratureSpec,
    stepper: Stepper,
}

struct Assembly {
    fair: f64,
    intermediates: Intermediates,
    richardson: Option<f64>,
    grid: TimeGrid,
}

impl PricingEngine {
    pub fn new(generator: GeneratorMatrix, initial_state: usize) -> Result<Self> {
        if initial_state >= generator.shape().n_states {
            return Err(Error::InvalidParameter(format!(
                "initial state {initial_state} out of range for {} states",
                generator.shape().n_states
            )));
        }
        Ok(Self {
            generator,
            initial_state,
            quadrature: QuadratureSpec::default(),
            stepper: Stepper::default(),
        })
    }

    pub fn with_quadrature(mut self, quadrature: QuadratureSpec) -> Self {
        self.quadrature = quadrature;
        self
    }

    pub fn with_stepper(mut self, stepper: Stepper) -> Self {
        self.stepper = stepper;
        self
    }

    pub fn generator(&self) -> &GeneratorMatrix {
        &self.generator
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn quadrature(&self) -> QuadratureSpec {
        self.quadrature
    }

    pub fn stepper(&self) -> Stepper {
        self.stepper
    }

    fn field(&self, sigma: &VolatilityField, map: impl Fn(f64) -> f64) -> Result<GridFunction> {
        let shape = self.generator.shape();
        let problems = sigma.problems(shape.n_states);
        if !problems.is_empty() {
            return Err(Error::InvalidParameter(problems.join("; ")));
        }
        Ok(GridFunction::from_field(shape, sigma, map))
    }

    fn product(&self, s1: &VolatilityField, s2: &VolatilityField) -> Result<GridFunction> {
        self.field(s1, |v| v)?.hadamard(&self.field(s2, |v| v)?)
    }

    fn curve(&self, f: &GridFunction, grid: &TimeGrid) -> Result<MomentCurve> {
        moment_curve(&self.generator, f, self.initial_state, grid, self.stepper)
    }

    /// `(1/T) sum_k w_k curve_k` and its Richardson estimate.
    fn time_average(&self, curve: &MomentCurve, grid: &TimeGrid, rho: Option<&CorrelationCurve>) -> (f64, Option<f64>) {
        let t = grid.maturity();
        let fine = curve.weighted_sum(&grid.weights_with(rho)) / t;
        let err = grid.coarsened().map(|g| {
            let coarse = curve.coarsened().weighted_sum(&g.weights_with(rho)) / t;
            (fine - coarse) / 3.0
        });
        (fine, err)
    }

    fn at_origin(&self, f: &GridFunction) -> Result<(f64, f64)> {
        let qf = self.generator.apply(f)?;
        Ok((f.at_origin(self.initial_state), qf.at_origin(self.initial_state)))
    }

    fn base(contract: &SwapContract) -> Intermediates {
        Intermediates {
            discount: contract.discount(),
            strike: contract.strike,
            notional: contract.notional,
            ..Intermediates::default()
        }
    }

    fn finish(
        contract: &SwapContract,
        method: PricingMethod,
        formula: Formula,
        a: Assembly,
        notes: Vec<String>,
    ) -> Result<PricingReport> {
        let price = present_value(contract.notional, contract.discount(), a.fair, contract.strike);
        if !price.is_finite() {
            return Err(Error::InvalidParameter(format!("non-finite price {price}")));
        }
        let mut notes = notes;
        notes.extend(contract.check()?);
        Ok(PricingReport {
            kind: contract.kind,
            method,
            formula,
            price,
            fair_value: a.fair,
            intermediates: a.intermediates,
            diagnostics: QuadratureDiagnostics {
                intervals: a.grid.intervals(),
                step: a.grid.step(),
                richardson_error: a.richardson,
                normalization_residual: None,
            },
            expansion_warning: false,
            notes,
        })
    }

    fn expected_variance(&self, sigma2: &GridFunction, grid: &TimeGrid, method: PricingMethod) -> Result<(f64, Option<f64>)> {
        match method {
            PricingMethod::Exact => {
                let curve = self.curve(sigma2, grid)?;
                Ok(self.time_average(&curve, grid, None))
            }
            PricingMethod::FirstOrder => {
                let (f, qf) = self.at_origin(sigma2)?;
                Ok((f + 0.5 * grid.maturity() * qf, None))
            }
        }
    }

    pub fn price_variance_swap(
        &self,
        sigma: &VolatilityField,
        contract: &SwapContract,
        method: PricingMethod,
    ) -> Result<PricingReport> {
        contract.expect(SwapKind::Variance)?;
        let grid = self.quadrature.grid(contract.maturity, &[])?;
        let sigma2 = self.field(sigma, |s| s * s)?;
        let (mean, richardson) = self.expected_variance(&sigma2, &grid, method)?;
        let mut m = Self::base(contract);
        m.expected_variance = Some(mean);
        let a = Assembly {
            fair: mean,
            intermediates: m,
            richardson,
            grid,
        };
        Self::finish(contract, method, Formula::Variance, a, Vec::new())
    }

    pub fn price_volatility_swap(
        &self,
        sigma: &VolatilityField,
        contract: &SwapContract,
        method: PricingMethod,
    ) -> Result<PricingReport> {
        contract.expect(SwapKind::Volatility)?;
        let grid = self.quadrature.grid(contract.maturity, &[])?;
        let sigma2 = self.field(sigma, |s| s * s)?;
        let (mean, var, richardson) = match method {
            PricingMethod::Exact => {
                let stats = realized_variance_stats(&self.generator, &sigma2, self.initial_state, &grid, self.stepper)?;
                (stats.mean, stats.variance, stats.richardson_error)
            }
            PricingMethod::FirstOrder => {
                let (mean, _) = self.expected_variance(&sigma2, &grid, method)?;
                let sigma4 = sigma2.map(|v| v * v);
                let q4 = self.generator.apply(&sigma4)?;
                let q2 = self.generator.apply(&sigma2)?;
                let x = self.initial_state;
                let var = contract.maturity / 3.0 * (q4.at_origin(x) - 2.0 * sigma2.at_origin(x) * q2.at_origin(x));
                (mean, var.max(0.0), None)
            }
        };
        self.volatility_from_moments(contract, method, mean, var, richardson, grid)
    }

    /// Volatility swap from given `E{V}` and `Var{V}`.
    pub fn price_volatility_from_moments(
        &self,
        contract: &SwapContract,
        method: PricingMethod,
        mean: f64,
        variance: f64,
    ) -> Result<PricingReport> {
        contract.expect(SwapKind::Volatility)?;
        let grid = self.quadrature.grid(contract.maturity, &[])?;
        self.volatility_from_moments(contract, method, mean, variance, None, grid)
    }

    fn volatility_from_moments(
        &self,
        contract: &SwapContract,
        method: PricingMethod,
        mean: f64,
        var: f64,
        richardson: Option<f64>,
        grid: TimeGrid,
    ) -> Result<PricingReport> {
        if mean < DEGENERATE_MEAN {
            return Err(Error::DegenerateMean(mean));
        }
        let fair = volatility_fair(mean, var);
        let mut m = Self::base(contract);
        m.expected_variance = Some(mean);
        m.variance_of_variance = Some(var);
        m.convexity_adjustment = Some(var / (8.0 * mean.powf(1.5)));
        let a = Assembly {
            fair,
            intermediates: m,
            richardson,
            grid,
        };
        let warn = var / (mean * mean) > EXPANSION_WARNING_RATIO;
        let notes = if warn {
            vec![format!(
                "Var{{V}}/E{{V}}^2 = {:.3} exceeds {EXPANSION_WARNING_RATIO}; second-order convexity adjustment is unreliable",
                var / (mean * mean)
            )]
        } else {
            Vec::new()
        };
        let mut report = Self::finish(contract, method, Formula::Volatility, a, notes)?;
        report.expansion_warning = warn;
        Ok(report)
    }

    /// `(1/T) int rho_t E[f] dt`.
    fn weighted_average(
        &self,
        f: &GridFunction,
        rho: Option<&CorrelationCurve>,
        grid: &TimeGrid,
        method: PricingMethod,
    ) -> Result<(f64, Option<f64>)> {
        match method {
            PricingMethod::Exact => {
                let curve = self.curve(f, grid)?;
                Ok(self.time_average(&curve, grid, rho))
            }
            PricingMethod::FirstOrder => {
                let t = grid.maturity();
                let (f0, qf0) = self.at_origin(f)?;
                let (i0, i1) = match rho {
                    Some(r) => (r.integral(0.0, t), r.first_moment(0.0, t)),
                    None => (t, 0.5 * t * t),
                };
                Ok(((f0 * i0 + qf0 * i1) / t, None))
            }
        }
    }

    pub fn price_covariance_swap(
        &self,
        sigma1: &VolatilityField,
        sigma2: &VolatilityField,
        rho: &CorrelationCurve,
        contract: &SwapContract,
        method: PricingMethod,
    ) -> Result<PricingReport> {
        contract.expect(SwapKind::Covariance)?;
        check_rho(rho)?;
        let grid = self.quadrature.grid_for(contract.maturity, Some(rho))?;
        let f = self.product(sigma1, sigma2)?;
        let (x0, richardson) = self.weighted_average(&f, Some(rho), &grid, method)?;
        let mut m = Self::base(contract);
        m.covariance_integral = Some(x0);
        let a = Assembly {
            fair: x0,
            intermediates: m,
            richardson,
            grid,
        };
        Self::finish(contract, method, Formula::Covariance, a, Vec::new())
    }

    /// `X0 / sqrt(Y0 Z0)` with moments from `method`.
    pub fn price_correlation_swap_zero_order(
        &self,
        sigma1: &VolatilityField,
        sigma2: &VolatilityField,
        rho: &CorrelationCurve,
        contract: &SwapContract,
        method: PricingMethod,
    ) -> Result<PricingReport> {
        contract.expect(SwapKind::Correlation)?;
        check_rho(rho)?;
        let grid = self.quadrature.grid_for(contract.maturity, Some(rho))?;
        let f = self.product(sigma1, sigma2)?;
        let s1 = self.field(sigma1, |s| s * s)?;
        let s2 = self.field(sigma2, |s| s * s)?;
        let (x0, ex) = self.weighted_average(&f, Some(rho), &grid, method)?;
        let (y0, ey) = self.weighted_average(&s1, None, &grid, method)?;
        let (z0, ez) = self.weighted_average(&s2, None, &grid, method)?;
        for v in [y0, z0] {
            if v < DEGENERATE_MEAN {
                return Err(Error::DegenerateMean(v));
            }
        }
        let fair = correlation_zero(x0, y0, z0);
        let richardson = match (ex, ey, ez) {
            (Some(ex), Some(ey), Some(ez)) => Some(ratio_error(x0, y0, z0, ex, ey, ez)),
            _ => None,
        };
        let mut m = Self::base(contract);
        m.covariance_integral = Some(x0);
        m.variance_integral_1 = Some(y0);
        m.variance_integral_2 = Some(z0);
        let a = Assembly {
            fair,
            intermediates: m,
            richardson,
            grid,
        };
        Self::finish(contract, method, Formula::CorrelationZeroOrder, a, Vec::new())
    }

    /// Zero-order correlation plus the first-order correction from the
    /// cross covariances of `X = Cov_R` with `Y = s1^2_R` and `Z = s2^2_R`.
    pub fn price_correlation_swap_first_order(
        &self,
        sigma1: &VolatilityField,
        sigma2: &VolatilityField,
        rho: &CorrelationCurve,
        contract: &SwapContract,
    ) -> Result<PricingReport> {
        contract.expect(SwapKind::Correlation)?;
        check_rho(rho)?;

        let residual = self.normalization_residual(rho, contract.maturity)?;
        if residual > NORMALIZATION_TOLERANCE {
            return Err(Error::NormalizationCheckFailed(residual));
        }

        let grid = self.quadrature.grid_for(contract.maturity, Some(rho))?;
        let f = self.product(sigma1, sigma2)?;
        let s1 = self.field(sigma1, |s| s * s)?;
        let s2 = self.field(sigma2, |s| s * s)?;
        let parts = self.first_order_parts(&f, &s1, &s2, rho, &grid)?;

        let mut m = Self::base(contract);
        m.covariance_integral = Some(parts.x0);
        m.variance_integral_1 = Some(parts.y0);
        m.variance_integral_2 = Some(parts.z0);
        m.cross_covariance_1 = Some(parts.cxy);
        m.cross_covariance_2 = Some(parts.cxz);
        m.cross_moment_1 = Some(parts.exy);
        m.cross_moment_2 = Some(parts.exz);
        m.correction = Some(parts.correction);
        let a = Assembly {
            fair: parts.fair,
            intermediates: m,
            richardson: parts.richardson,
            grid,
        };
        let notes = vec![
            "correction uses centered cross moments C = E[XY] - X0 Y0; normalization checked on unit fields".to_string(),
        ];
        let mut report = Self::finish(contract, PricingMethod::Exact, Formula::CorrelationFirstOrder, a, notes)?;
        report.diagnostics.normalization_residual = Some(residual);
        Ok(report)
    }

    /// Runs the first-order assembly on unit volatilities, where the answer
    /// is the average correlation, and returns the absolute deviation.
    pub fn normalization_residual(&self, rho: &CorrelationCurve, maturity: f64) -> Result<f64> {
        let grid = QuadratureSpec::new(8)?.grid_for(maturity, Some(rho))?;
        let one = GridFunction::constant(self.generator.shape(), 1.0);
        let parts = self.first_order_parts(&one, &one, &one, rho, &grid)?;
        Ok((parts.fair - rho.average(maturity)).abs())
    }

    fn first_order_parts(
        &self,
        f: &GridFunction,
        s1: &GridFunction,
        s2: &GridFunction,
        rho: &CorrelationCurve,
        grid: &TimeGrid,
    ) -> Result<FirstOrderParts> {
        let q = &self.generator;
        let (x, st) = (self.initial_state, self.stepper);
        let t = grid.maturity();
        let w = grid.weights();
        let wr = grid.weights_with(Some(rho));

        let mf = self.curve(f, grid)?;
        let m1 = self.curve(s1, grid)?;
        let m2 = self.curve(s2, grid)?;
        let x0 = mf.weighted_sum(&wr) / t;
        let y0 = m1.weighted_sum(&w) / t;
        let z0 = m2.weighted_sum(&w) / t;
        for v in [y0, z0] {
            if v < DEGENERATE_MEAN {
                return Err(Error::DegenerateMean(v));
            }
        }

        let exy_table = two_time_moments(q, f, s1, x, grid, st)?;
        let exz_table = if s1 == s2 {
            None
        } else {
            Some(two_time_moments(q, f, s2, x, grid, st)?)
        };
        let exz_table = exz_table.as_ref().unwrap_or(&exy_table);

        let t2 = t * t;
        let cxy = centered_double_sum(&exy_table, &mf.values, &m1.values, &wr, &w) / t2;
        let cxz = centered_double_sum(exz_table, &mf.values, &m2.values, &wr, &w) / t2;
        let zeros = vec![0.0; w.len()];
        let exy = centered_double_sum(&exy_table, &zeros, &zeros, &wr, &w) / t2;
        let exz = centered_double_sum(exz_table, &zeros, &zeros, &wr, &w) / t2;

        let correction = correlation_correction(y0, z0, cxy, cxz);
        let fair = correlation_zero(x0, y0, z0) + correction;
        Ok(FirstOrderParts {
            x0,
            y0,
            z0,
            cxy,
            cxz,
            exy,
            exz,
            correction,
            fair,
            richardson: None,
        })
    }
}

struct FirstOrderParts {
    x0: f64,
    y0: f64,
    z0: f64,
    cxy: f64,
    cxz: f64,
    exy: f64,
    exz: f64,
    correction: f64,
    fair: f64,
    richardson: Option<f64>,
}

fn check_rho(rho: &CorrelationCurve) -> Result<()> {
    let problems = rho.problems();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(problems.join("; ")))
    }
}

/// First-order propagation of the component errors through `x / sqrt(y z)`.
fn ratio_error(x: f64, y: f64, z: f64, ex: f64, ey: f64, ez: f64) -> f64 {
    let r = correlation_zero(x, y, z);
    r * (ex / x - 0.5 * ey / y - 0.5 * ez / z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{build_generator, RecurrenceGrid};
    use crate::model::{SemiMarkovModel, SojournLaw};

    fn engine(rates: [f64; 2]) -> PricingEngine {
        let model = SemiMarkovModel::new(
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![
                SojournLaw::Exponential { rate: rates[0] },
                SojournLaw::Exponential { rate: rates[1] },
            ],
        )
        .unwrap();
        let grid = RecurrenceGrid::covering(&model, 0.25).unwrap();
        PricingEngine::new(build_generator(&model, &grid).unwrap(), 0)
            .unwrap()
            .with_quadrature(QuadratureSpec::new(16).unwrap())
    }

    fn flat(s: f64) -> VolatilityField {
        VolatilityField::state_constant(vec![s, s])
    }

    #[test]
    fn variance_swap_examples() {
        let e = engine([1.0, 1.0]);
        let c = SwapContract::new(SwapKind::Variance, 1.0, 0.0, 0.04).unwrap();
        let r = e.price_variance_swap(&flat(0.2), &c, PricingMethod::Exact).unwrap();
        assert!(r.price.abs() < 1e-15);
        let c = SwapContract::new(SwapKind::Variance, 1.0, 0.05, 0.03).unwrap();
        for method in [PricingMethod::Exact, PricingMethod::FirstOrder] {
            let r = e.price_variance_swap(&flat(0.2), &c, method).unwrap();
            assert!((r.price - (-0.05f64).exp() * 0.01).abs() < 1e-15);
            assert!((r.price - 0.0095123).abs() < 1e-7);
        }
    }

    #[test]
    fn volatility_swap_examples() {
        let e = engine([1.0, 1.0]);
        let c = SwapContract::new(SwapKind::Volatility, 1.0, 0.0, 0.1).unwrap();
        let r = e.price_volatility_swap(&flat(0.2), &c, PricingMethod::Exact).unwrap();
        assert!((r.price - 0.1).abs() < 1e-12, "{}", r.price);
        let c = SwapContract::new(SwapKind::Volatility, 1.0, 0.03, 0.1).unwrap();
        let r = e.price_volatility_from_moments(&c, PricingMethod::Exact, 0.05, 0.0).unwrap();
        assert!((r.price - (-0.03f64).exp() * (0.05f64.sqrt() - 0.1)).abs() < 1e-15);
        assert_eq!(
            e.price_volatility_from_moments(&c, PricingMethod::Exact, 1e-13, 0.0),
            Err(Error::DegenerateMean(1e-13))
        );
        let r = e.price_volatility_from_moments(&c, PricingMethod::Exact, 0.04, 0.001).unwrap();
        assert!(r.expansion_warning);
    }

    #[test]
    fn covariance_swap_examples() {
        let e = engine([1.0, 1.0]);
        let c = SwapContract::new(SwapKind::Covariance, 1.0, 0.0, 0.0).unwrap();
        let r = e
            .price_covariance_swap(&flat(0.2), &flat(0.2), &CorrelationCurve::constant(1.0), &c, PricingMethod::Exact)
            .unwrap();
        assert!((r.price - 0.04).abs() < 1e-15);
        let c = SwapContract::new(SwapKind::Covariance, 1.0, 0.04, 0.01).unwrap();
        let s1 = VolatilityField::state_constant(vec![0.1, 0.3]);
        for method in [PricingMethod::Exact, PricingMethod::FirstOrder] {
            let r = e
                .price_covariance_swap(&s1, &flat(0.2), &CorrelationCurve::constant(0.0), &c, method)
                .unwrap();
            assert!((r.price + (-0.04f64).exp() * 0.01).abs() < 1e-16);
        }
    }

    #[test]
    fn correlation_swap_examples() {
        let e = engine([1.0, 2.0]);
        let c = SwapContract::new(SwapKind::Correlation, 1.0, 0.0, 0.0).unwrap();
        let s = VolatilityField::state_constant(vec![0.1, 0.3]);
        let one = CorrelationCurve::constant(1.0);
        let r = e.price_correlation_swap_zero_order(&s, &s, &one, &c, PricingMethod::Exact).unwrap();
        assert!((r.price - 1.0).abs() < 1e-12);
        // Identical assets: both cross covariances are Var{s^2_R}, so the
        // correction is -Var/Y0^2 rather than zero.
        let r = e.price_correlation_swap_first_order(&s, &s, &one, &c).unwrap();
        let s2 = e.field(&s, |v| v * v).unwrap();
        let grid = e.quadrature.grid(1.0, &[]).unwrap();
        let stats = realized_variance_stats(&e.generator, &s2, 0, &grid, e.stepper).unwrap();
        let expected = 1.0 - stats.raw_variance / (stats.mean * stats.mean);
        assert!((r.price - expected).abs() < 1e-12, "{} vs {expected}", r.price);
        assert!(r.price < 1.0);

        let rho = CorrelationCurve::constant(0.4);
        let c = SwapContract::new(SwapKind::Correlation, 1.0, 0.02, 0.1).unwrap();
        let target = (-0.02f64).exp() * 0.3;
        let r = e.price_correlation_swap_first_order(&flat(0.2), &flat(0.3), &rho, &c).unwrap();
        assert!((r.price - target).abs() < 1e-12);
        for method in [PricingMethod::Exact, PricingMethod::FirstOrder] {
            let r = e
                .price_correlation_swap_zero_order(&flat(0.2), &flat(0.3), &rho, &c, method)
                .unwrap();
            assert!((r.price - target).abs() < 1e-12);
        }
    }

    #[test]
    fn centered_and_uncentered_corrections_agree() {
        let e = engine([1.0, 2.0]);
        let c = SwapContract::new(SwapKind::Correlation, 1.0, 0.0, 0.0).unwrap();
        let s1 = VolatilityField::state_constant(vec![0.1, 0.3]);
        let s2 = VolatilityField::state_constant(vec![0.25, 0.15]);
        let rho = CorrelationCurve::piecewise(vec![0.5], vec![0.8, 0.3]).unwrap();
        let r = e.price_correlation_swap_first_order(&s1, &s2, &rho, &c).unwrap();
        let m = &r.intermediates;
        let (x0, y0, z0) = (
            m.covariance_integral.unwrap(),
            m.variance_integral_1.unwrap(),
            m.variance_integral_2.unwrap(),
        );
        let root = (y0 * z0).sqrt();
        let uncentered = 2.0 * x0 / root
            - (m.cross_moment_1.unwrap() / y0 + m.cross_moment_2.unwrap() / z0) / (2.0 * root);
        assert!((uncentered - r.fair_value).abs() < 1e-12);
        assert!((r.recompute_price().unwrap() - r.price).abs() < 1e-15);
    }

    #[test]
    fn contract_checks() {
        assert!(SwapContract::new(SwapKind::Variance, 0.0, 0.0, 0.0).is_err());
        assert!(SwapContract::new(SwapKind::Variance, 1.0, 0.0, 0.0)
            .unwrap()
            .with_notional(0.0)
            .is_err());
        let c = SwapContract::new(SwapKind::Correlation, 1.0, 0.0, 1.5).unwrap();
        assert_eq!(c.check().unwrap().len(), 1);
        let e = engine([1.0, 1.0]);
        assert!(e.price_variance_swap(&flat(0.2), &c, PricingMethod::Exact).is_err());
    }

    #[test]
    fn notional_scales_price_and_round_trips() {
        let e = engine([1.0, 2.0]);
        let s = VolatilityField::state_constant(vec![0.1, 0.3]);
        let c = SwapContract::new(SwapKind::Volatility, 1.0, 0.02, 0.1)
            .unwrap()
            .with_notional(-250.0)
            .unwrap();
        let r = e.price_volatility_swap(&s, &c, PricingMethod::Exact).unwrap();
        let unit = e
            .price_volatility_swap(&s, &SwapContract { notional: 1.0, ..c.clone() }, PricingMethod::Exact)
            .unwrap();
        assert!((r.price + 250.0 * unit.price).abs() < 1e-12);
        let json = serde_json::to_string(&r).unwrap();
        let back: PricingReport = serde_json::from_str(&json).unwrap();
        assert!((back.recompute_price().unwrap() - r.price).abs() < 1e-12);
    }
}
