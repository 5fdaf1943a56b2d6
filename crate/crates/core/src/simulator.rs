//! Monte Carlo on sampled Markov renewal paths.
//!
//! Path functionals are integrated exactly in time (per sojourn, Simpson on
//! pieces where the integrand is at most quadratic), so the only error in
//! the oracles is sampling noise. Each path `i` draws from its own ChaCha
//! stream `(seed, i)`; results are reduced in path order with pairwise sums,
//! which makes estimates independent of the thread count.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GeneratorMatrix, GridFunction, Stepper};
use crate::model::{CorrelationCurve, SemiMarkovModel, VolatilityField};
use crate::moments::{moment_curve, TimeGrid};
use crate::pricing::{SwapContract, SwapKind};

/// Upper bound on jumps before the horizon.
pub const MAX_JUMPS: usize = 10_000_000;

/// One realization of the Markov renewal process on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrpPath {
    /// `tau_0 = 0 < tau_1 < ... <= T`.
    pub jump_times: Vec<f64>,
    /// `states[n]` is occupied on `[tau_n, tau_{n+1})`.
    pub states: Vec<usize>,
    pub horizon: f64,
}

impl MrpPath {
    /// Jumps in `(0, T]`.
    pub fn n_jumps(&self) -> usize {
        self.jump_times.len() - 1
    }

    fn slot(&self, t: f64) -> usize {
        self.jump_times.partition_point(|&tau| tau <= t) - 1
    }

    pub fn state_at(&self, t: f64) -> usize {
        self.states[self.slot(t)]
    }

    /// Backward recurrence time `t - tau_{nu(t)}`.
    pub fn gamma_at(&self, t: f64) -> f64 {
        t - self.jump_times[self.slot(t)]
    }

    /// `(start, end, state)` covering `[0, T]`; a jump exactly at `T` adds no piece.
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, usize)> + '_ {
        let n = self.jump_times.len();
        (0..n).filter_map(move |k| {
            let start = self.jump_times[k];
            let end = if k + 1 < n { self.jump_times[k + 1] } else { self.horizon };
            (end > start).then_some((start, end, self.states[k]))
        })
    }

    /// Time spent in `state` during `[0, T]`.
    pub fn occupation(&self, state: usize) -> f64 {
        self.segments()
            .filter(|s| s.2 == state)
            .map(|(a, b, _)| b - a)
            .sum()
    }

    pub fn problems(&self, n_states: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.jump_times.first() != Some(&0.0) {
            out.push("path must start at time 0".into());
        }
        if self.jump_times.len() != self.states.len() {
            out.push("one state per jump time required".into());
        }
        if self.jump_times.windows(2).any(|w| !(w[0] < w[1])) {
            out.push("jump times must be strictly increasing".into());
        }
        if self.jump_times.last().is_some_and(|&t| t > self.horizon) {
            out.push("jump after the horizon".into());
        }
        if self.states.iter().any(|&x| x >= n_states) {
            out.push("state out of range".into());
        }
        out
    }
}

/// Alternates sojourn draws from `G_x` and transitions from `P(x, .)` until
/// the horizon is passed. The initial backward recurrence time is zero.
pub fn sample_path<R: Rng + ?Sized>(
    model: &SemiMarkovModel,
    initial_state: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<MrpPath> {
    if initial_state >= model.n_states() {
        return Err(Error::InvalidParameter(format!("initial state {initial_state} out of range")));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
    }
    let mut jump_times = vec![0.0];
    let mut states = vec![initial_state];
    let (mut t, mut x) = (0.0, initial_state);
    loop {
        let next = t + model.law(x).sample(rng);
        if next > horizon {
            break;
        }
        if jump_times.len() > MAX_JUMPS {
            return Err(Error::PathExplosion(MAX_JUMPS));
        }
        x = model.sample_next_state(x, rng);
        t = next;
        jump_times.push(t);
        states.push(x);
    }
    Ok(MrpPath {
        jump_times,
        states,
        horizon,
    })
}

/// `int_0^T rho_t g(x_t, gamma(t)) dt`, with Simpson on every piece between
/// consecutive jumps, `gamma` knots and `rho` breakpoints.
pub fn path_integral(
    path: &MrpPath,
    knots: &[&[f64]],
    rho: Option<&CorrelationCurve>,
    g: impl Fn(usize, f64) -> f64,
) -> f64 {
    let mut total = 0.0;
    let mut cuts = Vec::new();
    for (start, end, x) in path.segments() {
        let len = end - start;
        cuts.clear();
        cuts.push(0.0);
        for ks in knots {
            cuts.extend(ks.iter().copied().filter(|&k| k > 0.0 && k < len));
        }
        if let Some(r) = rho {
            cuts.extend(r.breakpoints_within(start, end).into_iter().map(|b| b - start));
        }
        cuts.push(len);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let mid = 0.5 * (a + b);
            let weight = rho.map_or(1.0, |r| r.value(start + mid));
            if weight == 0.0 {
                continue;
            }
            total += weight * (b - a) / 6.0 * (g(x, a) + 4.0 * g(x, mid) + g(x, b));
        }
    }
    total
}

/// `sigma^2_R = (1/T) int_0^T sigma^2(x_t, gamma(t)) dt`.
pub fn realized_variance_path(path: &MrpPath, sigma: &VolatilityField) -> f64 {
    path_integral(path, &[sigma.knots()], None, |x, g| sigma.eval(x, g).powi(2)) / path.horizon
}

/// `Cov_R = (1/T) int_0^T rho_t sigma1 sigma2 dt`.
pub fn realized_covariance_path(
    path: &MrpPath,
    sigma1: &VolatilityField,
    sigma2: &VolatilityField,
    rho: &CorrelationCurve,
) -> f64 {
    path_integral(path, &[sigma1.knots(), sigma2.knots()], Some(rho), |x, g| {
        sigma1.eval(x, g) * sigma2.eval(x, g)
    }) / path.horizon
}

/// Realized variance of `a log S1 + b log S2`, i.e. its quadratic variation over `T`.
pub fn realized_combination_variance(
    path: &MrpPath,
    sigma1: &VolatilityField,
    sigma2: &VolatilityField,
    rho: &CorrelationCurve,
    a: f64,
    b: f64,
) -> f64 {
    let knots = [sigma1.knots(), sigma2.knots()];
    let squares = path_integral(path, &knots, None, |x, g| {
        (a * sigma1.eval(x, g)).powi(2) + (b * sigma2.eval(x, g)).powi(2)
    });
    let cross = path_integral(path, &knots, Some(rho), |x, g| {
        2.0 * a * b * sigma1.eval(x, g) * sigma2.eval(x, g)
    });
    (squares + cross) / path.horizon
}

/// `(1/4)[sigma^2_R(log S1 + log S2) - sigma^2_R(log S1 - log S2)]`.
pub fn polarized_covariance(
    path: &MrpPath,
    sigma1: &VolatilityField,
    sigma2: &VolatilityField,
    rho: &CorrelationCurve,
) -> f64 {
    0.25 * (realized_combination_variance(path, sigma1, sigma2, rho, 1.0, 1.0)
        - realized_combination_variance(path, sigma1, sigma2, rho, 1.0, -1.0))
}

/// Log-prices of two assets on a uniform grid, starting at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetPaths {
    pub times: Vec<f64>,
    pub log_s1: Vec<f64>,
    pub log_s2: Vec<f64>,
}

impl AssetPaths {
    pub fn log_returns(&self) -> (Vec<f64>, Vec<f64>) {
        let diff = |v: &[f64]| v.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>();
        (diff(&self.log_s1), diff(&self.log_s2))
    }
}

/// Exact Gaussian log-increments per step with volatilities frozen at the
/// left endpoint and correlation equal to the step average of `rho`.
pub fn simulate_assets<R: Rng + ?Sized>(
    path: &MrpPath,
    sigma1: &VolatilityField,
    sigma2: &VolatilityField,
    rho: &CorrelationCurve,
    rate: f64,
    n_steps: usize,
    rng: &mut R,
) -> Result<AssetPaths> {
    if n_steps == 0 {
        return Err(Error::InvalidParameter("need at least one time step".into()));
    }
    let horizon = path.horizon;
    let dt = horizon / n_steps as f64;
    let sq = dt.sqrt();
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut s1 = Vec::with_capacity(n_steps + 1);
    let mut s2 = Vec::with_capacity(n_steps + 1);
    times.push(0.0);
    s1.push(0.0);
    s2.push(0.0);
    for k in 0..n_steps {
        let t0 = k as f64 * dt;
        let t1 = if k + 1 == n_steps { horizon } else { (k + 1) as f64 * dt };
        let r = rho.integral(t0, t1) / (t1 - t0);
        if !(r.abs() <= 1.0) {
            return Err(Error::CorrelationOutOfRange(r));
        }
        let (x, g) = (path.state_at(t0), path.gamma_at(t0));
        let (v1, v2) = (sigma1.eval(x, g), sigma2.eval(x, g));
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let w2 = r * z1 + (1.0 - r * r).sqrt() * z2;
        s1.push(s1[k] + (rate - 0.5 * v1 * v1) * dt + v1 * sq * z1);
        s2.push(s2[k] + (rate - 0.5 * v2 * v2) * dt + v2 * sq * w2);
        times.push(t1);
    }
    Ok(AssetPaths {
        times,
        log_s1: s1,
        log_s2: s2,
    })
}

/// `Cov_n = n / ((n - 1) T) sum R1_i R2_i` over log-returns.
pub fn discrete_covariance(r1: &[f64], r2: &[f64], horizon: f64) -> f64 {
    let n = r1.len() as f64;
    let s: Vec<f64> = r1.iter().zip(r2).map(|(a, b)| a * b).collect();
    n / ((n - 1.0) * horizon) * pairwise_sum(&s)
}

pub fn discrete_variance(r: &[f64], horizon: f64) -> f64 {
    discrete_covariance(r, r, horizon)
}

pub fn discrete_correlation(r1: &[f64], r2: &[f64], horizon: f64) -> f64 {
    discrete_covariance(r1, r2, horizon)
        / (discrete_variance(r1, horizon).sqrt() * discrete_variance(r2, horizon).sqrt())
}

/// Sum in a fixed binary tree, independent of how the values were produced.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Sample mean of a per-path quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Unbiased sample variance of the per-path values.
    pub sample_variance: f64,
}

impl McEstimate {
    pub fn from_samples(samples: &[f64], seed: u64) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 samples, got {n}")));
        }
        let mean = pairwise_sum(samples) / n as f64;
        let dev: Vec<f64> = samples.iter().map(|s| (s - mean).powi(2)).collect();
        let var = pairwise_sum(&dev) / (n - 1) as f64;
        Ok(Self {
            mean,
            std_error: (var / n as f64).sqrt(),
            n_paths: n,
            seed,
            sample_variance: var,
        })
    }

    /// `(value - mean) / std_error`; zero when both the gap and the error vanish.
    pub fn z_score(&self, value: f64) -> f64 {
        let gap = value - self.mean;
        if self.std_error == 0.0 {
            if gap == 0.0 {
                0.0
            } else {
                gap.signum() * f64::INFINITY
            }
        } else {
            gap / self.std_error
        }
    }
}

/// Sample variance of a per-path quantity with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub variance: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

impl VarianceEstimate {
    /// Standard error from the fourth central moment, `sqrt((m4 - s^4) / n)`.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        let est = McEstimate::from_samples(samples, 0)?;
        let n = samples.len() as f64;
        let m4 = pairwise_sum(&samples.iter().map(|s| (s - est.mean).powi(4)).collect::<Vec<_>>()) / n;
        let s2 = est.sample_variance;
        Ok(Self {
            variance: s2,
            std_error: ((m4 - s2 * s2).max(0.0) / n).sqrt(),
            n_paths: samples.len(),
        })
    }

    pub fn z_score(&self, value: f64) -> f64 {
        let gap = value - self.variance;
        if self.std_error == 0.0 {
            if gap == 0.0 {
                0.0
            } else {
                gap.signum() * f64::INFINITY
            }
        } else {
            gap / self.std_error
        }
    }
}

/// The RNG for path `index` under `seed`.
pub fn path_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Runs `f` on `n_paths` independent streams in parallel, results in path order.
pub fn per_path<T, F>(n_paths: usize, seed: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> Result<T> + Sync,
{
    (0..n_paths)
        .into_par_iter()
        .map(|i| f(i, &mut path_rng(seed, i)))
        .collect()
}

/// Volatility inputs of a swap.
#[derive(Debug, Clone, Copy)]
pub enum Underlying<'a> {
    Single(&'a VolatilityField),
    Pair {
        sigma1: &'a VolatilityField,
        sigma2: &'a VolatilityField,
        rho: &'a CorrelationCurve,
    },
}

/// Per-path realized functional underlying `kind`.
pub fn realized_functional(path: &MrpPath, kind: SwapKind, underlying: Underlying<'_>) -> Result<f64> {
    match (kind, underlying) {
        (SwapKind::Variance, Underlying::Single(s)) => Ok(realized_variance_path(path, s)),
        (SwapKind::Volatility, Underlying::Single(s)) => Ok(realized_variance_path(path, s).sqrt()),
        (SwapKind::Covariance, Underlying::Pair { sigma1, sigma2, rho }) => {
            Ok(realized_covariance_path(path, sigma1, sigma2, rho))
        }
        (SwapKind::Correlation, Underlying::Pair { sigma1, sigma2, rho }) => {
            let cov = realized_covariance_path(path, sigma1, sigma2, rho);
            let v1 = realized_variance_path(path, sigma1);
            let v2 = realized_variance_path(path, sigma2);
            Ok(cov / (v1 * v2).sqrt())
        }
        (kind, _) => Err(Error::InvalidParameter(format!(
            "{} swap needs {}",
            kind.label(),
            if matches!(kind, SwapKind::Variance | SwapKind::Volatility) {
                "one volatility field"
            } else {
                "two volatility fields and a correlation"
            }
        ))),
    }
}

/// Per-path samples of the realized functional over `[0, T]`.
pub fn simulate_functional(
    model: &SemiMarkovModel,
    initial_state: usize,
    kind: SwapKind,
    underlying: Underlying<'_>,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    per_path(n_paths, seed, |_, rng| {
        let path = sample_path(model, initial_state, horizon, rng)?;
        realized_functional(&path, kind, underlying)
    })
}

/// Discounted payoff `N e^{-rT} (functional - K)` averaged over paths.
pub fn estimate_swap(
    model: &SemiMarkovModel,
    initial_state: usize,
    contract: &SwapContract,
    underlying: Underlying<'_>,
    n_paths: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_paths < 1000 {
        return Err(Error::InvalidParameter(format!("at least 1000 paths required, got {n_paths}")));
    }
    contract.check()?;
    let scale = contract.notional * contract.discount();
    let samples = simulate_functional(model, initial_state, contract.kind, underlying, contract.maturity, n_paths, seed)?;
    let payoffs: Vec<f64> = samples.iter().map(|v| scale * (v - contract.strike)).collect();
    McEstimate::from_samples(&payoffs, seed)
}

/// `int_0^gamma f(x, u) du` for the linear interpolant of a grid function,
/// flat beyond the last node.
struct CumulativeIntegral {
    f: GridFunction,
    cumulative: Vec<Vec<f64>>,
}

impl CumulativeIntegral {
    fn new(f: GridFunction) -> Self {
        let shape = f.shape();
        let h = shape.step;
        let cumulative = (0..shape.n_states)
            .map(|x| {
                let mut c = vec![0.0; shape.n_gamma];
                for j in 1..shape.n_gamma {
                    c[j] = c[j - 1] + 0.5 * h * (f.at(x, j - 1) + f.at(x, j));
                }
                c
            })
            .collect();
        Self { f, cumulative }
    }

    fn integral(&self, x: usize, gamma: f64) -> f64 {
        let shape = self.f.shape();
        let h = shape.step;
        let last = shape.n_gamma - 1;
        let j = ((gamma / h).floor() as usize).min(last);
        let gj = j as f64 * h;
        let tail = if j == last {
            (gamma - gj) * self.f.at(x, last)
        } else {
            0.5 * (gamma - gj) * (self.f.at(x, j) + self.f.interpolate(x, gamma))
        };
        self.cumulative[x][j] + tail
    }
}

/// Diagnostic for one martingale checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointZ {
    pub time: f64,
    pub mean: f64,
    pub std_error: f64,
    pub z: f64,
}

/// `m_t = f(x_t, gamma(t)) - f(x_0, 0) - int_0^t Qf ds` at each checkpoint of a path.
fn martingale_values(path: &MrpPath, f: &GridFunction, qf: &CumulativeIntegral, checkpoints: &[f64]) -> Vec<f64> {
    let x0 = path.states[0];
    let f0 = f.at_origin(x0);
    checkpoints
        .iter()
        .map(|&t| {
            let mut comp = 0.0;
            for (a, b, x) in path.segments() {
                if a >= t {
                    break;
                }
                comp += qf.integral(x, b.min(t) - a);
            }
            f.interpolate(path.state_at(t), path.gamma_at(t)) - f0 - comp
        })
        .collect()
}

/// Sample mean of `m^f_t` over paths, scaled by its standard error.
pub fn martingale_check(
    model: &SemiMarkovModel,
    q: &GeneratorMatrix,
    initial_state: usize,
    f: &GridFunction,
    checkpoints: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<Vec<CheckpointZ>> {
    let horizon = checkpoints.iter().copied().fold(0.0, f64::max);
    if checkpoints.is_empty() || checkpoints.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidParameter("checkpoints must be positive".into()));
    }
    let qf = CumulativeIntegral::new(q.apply(f)?);
    let rows = per_path(n_paths, seed, |_, rng| {
        let path = sample_path(model, initial_state, horizon, rng)?;
        Ok(martingale_values(&path, f, &qf, checkpoints))
    })?;
    checkpoints
        .iter()
        .enumerate()
        .map(|(k, &time)| {
            let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            let est = McEstimate::from_samples(&col, seed)?;
            Ok(CheckpointZ {
                time,
                mean: est.mean,
                std_error: est.std_error,
                z: -est.z_score(0.0),
            })
        })
        .collect()
}

/// Sample variance of `m^{sigma^2}_T` against `int_0^T e^{sQ}[Q sigma^4 - 2 sigma^2 Q sigma^2](x0, 0) ds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticVariationCheck {
    pub analytic: f64,
    pub sample: VarianceEstimate,
    pub z: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn quadratic_variation_check(
    model: &SemiMarkovModel,
    q: &GeneratorMatrix,
    initial_state: usize,
    sigma2: &GridFunction,
    horizon: f64,
    time_grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<QuadraticVariationCheck> {
    let sigma4 = sigma2.map(|v| v * v);
    let q2 = q.apply(sigma2)?;
    let q4 = q.apply(&sigma4)?;
    let density = q4
        .values()
        .iter()
        .zip(sigma2.values().iter().zip(q2.values()))
        .map(|(a, (s, b))| a - 2.0 * s * b)
        .collect();
    let density = GridFunction::from_values(q.shape(), density)?;
    let curve = moment_curve(q, &density, initial_state, time_grid, Stepper::Rk4)?;
    let analytic = curve.weighted_sum(&time_grid.weights());

    let qf = CumulativeIntegral::new(q2);
    let samples = per_path(n_paths, seed, |_, rng| {
        let path = sample_path(model, initial_state, horizon, rng)?;
        Ok(martingale_values(&path, sigma2, &qf, &[horizon])[0])
    })?;
    let sample = VarianceEstimate::from_samples(&samples)?;
    let z = sample.z_score(analytic);
    Ok(QuadraticVariationCheck { analytic, sample, z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SojournLaw;

    fn single(law: SojournLaw) -> SemiMarkovModel {
        SemiMarkovModel::new(vec![vec![1.0]], vec![law]).unwrap()
    }

    fn fixed_path(times: &[f64], states: &[usize], horizon: f64) -> MrpPath {
        MrpPath {
            jump_times: times.to_vec(),
            states: states.to_vec(),
            horizon,
        }
    }

    #[test]
    fn deterministic_path() {
        let m = single(SojournLaw::Deterministic { duration: 0.5 });
        let p = sample_path(&m, 0, 1.0, &mut path_rng(1, 0)).unwrap();
        assert_eq!(p.jump_times, vec![0.0, 0.5, 1.0]);
        assert_eq!(p.n_jumps(), 2);
        assert!(p.problems(1).is_empty());
        assert_eq!(p.segments().count(), 2);
        assert_eq!(p.gamma_at(0.75), 0.25);
    }

    #[test]
    fn poisson_jump_count() {
        let m = single(SojournLaw::Exponential { rate: 3.0 });
        let counts = per_path(100_000, 7, |_, rng| Ok(sample_path(&m, 0, 1.0, rng)?.n_jumps() as f64)).unwrap();
        let est = McEstimate::from_samples(&counts, 7).unwrap();
        assert!(est.z_score(3.0).abs() < 3.0, "{est:?}");
    }

    #[test]
    fn path_functionals_on_fixed_paths() {
        let s = VolatilityField::state_constant(vec![0.2]);
        let p = fixed_path(&[0.0, 0.3, 0.9], &[0, 0, 0], 1.0);
        assert!((realized_variance_path(&p, &s) - 0.04).abs() < 1e-16);

        let s = VolatilityField::state_constant(vec![0.1, 0.3]);
        let p = fixed_path(&[0.0, 0.4], &[0, 1], 1.0);
        let expected = (0.4 * 0.01 + 0.6 * 0.09) / 1.0;
        assert!((realized_variance_path(&p, &s) - expected).abs() < 1e-16);

        // sigma = 0.1 + 0.2 gamma on one sojourn of length 0.8
        let s = VolatilityField::gridded(vec![0.0, 1.0], vec![vec![0.1, 0.3]]).unwrap();
        let p = fixed_path(&[0.0], &[0], 0.8);
        let (a, b, d): (f64, f64, f64) = (0.1, 0.2, 0.8);
        let exact = (a * a * d + a * b * d * d + b * b * d.powi(3) / 3.0) / d;
        assert!((realized_variance_path(&p, &s) - exact).abs() < 1e-12);
    }

    #[test]
    fn covariance_functionals() {
        let s1 = VolatilityField::state_constant(vec![0.1, 0.3]);
        let s2 = VolatilityField::gridded(vec![0.0, 0.5], vec![vec![0.2, 0.4], vec![0.3, 0.1]]).unwrap();
        let p = fixed_path(&[0.0, 0.35, 0.8], &[0, 1, 0], 1.0);
        let one = CorrelationCurve::constant(1.0);
        let cov = realized_covariance_path(&p, &s1, &s1, &one);
        assert!((cov - realized_variance_path(&p, &s1)).abs() < 1e-16);
        assert_eq!(realized_covariance_path(&p, &s1, &s2, &CorrelationCurve::constant(0.0)), 0.0);
        let rho = CorrelationCurve::piecewise(vec![0.5], vec![0.8, 0.3]).unwrap();
        let cov = realized_covariance_path(&p, &s1, &s2, &rho);
        assert!((polarized_covariance(&p, &s1, &s2, &rho) - cov).abs() < 1e-12);
    }

    #[test]
    fn discrete_estimators() {
        let r1 = [0.1, -0.2, 0.05, 0.0];
        let r2 = [0.05, -0.1, 0.02, 0.01];
        let cov = discrete_covariance(&r1, &r2, 2.0);
        assert!((cov - 4.0 / 6.0 * (0.005 + 0.02 + 0.001)).abs() < 1e-15);
        let corr = discrete_correlation(&r1, &r1, 2.0);
        assert!((corr - 1.0).abs() < 1e-15);
    }

    #[test]
    fn estimates_are_reproducible() {
        let m = single(SojournLaw::Exponential { rate: 2.0 });
        let s = VolatilityField::state_constant(vec![0.2]);
        let c = SwapContract::new(SwapKind::Variance, 1.0, 0.0, 0.04).unwrap();
        let a = estimate_swap(&m, 0, &c, Underlying::Single(&s), 2000, 3).unwrap();
        let b = estimate_swap(&m, 0, &c, Underlying::Single(&s), 2000, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.mean.abs() < 1e-16);
        assert!(a.std_error < 1e-17);
        assert!(estimate_swap(&m, 0, &c, Underlying::Single(&s), 999, 3).is_err());
    }

    #[test]
    fn constant_function_is_a_null_martingale() {
        use crate::generator::{build_generator, RecurrenceGrid};
        let m = SemiMarkovModel::new(
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![
                SojournLaw::Exponential { rate: 1.0 },
                SojournLaw::Exponential { rate: 1.0 },
            ],
        )
        .unwrap();
        let q = build_generator(&m, &RecurrenceGrid::covering(&m, 0.1).unwrap()).unwrap();
        let f = GridFunction::constant(q.shape(), 2.5);
        let z = martingale_check(&m, &q, 0, &f, &[0.5, 1.0], 100, 1).unwrap();
        for c in z {
            assert_eq!(c.mean, 0.0);
            assert_eq!(c.z, 0.0);
        }
    }

    #[test]
    fn assets_reject_bad_correlation() {
        let p = fixed_path(&[0.0], &[0], 1.0);
        let s = VolatilityField::state_constant(vec![0.2]);
        let bad = CorrelationCurve::Constant(1.5);
        assert!(matches!(
            simulate_assets(&p, &s, &s, &bad, 0.0, 10, &mut path_rng(0, 0)),
            Err(Error::CorrelationOutOfRange(_))
        ));
    }
}
