mod common;

use proptest::prelude::*;

use common::*;
use smswap::model::{CorrelationCurve, VolatilityField};
use smswap::moments::QuadratureSpec;
use smswap::pricing::{PricingEngine, PricingMethod, PricingReport, SwapContract, SwapKind};
use smswap::simulator::{estimate_swap, simulate_functional, McEstimate, Underlying};

fn engine() -> PricingEngine {
    PricingEngine::new(generator(&weibull_gamma(), 0.02), 0)
        .unwrap()
        .with_quadrature(QuadratureSpec::new(16).unwrap())
}

fn price(
    e: &PricingEngine,
    kind: SwapKind,
    s1: &VolatilityField,
    s2: &VolatilityField,
    rho: &CorrelationCurve,
    c: &SwapContract,
    method: PricingMethod,
) -> PricingReport {
    match kind {
        SwapKind::Variance => e.price_variance_swap(s1, c, method),
        SwapKind::Volatility => e.price_volatility_swap(s1, c, method),
        SwapKind::Covariance => e.price_covariance_swap(s1, s2, rho, c, method),
        SwapKind::Correlation => e.price_correlation_swap_zero_order(s1, s2, rho, c, method),
    }
    .unwrap()
}

fn kinds() -> impl Strategy<Value = SwapKind> {
    prop_oneof![
        Just(SwapKind::Variance),
        Just(SwapKind::Volatility),
        Just(SwapKind::Covariance),
        Just(SwapKind::Correlation),
    ]
}

fn methods() -> impl Strategy<Value = PricingMethod> {
    prop_oneof![Just(PricingMethod::Exact), Just(PricingMethod::FirstOrder)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn strike_enters_linearly(
        kind in kinds(),
        method in methods(),
        v in prop::array::uniform4(0.05..0.5f64),
        rho in -1.0..1.0f64,
        t in 0.1..2.0f64,
        r in 0.0..0.1f64,
        k1 in -1.0..1.0f64,
        k2 in -1.0..1.0f64,
    ) {
        let e = engine();
        let (s1, s2) = (vols(v[0], v[1]), vols(v[2], v[3]));
        let rho = CorrelationCurve::constant(rho);
        let p = |k| price(&e, kind, &s1, &s2, &rho, &SwapContract::new(kind, t, r, k).unwrap(), method).price;
        let gap = p(k1) - p(k2);
        prop_assert!((gap + (-r * t).exp() * (k1 - k2)).abs() < 1e-14);
    }

    #[test]
    fn covariance_is_symmetric_and_correlation_bounded(
        v in prop::array::uniform4(0.05..0.5f64),
        r1 in -1.0..1.0f64,
        r2 in -1.0..1.0f64,
        method in methods(),
    ) {
        let e = engine();
        let (s1, s2) = (vols(v[0], v[1]), vols(v[2], v[3]));
        let rho = CorrelationCurve::piecewise(vec![0.5], vec![r1, r2]).unwrap();
        let c = SwapContract::new(SwapKind::Covariance, 1.0, 0.01, 0.002).unwrap();
        let a = e.price_covariance_swap(&s1, &s2, &rho, &c, method).unwrap();
        let b = e.price_covariance_swap(&s2, &s1, &rho, &c, method).unwrap();
        prop_assert_eq!(a.price, b.price);
        let c = SwapContract::new(SwapKind::Correlation, 1.0, 0.0, 0.0).unwrap();
        let z = e.price_correlation_swap_zero_order(&s1, &s2, &rho, &c, PricingMethod::Exact).unwrap();
        prop_assert!(z.fair_value.abs() <= 1.0 + 1e-8);
    }
}

#[test]
fn discounting_scales_the_whole_payoff() {
    let e = engine();
    let (s1, s2) = (vols(0.1, 0.3), vols(0.25, 0.15));
    let rho = CorrelationCurve::constant(0.4);
    for kind in [SwapKind::Variance, SwapKind::Volatility, SwapKind::Covariance, SwapKind::Correlation] {
        let t = 0.75;
        let at = |r: f64| price(&e, kind, &s1, &s2, &rho, &SwapContract::new(kind, t, r, 0.01).unwrap(), PricingMethod::Exact).price;
        let base = at(0.0);
        for r in [0.01, 0.04, 0.1] {
            let expected = (-r * t).exp() * base;
            assert!((at(r) - expected).abs() <= 1e-15 * base.abs().max(1e-3), "{kind:?} r = {r}");
        }
    }
}

#[test]
fn first_order_gap_is_quadratic_in_maturity() {
    let e = PricingEngine::new(generator(&exponential([1.0, 2.0]), 0.01), 0).unwrap();
    let sigma = vols(0.1, 0.3);
    let gap = |t: f64| {
        let c = SwapContract::new(SwapKind::Variance, t, 0.0, 0.0).unwrap();
        (e.price_variance_swap(&sigma, &c, PricingMethod::Exact).unwrap().price
            - e.price_variance_swap(&sigma, &c, PricingMethod::FirstOrder).unwrap().price)
            .abs()
    };
    let scaled: Vec<f64> = [0.4, 0.2, 0.1, 0.05].iter().map(|&t| gap(t) / (t * t)).collect();
    let (lo, hi) = scaled.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(hi / lo < 1.5, "{scaled:?}");
}

#[test]
fn volatility_swap_within_expansion_budget() {
    let model = exponential([1.0, 1.0]);
    let e = PricingEngine::new(generator(&model, 0.01), 0).unwrap();
    let sigma = vols(0.1, 0.3);
    let c = SwapContract::new(SwapKind::Volatility, 1.0, 0.0, 0.0).unwrap();
    let report = e.price_volatility_swap(&sigma, &c, PricingMethod::Exact).unwrap();
    let m = &report.intermediates;
    let (mean, var) = (m.expected_variance.unwrap(), m.variance_of_variance.unwrap());
    let samples =
        simulate_functional(&model, 0, SwapKind::Volatility, Underlying::Single(&sigma), 1.0, 100_000, 31).unwrap();
    let mc = McEstimate::from_samples(&samples, 31).unwrap();
    assert!(mc.mean <= mean.sqrt());
    let budget = (3.0 * mc.std_error).max(2.0 * var * var / mean.powf(2.5));
    assert!((report.price - mc.mean).abs() <= budget, "{} vs {mc:?}, budget {budget}", report.price);
    assert!((report.price - mc.mean).abs() < (mean.sqrt() - mc.mean).abs());
}

#[test]
fn zero_order_correlation_with_unequal_vols() {
    let model = exponential([1.0, 1.0]);
    let e = PricingEngine::new(generator(&model, 0.01), 0).unwrap();
    let (s1, s2) = (vols(0.1, 0.3), vols(0.25, 0.15));
    let rho = CorrelationCurve::constant(0.5);
    let c = SwapContract::new(SwapKind::Correlation, 1.0, 0.0, 0.0).unwrap();
    let zero = e.price_correlation_swap_zero_order(&s1, &s2, &rho, &c, PricingMethod::Exact).unwrap();
    assert!(zero.price > 0.0 && zero.price <= 0.5);
    let first = e.price_correlation_swap_first_order(&s1, &s2, &rho, &c).unwrap();
    let correction = first.intermediates.correction.unwrap();
    let under = Underlying::Pair {
        sigma1: &s1,
        sigma2: &s2,
        rho: &rho,
    };
    let mc = estimate_swap(&model, 0, &c, under, 100_000, 32).unwrap();
    let gap = (zero.price - mc.mean).abs();
    assert!(gap <= correction.abs(), "gap {gap}, correction {correction}, MC {mc:?}");
}

#[test]
fn covariance_swap_matches_sampling_with_switching_correlation() {
    let model = exponential([1.0, 2.0]);
    let e = PricingEngine::new(generator(&model, 0.01), 0).unwrap();
    let (s1, s2) = (vols(0.1, 0.3), vols(0.25, 0.15));
    let rho = CorrelationCurve::piecewise(vec![0.5], vec![0.8, 0.3]).unwrap();
    let c = SwapContract::new(SwapKind::Covariance, 1.0, 0.03, 0.02).unwrap();
    let analytic = e.price_covariance_swap(&s1, &s2, &rho, &c, PricingMethod::Exact).unwrap().price;
    let under = Underlying::Pair {
        sigma1: &s1,
        sigma2: &s2,
        rho: &rho,
    };
    let mc = estimate_swap(&model, 0, &c, under, 100_000, 33).unwrap();
    assert!(mc.z_score(analytic).abs() < 3.0, "{analytic} vs {mc:?}");
}

#[test]
fn reports_round_trip_through_json() {
    let e = engine();
    let (s1, s2) = (vols(0.1, 0.3), vols(0.25, 0.15));
    let rho = CorrelationCurve::piecewise(vec![0.3], vec![0.8, 0.3]).unwrap();
    let mut reports = Vec::new();
    for kind in [SwapKind::Variance, SwapKind::Volatility, SwapKind::Covariance, SwapKind::Correlation] {
        for method in [PricingMethod::Exact, PricingMethod::FirstOrder] {
            let c = SwapContract::new(kind, 0.8, 0.02, 0.05).unwrap().with_notional(1e4).unwrap();
            reports.push(price(&e, kind, &s1, &s2, &rho, &c, method));
        }
    }
    let c = SwapContract::new(SwapKind::Correlation, 0.8, 0.02, 0.05).unwrap();
    reports.push(e.price_correlation_swap_first_order(&s1, &s2, &rho, &c).unwrap());
    for r in reports {
        let back: PricingReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert!((back.recompute_price().unwrap() - r.price).abs() <= 1e-12 * r.price.abs().max(1.0));
    }
}

