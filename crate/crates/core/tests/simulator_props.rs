mod common;

use nalgebra::DVector;
use proptest::prelude::*;

use common::*;
use smswap::generator::{build_generator, expm_dense, GridFunction, RecurrenceGrid};
use smswap::model::{CorrelationCurve, SemiMarkovModel, SojournLaw};
use smswap::pricing::{SwapContract, SwapKind};
use smswap::simulator::{
    discrete_covariance, estimate_swap, path_rng, per_path, polarized_covariance, realized_covariance_path,
    sample_path, simulate_assets, McEstimate, Underlying,
};

#[test]
fn long_run_occupation_matches_renewal_limit() {
    let model = weibull_gamma();
    let means = [model.law(0).mean(), model.law(1).mean()];
    // the embedded chain alternates, so its stationary law is uniform
    let pi0 = means[0] / (means[0] + means[1]);
    let fractions = per_path(2000, 41, |_, rng| Ok(sample_path(&model, 0, 200.0, rng)?.occupation(0) / 200.0)).unwrap();
    let est = McEstimate::from_samples(&fractions, 41).unwrap();
    assert!((est.mean - pi0).abs() < 0.01, "{} vs {pi0}", est.mean);
}

#[test]
fn exponential_state_law_matches_dense_exponential() {
    let model = SemiMarkovModel::new(
        vec![vec![0.0, 0.6, 0.4], vec![0.5, 0.0, 0.5], vec![0.9, 0.1, 0.0]],
        vec![
            SojournLaw::Exponential { rate: 1.5 },
            SojournLaw::Exponential { rate: 2.5 },
            SojournLaw::Exponential { rate: 4.0 },
        ],
    )
    .unwrap();
    let q = build_generator(&model, &RecurrenceGrid::covering(&model, 0.05).unwrap()).unwrap();
    let n = 100_000;
    for t in [0.3, 1.0] {
        let e = expm_dense(&q, t).unwrap();
        let row = e.row(q.shape().index(0, 0)).transpose();
        let states = per_path(n, 42, |_, rng| Ok(sample_path(&model, 0, t, rng)?.state_at(t))).unwrap();
        for y in 0..3 {
            let indicator = GridFunction::from_fn(q.shape(), |x, _| if x == y { 1.0 } else { 0.0 });
            let p = row.dot(&DVector::from_column_slice(indicator.values()));
            let freq = states.iter().filter(|&&s| s == y).count() as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() < 3.0 * se, "t = {t}, state {y}: {freq} vs {p}");
        }
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn constant_coefficient_assets_have_gaussian_returns() {
    let model = exponential([1.0, 1.0]);
    let (sigma1, sigma2) = (vols(0.2, 0.2), vols(0.35, 0.35));
    let (rho, rate, horizon, n) = (0.6, 0.05, 10.0, 100_000);
    let mut rng = path_rng(43, 0);
    let path = sample_path(&model, 0, horizon, &mut rng).unwrap();
    let assets =
        simulate_assets(&path, &sigma1, &sigma2, &CorrelationCurve::constant(rho), rate, n, &mut rng).unwrap();
    let (r1, r2) = assets.log_returns();
    let corr = pearson(&r1, &r2);
    let se = (1.0 - rho * rho) / (n as f64).sqrt();
    assert!((corr - rho).abs() < 3.0 * se, "{corr}");
    for (r, s) in [(&r1, 0.2), (&r2, 0.35)] {
        let drift = r.iter().sum::<f64>() / horizon;
        let se = s / horizon.sqrt();
        assert!((drift - (rate - 0.5 * s * s)).abs() < 3.0 * se, "{drift}");
    }
}

#[test]
fn discrete_covariance_converges_at_root_n() {
    let model = weibull_gamma();
    let (sigma1, sigma2) = (vols(0.1, 0.3), vols(0.25, 0.15));
    let rho = CorrelationCurve::piecewise(vec![0.5], vec![0.8, 0.3]).unwrap();
    let steps = [250usize, 1000, 4000, 16000];
    let reps = 400;
    let errors = per_path(reps, 44, |_, rng| {
        let path = sample_path(&model, 0, 1.0, rng)?;
        let exact = realized_covariance_path(&path, &sigma1, &sigma2, &rho);
        steps
            .iter()
            .map(|&n| {
                let a = simulate_assets(&path, &sigma1, &sigma2, &rho, 0.02, n, rng)?;
                let (r1, r2) = a.log_returns();
                Ok(discrete_covariance(&r1, &r2, 1.0) - exact)
            })
            .collect::<smswap::error::Result<Vec<f64>>>()
    })
    .unwrap();
    let rms: Vec<f64> = (0..steps.len())
        .map(|k| (errors.iter().map(|e| e[k] * e[k]).sum::<f64>() / reps as f64).sqrt())
        .collect();
    let xs: Vec<f64> = steps.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = rms.iter().map(|v| v.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((slope + 0.5).abs() < 0.1, "slope {slope}, rms {rms:?}");

    let last: Vec<f64> = errors.iter().map(|e| e[3]).collect();
    let est = McEstimate::from_samples(&last, 44).unwrap();
    assert!(est.mean.abs() < 3.0 * est.std_error, "{est:?}");
}

#[test]
fn disjoint_seeds_agree_and_repeat_bit_for_bit() {
    let model = weibull_gamma();
    let sigma = vols(0.1, 0.3);
    let c = SwapContract::new(SwapKind::Variance, 1.0, 0.02, 0.03).unwrap();
    let run = |seed| estimate_swap(&model, 0, &c, Underlying::Single(&sigma), 20_000, seed).unwrap();
    let (a, b) = (run(45), run(46));
    let combined = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    assert!((a.mean - b.mean).abs() < 4.0 * combined);

    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| run(45));
    let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| run(45));
    assert_eq!(single, a);
    assert_eq!(many, a);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn polarization_holds_pathwise(
        seed in any::<u64>(),
        v in prop::array::uniform4(0.05..0.6f64),
        r1 in -1.0..1.0f64,
        r2 in -1.0..1.0f64,
        cut in 0.1..1.9f64,
    ) {
        let model = weibull_gamma();
        let path = sample_path(&model, 1, 2.0, &mut path_rng(seed, 0)).unwrap();
        let (s1, s2) = (vols(v[0], v[1]), vols(v[2], v[3]));
        let rho = CorrelationCurve::piecewise(vec![cut], vec![r1, r2]).unwrap();
        let direct = realized_covariance_path(&path, &s1, &s2, &rho);
        let polar = polarized_covariance(&path, &s1, &s2, &rho);
        prop_assert!((direct - polar).abs() < 1e-12);
    }
}
