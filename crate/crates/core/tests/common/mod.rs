#![allow(dead_code)]

use smswap::generator::{build_generator, GeneratorMatrix, RecurrenceGrid};
use smswap::model::{SemiMarkovModel, SojournLaw, VolatilityField};

/// Recurrence-time step used for the Weibull/Gamma benchmark.
pub const BENCH_STEP: f64 = 0.00125;

pub fn swap_matrix() -> Vec<Vec<f64>> {
    vec![vec![0.0, 1.0], vec![1.0, 0.0]]
}

/// Two states alternating with Weibull(2, 0.5) and Gamma(2, 0.3) sojourns.
pub fn weibull_gamma() -> SemiMarkovModel {
    SemiMarkovModel::new(
        swap_matrix(),
        vec![
            SojournLaw::Weibull { shape: 2.0, scale: 0.5 },
            SojournLaw::Gamma { shape: 2.0, scale: 0.3 },
        ],
    )
    .unwrap()
}

pub fn exponential(rates: [f64; 2]) -> SemiMarkovModel {
    SemiMarkovModel::new(
        swap_matrix(),
        vec![
            SojournLaw::Exponential { rate: rates[0] },
            SojournLaw::Exponential { rate: rates[1] },
        ],
    )
    .unwrap()
}

pub fn generator(model: &SemiMarkovModel, step: f64) -> GeneratorMatrix {
    build_generator(model, &RecurrenceGrid::covering(model, step).unwrap()).unwrap()
}

pub fn vols(a: f64, b: f64) -> VolatilityField {
    VolatilityField::state_constant(vec![a, b])
}

/// `[e^{tQ} f](x0)` for the two-state chain with exit rates `a`, `b`.
pub fn ctmc_expectation(a: f64, b: f64, f: [f64; 2], x0: usize, t: f64) -> f64 {
    let e = (-(a + b) * t).exp();
    let s = a + b;
    let p = [
        [(b + a * e) / s, (a - a * e) / s],
        [(b - b * e) / s, (a + b * e) / s],
    ];
    p[x0][0] * f[0] + p[x0][1] * f[1]
}
