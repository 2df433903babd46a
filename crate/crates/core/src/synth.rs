//! Synthetic partially linear designs with known conditional quantiles,
//! used by the coverage harness and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::dataio::{ControlColumn, ControlData, ControlTerm, Dataset, ModelSpec};

/// Data-generating process. All share `W ~ U(0, 1)`, a control
/// `X ~ N(0, 1)` entering with coefficient `0.5`, and `e ~ U(-1/2, 1/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dgp {
    /// `Y = g(W) + 0.5 X + e` with `g(w) = w + 0.5 sin(pi w)`.
    Location,
    /// `Y = g(W) + 0.5 X + (0.5 + W) e`.
    LocationScale,
    /// `Y = 0.5 X + e`: every treatment functional is zero.
    Null,
    /// `Y = slope * W + 0.5 X + e`: average derivative equals `slope`.
    Linear { slope_millis: i64 },
}

const GAMMA: f64 = 0.5;

impl Dgp {
    fn g(&self, w: f64) -> f64 {
        match self {
            Dgp::Location | Dgp::LocationScale => w + 0.5 * (PI * w).sin(),
            Dgp::Null => 0.0,
            Dgp::Linear { slope_millis } => *slope_millis as f64 / 1000.0 * w,
        }
    }

    fn g_prime(&self, w: f64) -> f64 {
        match self {
            Dgp::Location | Dgp::LocationScale => 1.0 + 0.5 * PI * (PI * w).cos(),
            Dgp::Null => 0.0,
            Dgp::Linear { slope_millis } => *slope_millis as f64 / 1000.0,
        }
    }

    /// `Q_{Y|X}(tau | w, x)`.
    pub fn quantile(&self, tau: f64, w: f64, x: f64) -> f64 {
        let e = tau - 0.5;
        let scale = if matches!(self, Dgp::LocationScale) { 0.5 + w } else { 1.0 };
        self.g(w) + GAMMA * x + scale * e
    }

    /// `d Q / dw` at `(tau, w)`.
    pub fn quantile_derivative(&self, tau: f64, w: f64) -> f64 {
        let extra = if matches!(self, Dgp::LocationScale) { tau - 0.5 } else { 0.0 };
        self.g_prime(w) + extra
    }

    /// Population average of `d Q / dw` over `W ~ U(0, 1)`.
    pub fn average_derivative(&self, tau: f64) -> f64 {
        match self {
            // int_0^1 (1 + pi/2 cos(pi w)) dw = 1
            Dgp::Location => 1.0,
            Dgp::LocationScale => 1.0 + tau - 0.5,
            Dgp::Null => 0.0,
            Dgp::Linear { slope_millis } => *slope_millis as f64 / 1000.0,
        }
    }

    fn g_second(&self, w: f64) -> f64 {
        match self {
            Dgp::Location | Dgp::LocationScale => -0.5 * PI * PI * (PI * w).sin(),
            Dgp::Null | Dgp::Linear { .. } => 0.0,
        }
    }

    /// `d^k Q / dw^k` at `(tau, w, x)` for `k <= 2`.
    pub fn functional(&self, deriv: usize, tau: f64, w: f64, x: f64) -> f64 {
        match deriv {
            0 => self.quantile(tau, w, x),
            1 => self.quantile_derivative(tau, w),
            _ => self.g_second(w),
        }
    }

    /// Population average of [`Dgp::functional`] over `W ~ U(0, 1)`
    /// (midpoint rule).
    pub fn average_functional(&self, deriv: usize, tau: f64, x: f64) -> f64 {
        if deriv == 1 {
            return self.average_derivative(tau);
        }
        let k = 20_000;
        (0..k).map(|i| self.functional(deriv, tau, (i as f64 + 0.5) / k as f64, x)).sum::<f64>() / k as f64
    }

    /// Draws `n` observations with columns `y`, `w`, `x`.
    pub fn generate(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        for _ in 0..n {
            let wi: f64 = rng.random_range(0.0..1.0);
            let xi: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.random_range(-0.5..0.5);
            let scale = if matches!(self, Dgp::LocationScale) { 0.5 + wi } else { 1.0 };
            y.push(self.g(wi) + GAMMA * xi + scale * e);
            w.push(wi);
            x.push(xi);
        }
        Dataset::new(
            "y",
            "w",
            y,
            w,
            vec![ControlColumn {
                name: "x".into(),
                data: ControlData::Numeric(x),
            }],
        )
        .expect("synthetic data are valid")
    }

    pub fn model_spec() -> ModelSpec {
        ModelSpec::new("y", "w").with_control(ControlTerm::numeric("x"))
    }
}
