//! Standard normal and logistic helpers with tail-stable logarithms.

use libm::erfc;
use statrs::function::erf::erfc_inv;
use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
// Below this point erfc underflows; switch to the asymptotic series.
const TAIL: f64 = -37.0;

/// Standard normal density.
pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF.
pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal quantile.
pub fn quantile(p: f64) -> f64 {
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    if !x.is_finite() {
        return x;
    }
    // One Halley step against the full-precision CDF.
    let d = pdf(x);
    if d <= f64::MIN_POSITIVE {
        return x;
    }
    let e = (cdf(x) - p) / d;
    x - e / (1.0 + 0.5 * x * e)
}

// 1 - 1/x^2 + 3/x^4 - 15/x^6, the asymptotic factor of the Mills ratio.
fn mills_series(x: f64) -> f64 {
    let r = 1.0 / (x * x);
    1.0 - r * (1.0 - 3.0 * r * (1.0 - 5.0 * r))
}

/// `ln Φ(x)`, accurate in both tails.
pub fn ln_cdf(x: f64) -> f64 {
    if x < TAIL {
        -0.5 * x * x - (-x).ln() - LN_SQRT_2PI + mills_series(x).ln()
    } else if x > 0.0 {
        (-cdf(-x)).ln_1p()
    } else {
        cdf(x).ln()
    }
}

/// Inverse Mills ratio `φ(x)/Φ(x)`.
pub fn mills(x: f64) -> f64 {
    if x < TAIL {
        -x / mills_series(x)
    } else {
        (-0.5 * x * x - LN_SQRT_2PI - ln_cdf(x)).exp()
    }
}

/// Derivative of the inverse Mills ratio, `-λ(x)(x + λ(x))`.
pub fn mills_derivative(x: f64) -> f64 {
    let l = mills(x);
    -l * (x + l)
}

/// Logistic sigmoid.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
pub fn ln_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
