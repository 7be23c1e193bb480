//! Scalar noise primitives: Laplace draws and binary randomized response.

use rand::Rng;

use super::budget::Budget;

/// Draw from `scale * Laplace(0, 1)` where the standard Laplace density is
/// `exp(-|x|) / 2`. Inverse-CDF sampling.
pub fn laplace_sample<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    debug_assert!(scale >= 0.0);
    if scale == 0.0 {
        return 0.0;
    }
    // u in (-1/2, 1/2]; 1 - 2|u| in [0, 1), guard the log at 0.
    let u: f64 = rng.random::<f64>() - 0.5;
    let tail = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
    -scale * u.signum() * tail.ln()
}

/// Density of `Laplace(0, scale)` at `x`.
pub fn laplace_density(x: f64, scale: f64) -> f64 {
    (-x.abs() / scale).exp() / (2.0 * scale)
}

/// Probability that randomized response keeps its input: `e^ε / (e^ε + 1)`.
pub fn rr_keep_probability(epsilon: Budget) -> f64 {
    let e = epsilon.epsilon();
    if e.is_infinite() {
        1.0
    } else {
        1.0 / (1.0 + (-e).exp())
    }
}

/// `(e^ε + 1) / (e^ε - 1)`, the factor that makes a randomized-response bit
/// unbiased. Equals `coth(ε/2)`; 1 in the limit ε → ∞.
pub fn rr_debias_factor(epsilon: Budget) -> f64 {
    let e = epsilon.epsilon();
    if e.is_infinite() {
        1.0
    } else {
        1.0 / (e / 2.0).tanh()
    }
}

/// Binary randomized response on a ±1 input.
pub fn randomized_response_sign<R: Rng + ?Sized>(x: i8, epsilon: Budget, rng: &mut R) -> i8 {
    debug_assert!(x == 1 || x == -1, "randomized response input must be ±1");
    let keep = rr_keep_probability(epsilon);
    if keep >= 1.0 || rng.random::<f64>() < keep {
        x
    } else {
        -x
    }
}

/// `Pr[output | input]` for [`randomized_response_sign`]; exposed so the
/// privacy ratio can be checked from the implemented probabilities.
pub fn rr_output_probability(output: i8, input: i8, epsilon: Budget) -> f64 {
    let keep = rr_keep_probability(epsilon);
    if output == input {
        keep
    } else {
        1.0 - keep
    }
}
