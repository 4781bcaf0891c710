//! Alpha compositing along a ray, shared by the differentiable renderer and
//! the plain-value helpers so both produce bit-identical weights.

use crate::math;

/// Writes the compositing weight of every sample into `weights` and returns
/// the transmittance left after the last sample.
///
/// `w_i = T_i (1 - exp(-delta_i sigma_i))` with `T_i = exp(-sum_{j<i} delta_j sigma_j)`.
pub fn ray_weights(sigma: &[f64], deltas: &[f64], weights: &mut [f64]) -> f64 {
    debug_assert_eq!(sigma.len(), deltas.len());
    debug_assert_eq!(sigma.len(), weights.len());
    let mut depth = 0.0;
    for i in 0..sigma.len() {
        let a = deltas[i] * sigma[i];
        weights[i] = math::exp(-depth) * -libm::expm1(-a);
        depth += a;
    }
    math::exp(-depth)
}

/// Transmittance `T_i` in front of every sample.
pub fn transmittance(sigma: &[f64], deltas: &[f64], out: &mut [f64]) {
    let mut depth = 0.0;
    for i in 0..sigma.len() {
        out[i] = math::exp(-depth);
        depth += deltas[i] * sigma[i];
    }
}
