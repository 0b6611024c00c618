//! Standard normal helpers used throughout the pipeline.

use libm::erfc;
use statrs::function::erf::erfc_inv;
use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

/// ln(sqrt(2*pi))
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Clipping guard applied to probabilities before the normal quantile.
pub const PROB_GUARD: f64 = 1e-10;

#[inline]
pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
pub fn sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

#[inline]
pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

#[inline]
pub fn ln_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Quantile of the standard normal for p in (0, 1), polished with one
/// Halley step against the accurate CDF.
#[inline]
pub fn quantile(p: f64) -> f64 {
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    if !x.is_finite() {
        return x;
    }
    // Work in the smaller tail to keep the residual accurate.
    let r = if x <= 0.0 { cdf(x) - p } else { (1.0 - p) - sf(x) };
    let u = r / pdf(x);
    if !u.is_finite() {
        return x;
    }
    x - u / (1.0 + 0.5 * x * u)
}

/// `quantile` after clipping p to [PROB_GUARD, 1 - PROB_GUARD]. Returns the
/// clipped flag alongside the value.
#[inline]
pub fn guarded_quantile(p: f64) -> (f64, bool) {
    let clipped = p.clamp(PROB_GUARD, 1.0 - PROB_GUARD);
    (quantile(clipped), clipped != p)
}

/// ln of the N(mean, sd^2) density at x.
#[inline]
pub fn ln_pdf_scaled(x: f64, mean: f64, sd: f64) -> f64 {
    ln_pdf((x - mean) / sd) - sd.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_inverts_cdf() {
        for &x in &[-8.0, -3.0, -1.0, 0.0, 0.5, 2.5, 6.0] {
            let q = if x <= 0.0 { quantile(cdf(x)) } else { -quantile(sf(x)) };
            assert!((q - x).abs() < 1e-9, "x = {x}: {q}");
        }
    }

    #[test]
    fn reference_values() {
        assert!((cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-15);
        assert!((quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-14);
        assert!((pdf(0.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!((sf(3.0) - 1.349_898_031_630_094_6e-3).abs() < 1e-16);
    }

    #[test]
    fn guard_clips_extremes() {
        let (q, clipped) = guarded_quantile(0.0);
        assert!(clipped);
        assert!(q.is_finite() && q < -6.0);
        let (_, clipped) = guarded_quantile(0.3);
        assert!(!clipped);
    }
}
