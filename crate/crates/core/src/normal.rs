//! Standard normal distribution functions.
//!
//! The CDF goes through `erfc`, which keeps full relative precision in the
//! lower tail; the quantile function is Wichura's AS241 (PPND16), accurate to
//! about 1e-16 relative.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Log of the standard normal density.
pub fn ln_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Standard normal CDF Φ(x).
pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail 1 − Φ(x), computed without cancellation.
pub fn sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// log Φ(x), finite for every finite `x`.
pub fn ln_cdf(x: f64) -> f64 {
    if x > -30.0 {
        let p = cdf(x);
        if x > 0.0 {
            // Φ(x) close to one: log1p of the small upper tail
            (-sf(x)).ln_1p()
        } else {
            p.ln()
        }
    } else {
        // Asymptotic series of the Mills ratio for x → −∞.
        let z2 = 1.0 / (x * x);
        let series = 1.0 - z2 + 3.0 * z2 * z2 - 15.0 * z2 * z2 * z2 + 105.0 * z2 * z2 * z2 * z2;
        ln_pdf(x) - (-x).ln() + series.ln()
    }
}

/// Inverse Mills ratio φ(a) / (1 − Φ(a)), the hazard of the standard normal.
pub fn inv_mills(a: f64) -> f64 {
    if a < 30.0 {
        pdf(a) / sf(a)
    } else {
        // Continued-fraction limit: a + 1/a − 2/a³ + ...
        let z2 = 1.0 / (a * a);
        a * (1.0 + z2 - 2.0 * z2 * z2 + 10.0 * z2 * z2 * z2)
    }
}

/// Standard normal quantile Φ⁻¹(p) for `p` in (0, 1).
///
/// Returns ±∞ at the endpoints and NaN outside [0, 1].
// Coefficients are copied verbatim from the published algorithm.
#[allow(clippy::inconsistent_digit_grouping, clippy::excessive_precision)]
pub fn quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.080_928_730_122_7 * r + 33430.575_583_588_128) * r
                + 67265.770_927_008_7)
                * r
                + 45921.953_931_549_87)
                * r
                + 13731.693_765_509_46)
                * r
                + 1971.590_950_306_551_3)
                * r
                + 133.141_667_891_784_38)
                * r
                + 3.387_132_872_796_366_5)
            / (((((((5226.495_278_852_545 * r + 28729.085_735_721_943) * r
                + 39307.895_800_092_71)
                * r
                + 21213.794_301_586_597)
                * r
                + 5394.196_021_424_751)
                * r
                + 687.187_007_492_057_9)
                * r
                + 42.313_330_701_600_91)
                * r
                + 1.0);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        (((((((7.745_450_142_783_414e-4 * r + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5)
            / (((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
                + 0.015_198_666_563_616_457)
                * r
                + 0.148_103_976_427_480_08)
                * r
                + 0.689_767_334_985_1)
                * r
                + 1.676_384_830_183_803_8)
                * r
                + 2.053_191_626_637_759)
                * r
                + 1.0)
    } else {
        r -= 5.0;
        (((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 0.001_242_660_947_388_078_4)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_9)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103)
            / (((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
                + 1.846_318_317_510_054_8e-5)
                * r
                + 7.868_691_311_456_133e-4)
                * r
                + 0.014_875_361_290_850_615)
                * r
                + 0.136_929_880_922_735_8)
                * r
                + 0.599_832_206_555_888)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Moments of a unit-variance normal `N(center, 1)` truncated to `y > 0`
/// (`positive = true`) or `y ≤ 0`. Returns `(mean, variance)`.
pub fn truncated_unit_moments(center: f64, positive: bool) -> (f64, f64) {
    // Reduce to the upper-tail case z > a for z = ±(y − center).
    let (a, sign) = if positive {
        (-center, 1.0)
    } else {
        (center, -1.0)
    };
    let lambda = inv_mills(a);
    let mean_z = lambda;
    let var_z = (1.0 + a * lambda - lambda * lambda).max(0.0);
    (center + sign * mean_z, var_z)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson integration of the density from −12 to x.
    fn cdf_by_quadrature(x: f64) -> f64 {
        let lo = -12.0;
        let n = 20_000;
        let h = (x - lo) / n as f64;
        let mut s = pdf(lo) + pdf(x);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * pdf(lo + k as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn cdf_matches_quadrature() {
        for &x in &[-3.0, -1.0, 0.0, 0.5, 1.7, 3.0] {
            let q = cdf_by_quadrature(x);
            assert!((cdf(x) - q).abs() < 1e-12, "x={x}: {} vs {q}", cdf(x));
        }
        // Φ(0.5) ≈ 0.6915
        assert!((cdf(0.5) - 0.691_462_461_274_013_1).abs() < 1e-12);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[
            1e-300,
            1e-20,
            1e-8,
            0.001,
            0.02425,
            0.3,
            0.5,
            0.7,
            0.975,
            1.0 - 1e-12,
        ] {
            let x = quantile(p);
            let back = cdf(x);
            assert!(((back - p) / p).abs() < 1e-12, "p={p}: x={x}, back={back}");
        }
        assert_eq!(quantile(0.5), 0.0);
        assert!(quantile(0.0).is_infinite() && quantile(1.0).is_infinite());
        assert!(quantile(1.5).is_nan());
    }

    #[test]
    fn ln_cdf_tails() {
        assert!((ln_cdf(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!((ln_cdf(-5.0) - cdf(-5.0).ln()).abs() < 1e-12);
        // Continuity across the asymptotic switch at −30.
        let a = ln_cdf(-29.999_999);
        let b = ln_cdf(-30.000_001);
        assert!((a - b).abs() < 1e-3);
        assert!(ln_cdf(-100.0).is_finite());
        assert!(ln_cdf(40.0) == 0.0 || ln_cdf(40.0).abs() < 1e-300);
    }

    #[test]
    fn truncated_moments_half_normal() {
        let (m, v) = truncated_unit_moments(0.0, true);
        assert!((m - (2.0 / PI).sqrt()).abs() < 1e-14);
        assert!((v - (1.0 - 2.0 / PI)).abs() < 1e-14);
        let (m, _) = truncated_unit_moments(0.0, false);
        assert!((m + (2.0 / PI).sqrt()).abs() < 1e-14);
        // Far in the tail the mean approaches the bound.
        let (m, v) = truncated_unit_moments(-40.0, true);
        assert!(m > 0.0 && m < 0.03 && v > 0.0);
    }
}
