//! Scalar special functions and small summary helpers.

use crate::prelude::*;
use core::f64::consts::PI;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p((-x).exp())
    } else {
        libm::log1p(x.exp())
    }
}

#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

#[inline]
pub fn gamma(x: f64) -> f64 {
    libm::tgamma(x)
}

/// `ln C(n, k)`.
pub fn ln_choose(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    if k == 0 || k == n {
        return 0.0;
    }
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / core::f64::consts::SQRT_2)
}

/// Standard normal quantile: Acklam's rational approximation refined by
/// one Halley step.
pub fn normal_quantile(p: f64) -> f64 {
    if !(p > 0.0 && p < 1.0) {
        return match p {
            0.0 => f64::NEG_INFINITY,
            1.0 => f64::INFINITY,
            _ => f64::NAN,
        };
    }
    const A: [f64; 6] = [-3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383577518672690e2, -3.066479806614716e1, 2.506628277459239];
    const B: [f64; 5] = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [-7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734, 4.374664141464968, 2.938163982698783];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < 0.02425 {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - 0.02425 {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * core::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with divisor `n - 1`.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Quantile with inclusive linear interpolation between order statistics
/// (position `p (n - 1)` in the sorted sample).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn quantiles(xs: &[f64], ps: &[f64]) -> Vec<f64> {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    ps.iter().map(|&p| quantile_sorted(&sorted, p)).collect()
}

/// Posterior-style summary of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Mean, median, SD and the central interval with the given coverage.
pub fn summarize(xs: &[f64], coverage: f64) -> Summary {
    let tail = 0.5 * (1.0 - coverage);
    let q = quantiles(xs, &[tail, 0.5, 1.0 - tail]);
    Summary {
        mean: mean(xs),
        median: q[1],
        sd: sample_variance(xs).sqrt(),
        lower: q[0],
        upper: q[2],
    }
}

/// Modified Bessel function of the second kind `K_nu(x)` for `nu >= 0`,
/// `x > 0`, using Temme's series for `x < 2` and Steed's continued fraction
/// otherwise, followed by forward recurrence in the order.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    debug_assert!(nu >= 0.0 && x > 0.0);
    const EPS: f64 = 1e-16;
    const MAX_ITER: usize = 10_000;

    let nl = (nu + 0.5).floor() as usize;
    let xmu = nu - nl as f64;
    let xmu2 = xmu * xmu;
    let xi = 1.0 / x;
    let xi2 = 2.0 * xi;

    let (mut rkmu, mut rk1);
    if x < 2.0 {
        let x2 = 0.5 * x;
        let pimu = PI * xmu;
        let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
        let mut d = -x2.ln();
        let mut e = xmu * d;
        let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
        let (gam1, gam2, gampl, gammi) = temme_gammas(xmu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        e = e.exp();
        let mut p = 0.5 * e / gampl;
        let mut q = 0.5 / (e * gammi);
        let mut c = 1.0;
        d = x2 * x2;
        let mut sum1 = p;
        for i in 1..=MAX_ITER {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - xmu2);
            c *= d / fi;
            p /= fi - xmu;
            q /= fi + xmu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - fi * ff);
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        rkmu = sum;
        rk1 = sum1 * xi2;
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut h = d;
        let mut delh = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - xmu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 1..=MAX_ITER {
            let fi = i as f64;
            a -= 2.0 * fi;
            c = -a * c / (fi + 1.0);
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh = (b * d - 1.0) * delh;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                break;
            }
        }
        h *= a1;
        rkmu = (PI / (2.0 * x)).sqrt() * (-x).exp() / s;
        rk1 = rkmu * (xmu + x + 0.5 - h) * xi;
    }
    for i in 1..=nl {
        let next = (xmu + i as f64) * xi2 * rk1 + rkmu;
        rkmu = rk1;
        rk1 = next;
    }
    rkmu
}

/// `gam1 = (1/Γ(1-μ) - 1/Γ(1+μ)) / 2μ`, `gam2 = (1/Γ(1-μ) + 1/Γ(1+μ)) / 2`,
/// `1/Γ(1+μ)` and `1/Γ(1-μ)` for `|μ| <= 1/2`.
fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    let gampl = 1.0 / gamma(1.0 + mu);
    let gammi = 1.0 / gamma(1.0 - mu);
    let gam1 = if mu.abs() < 1e-3 {
        // Taylor coefficients of 1/Γ(1+μ): 1 + γμ - 0.6558…μ² - 0.0420…μ³ - 0.0421…μ⁵ ...
        let mu2 = mu * mu;
        -(EULER_GAMMA - 0.042_002_635_034_095_2 * mu2 - 0.042_197_734_555_544_3 * mu2 * mu2)
    } else {
        (gammi - gampl) / (2.0 * mu)
    };
    let gam2 = 0.5 * (gammi + gampl);
    (gam1, gam2, gampl, gammi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_quantile_inverts_cdf() {
        assert!((normal_quantile(0.95) - 1.6448536269514722).abs() < 1e-12);
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
        assert_eq!(normal_quantile(0.5), 0.0);
        for &p in &[1e-10, 1e-4, 0.01, 0.3, 0.7, 0.99, 1.0 - 1e-6] {
            assert!((normal_cdf(normal_quantile(p)) - p).abs() < 1e-13 * p.max(1e-3), "{p}");
        }
    }

    /// K_nu(x) = ∫_0^∞ exp(-x cosh t) cosh(nu t) dt, by composite Simpson.
    fn bessel_k_quadrature(nu: f64, x: f64) -> f64 {
        let upper = 2.0 + (60.0 / x).ln().max(1.0) + nu;
        let n = 200_000;
        let h = upper / n as f64;
        let f = |t: f64| (-x * t.cosh()).exp() * (nu * t).cosh();
        let mut acc = f(0.0) + f(upper);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn bessel_half_integer_closed_forms() {
        for &x in &[1e-4, 0.01, 0.3, 1.0, 1.999, 2.0, 3.7, 10.0, 40.0] {
            let k_half = (PI / (2.0 * x)).sqrt() * (-x).exp();
            let rel = |a: f64, b: f64| ((a - b) / b).abs();
            assert!(rel(bessel_k(0.5, x), k_half) < 1e-13, "x={x}");
            assert!(rel(bessel_k(1.5, x), k_half * (1.0 + 1.0 / x)) < 1e-13);
            assert!(rel(bessel_k(2.5, x), k_half * (1.0 + 3.0 / x + 3.0 / (x * x))) < 1e-13);
        }
    }

    #[test]
    fn bessel_matches_integral_representation() {
        for &nu in &[0.0, 0.3, 1.0, 1.25, 2.0, 3.6] {
            for &x in &[0.05, 0.5, 1.5, 2.5, 6.0] {
                let got = bessel_k(nu, x);
                let want = bessel_k_quadrature(nu, x);
                assert!(((got - want) / want).abs() < 1e-9, "nu={nu} x={x}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn tabulated_bessel_values() {
        assert!((bessel_k(0.0, 1.0) - 0.421_024_438_240_708_3).abs() < 1e-14);
        assert!((bessel_k(1.0, 1.0) - 0.601_907_230_197_234_6).abs() < 1e-14);
    }

    #[test]
    fn quantile_interpolates_inclusively() {
        let xs = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantiles(&xs, &[0.0, 0.5, 1.0]), vec![1.0, 2.5, 4.0]);
        assert!((quantiles(&xs, &[0.9])[0] - 3.7).abs() < 1e-12);
    }

    #[test]
    fn expit_inverts_logit() {
        for &p in &[1e-9, 0.0628, 0.5, 0.9, 1.0 - 1e-9] {
            assert!((expit(logit(p)) - p).abs() < 1e-12);
        }
        assert_eq!(expit(0.0), 0.5);
        assert!(expit(-800.0) >= 0.0 && expit(800.0) <= 1.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }
}
