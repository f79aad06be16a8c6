//! Scalar special functions used throughout: normal and chi-square
//! distribution functions, log-gamma, digamma, and the Kolmogorov tail.

use statrs::function::erf::erfc;
use statrs::function::gamma;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn ln_gamma(x: f64) -> f64 {
    gamma::ln_gamma(x)
}

pub fn digamma(x: f64) -> f64 {
    gamma::digamma(x)
}

pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z - 0.5 * LN_2PI).exp()
}

pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// log Φ(z), accurate in the far left tail.
pub fn ln_norm_cdf(z: f64) -> f64 {
    if z > -30.0 {
        norm_cdf(z).ln()
    } else {
        // asymptotic expansion of the Mills ratio
        let z2 = z * z;
        -0.5 * z2 - 0.5 * LN_2PI - (-z).ln() + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2)).ln()
    }
}

/// Chi-square CDF with `k` degrees of freedom via the regularized lower incomplete gamma.
pub fn chi2_cdf(x: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    gamma::gamma_lr(0.5 * k, 0.5 * x)
}

/// Upper quantile helper: smallest x with chi2_cdf(x, k) >= p, by bisection.
pub fn chi2_quantile(p: f64, k: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, k.max(1.0));
    while chi2_cdf(hi, k) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, k) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// One-sample Kolmogorov–Smirnov statistic and asymptotic p-value against `cdf`.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let nf = n as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / nf - f).max(f - i as f64 / nf);
    }
    let sq = nf.sqrt();
    let lambda = (sq + 0.12 + 0.11 / sq) * d;
    (d, kolmogorov_tail(lambda))
}

/// P(K > λ) for the Kolmogorov distribution.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_cdf_reference_values() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-15);
        let v = norm_cdf(1.959963984540054);
        assert!((v - 0.975).abs() < 1e-11, "{v:.17}");
        let far = ln_norm_cdf(-35.0);
        assert!(far.is_finite() && far < -600.0);
        assert!((ln_norm_cdf(-29.9999) - ln_norm_cdf(-30.0001)).abs() < 0.01);
    }

    #[test]
    fn chi2_cdf_two_dof_is_exponential() {
        for &x in &[0.1, 1.0, 3.0, 10.0] {
            let exact: f64 = 1.0 - (-x / 2.0f64).exp();
            assert!((chi2_cdf(x, 2.0) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn chi2_cdf_matches_series_cross_check() {
        // odd dof: P(k/2, x/2) by the lower incomplete gamma power series
        for &(x, k) in &[(0.5, 1.0), (2.0, 3.0), (7.5, 5.0), (20.0, 9.0)] {
            let a: f64 = k / 2.0;
            let z: f64 = x / 2.0;
            let mut term = 1.0 / a;
            let mut sum = term;
            for n in 1..500 {
                term *= z / (a + n as f64);
                sum += term;
            }
            let series = (a * z.ln() - z - ln_gamma(a)).exp() * sum;
            assert!((chi2_cdf(x, k) - series).abs() < 1e-10);
        }
    }

    #[test]
    fn chi2_quantile_inverts_cdf() {
        let q = chi2_quantile(0.95, 1.0);
        assert!((q - 3.841458820694124).abs() < 1e-8);
    }

    #[test]
    fn kolmogorov_tail_reference() {
        // P(K > 1.3580986) ≈ 0.05
        assert!((kolmogorov_tail(1.3580986393) - 0.05).abs() < 1e-6);
    }

    #[test]
    fn ks_on_uniform_quantiles_is_not_rejected() {
        let s: Vec<f64> = (0..200).map(|i| (i as f64 + 0.5) / 200.0).collect();
        let (d, p) = ks_test(&s, |x| x.clamp(0.0, 1.0));
        assert!(d <= 0.0025 + 1e-12);
        assert!(p > 0.99);
    }
}
