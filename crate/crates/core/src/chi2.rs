//! Chi-square quantiles for the compatibility gates.
//!
//! Degrees of freedom are integers, so `ln Γ(d/2)` is evaluated exactly from factorial
//! identities; the regularized lower incomplete gamma function uses the power series below
//! `x < a + 1` and a Lentz continued fraction above it.

use crate::{Error, Result};

const MAX_ITER: usize = 500;
const EPS: f64 = 1e-16;

/// `ln Γ(d / 2)` for a positive integer `d`.
fn ln_gamma_half(d: usize) -> f64 {
    if d % 2 == 0 {
        // Γ(n) = (n - 1)!
        (1..d / 2).map(|i| (i as f64).ln()).sum()
    } else {
        // Γ(n + 1/2) = sqrt(pi) · prod_{i=1..n} (i - 1/2)
        let n = d / 2;
        0.5 * std::f64::consts::PI.ln() + (1..=n).map(|i| (i as f64 - 0.5).ln()).sum::<f64>()
    }
}

/// Regularized lower incomplete gamma `P(d/2, x)`, i.e. the chi-square CDF at `2x`.
fn lower_regularized(d: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let a = d as f64 / 2.0;
    let log_prefix = a * x.ln() - x - ln_gamma_half(d);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        (sum.ln() + log_prefix).exp().min(1.0)
    } else {
        // Modified Lentz for the upper tail Q(a, x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut dd = 1.0 / b;
        let mut h = dd;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            dd = an * dd + b;
            if dd.abs() < tiny {
                dd = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            dd = 1.0 / dd;
            let delta = dd * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                break;
            }
        }
        1.0 - (log_prefix + h.ln()).exp()
    }
}

/// Chi-square CDF with `dof` degrees of freedom.
pub fn chi2_cdf(dof: usize, q: f64) -> f64 {
    lower_regularized(dof, q / 2.0)
}

/// Value `q` with `CDF_{χ²(dof)}(q) = alpha`.
pub fn chi2_quantile(dof: usize, alpha: f64) -> Result<f64> {
    if dof == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::ChiSquareDomain { dof, alpha });
    }
    if dof == 2 {
        return Ok(-2.0 * (-alpha).ln_1p());
    }
    let k = dof as f64;
    // Wilson–Hilferty starting point, then safeguarded Newton on the CDF.
    let z = normal_quantile(alpha);
    let h = 2.0 / (9.0 * k);
    let mut q = (k * (1.0 - h + z * h.sqrt()).powi(3)).max(1e-8);
    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    for _ in 0..200 {
        let f = chi2_cdf(dof, q) - alpha;
        if f > 0.0 {
            hi = hi.min(q);
        } else {
            lo = lo.max(q);
        }
        if f.abs() < 1e-15 {
            break;
        }
        let ln_pdf = (k / 2.0 - 1.0) * q.ln() - q / 2.0 - (k / 2.0) * 2f64.ln() - ln_gamma_half(dof);
        let mut next = q - f / ln_pdf.exp();
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * q.max(lo) + 1.0 };
        }
        if (next - q).abs() <= 1e-14 * q.max(1.0) {
            q = next;
            break;
        }
        q = next;
    }
    Ok(q)
}

/// Standard normal quantile (Acklam's rational approximation, ~1e-9 relative); only used to
/// seed the Newton iteration.
fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] =
        [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Quantiles `chi2(2k, alpha)` for `k = 0..=max_pairs`, index 0 unused (+inf).
#[derive(Debug, Clone)]
pub struct Chi2Table {
    alpha: f64,
    by_pairs: Vec<f64>,
}

impl Chi2Table {
    pub fn new(alpha: f64, max_pairs: usize) -> Result<Self> {
        let mut by_pairs = vec![f64::INFINITY];
        for k in 1..=max_pairs.max(1) {
            by_pairs.push(chi2_quantile(2 * k, alpha)?);
        }
        Ok(Self { alpha, by_pairs })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Threshold for `k` stacked 2-D innovations.
    pub fn for_pairs(&self, k: usize) -> f64 {
        match self.by_pairs.get(k) {
            Some(&v) => v,
            None => chi2_quantile(2 * k, self.alpha).unwrap_or(f64::INFINITY),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_dof_closed_form() {
        for alpha in [0.5, 0.9, 0.95, 0.975, 0.99, 0.999] {
            let q = chi2_quantile(2, alpha).unwrap();
            assert!((1.0 - (-q / 2.0).exp() - alpha).abs() < 1e-12);
        }
        let q = chi2_quantile(2, 0.975).unwrap();
        assert!((q - 7.377758908227871).abs() < 1e-12);
    }

    #[test]
    fn ln_gamma_half_small_values() {
        assert!((ln_gamma_half(1) - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-15);
        assert_eq!(ln_gamma_half(2), 0.0);
        assert!((ln_gamma_half(10) - 24f64.ln()).abs() < 1e-14);
        assert!((ln_gamma_half(3) - (0.5 * std::f64::consts::PI.sqrt()).ln()).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        assert!(chi2_quantile(0, 0.5).is_err());
        assert!(chi2_quantile(2, 0.0).is_err());
        assert!(chi2_quantile(2, 1.0).is_err());
        assert!(chi2_quantile(4, f64::NAN).is_err());
    }

    #[test]
    fn quantile_inverts_cdf() {
        for dof in 1..=40 {
            for alpha in [0.01, 0.3, 0.5, 0.9, 0.975, 0.999] {
                let q = chi2_quantile(dof, alpha).unwrap();
                assert!((chi2_cdf(dof, q) - alpha).abs() < 1e-12, "dof {dof} alpha {alpha}");
            }
        }
    }

    #[test]
    fn table_matches_direct() {
        let t = Chi2Table::new(0.975, 6).unwrap();
        assert_eq!(t.for_pairs(3), chi2_quantile(6, 0.975).unwrap());
        assert_eq!(t.for_pairs(9), chi2_quantile(18, 0.975).unwrap());
        assert!(t.for_pairs(0).is_infinite());
    }
}
