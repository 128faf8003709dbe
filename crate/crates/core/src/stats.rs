//! Small numeric statistics toolbox: incomplete gamma for chi-square tails,
//! binomial tails, and a Jacobi eigensolver for symmetric matrices.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

/// ln Gamma(x) for x > 0 (Lanczos approximation, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = core::f64::consts::PI;
        return libm::log(pi / libm::sin(pi * x)) - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * libm::log(2.0 * core::f64::consts::PI) + (x + 0.5) * libm::log(t) - t + libm::log(a)
}

/// Regularized lower incomplete gamma P(a, x) by series expansion.
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut n = a;
    for _ in 0..500 {
        n += 1.0;
        term *= x / n;
        sum += term;
        if term.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * libm::exp(-x + a * libm::log(x) - ln_gamma(a))
}

/// Regularized upper incomplete gamma Q(a, x) by continued fraction.
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    libm::exp(-x + a * libm::log(x) - ln_gamma(a)) * h
}

/// Regularized upper incomplete gamma Q(a, x) = Gamma(a, x) / Gamma(a).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        (1.0 - gamma_p_series(a, x)).clamp(0.0, 1.0)
    } else {
        gamma_q_cf(a, x).clamp(0.0, 1.0)
    }
}

/// Survival function of the chi-square distribution with `dof` degrees.
pub fn chi2_sf(x: f64, dof: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(dof as f64 / 2.0, x / 2.0)
}

/// Chi-square goodness-of-fit test of observed counts against expected
/// probabilities. Returns `(statistic, p_value)`; dof = bins - 1.
pub fn chi2_gof(observed: &[u64], expected_probs: &[f64]) -> Result<(f64, f64)> {
    if observed.len() != expected_probs.len() || observed.len() < 2 {
        return Err(CoreError::parameter("chi2_gof needs >= 2 matched bins"));
    }
    let n: u64 = observed.iter().sum();
    if n == 0 {
        return Err(CoreError::parameter("chi2_gof needs at least one observation"));
    }
    let mut stat = 0.0;
    for (&o, &p) in observed.iter().zip(expected_probs.iter()) {
        if !(p > 0.0) {
            return Err(CoreError::parameter("expected probabilities must be positive"));
        }
        let e = p * n as f64;
        let d = o as f64 - e;
        stat += d * d / e;
    }
    Ok((stat, chi2_sf(stat, observed.len() - 1)))
}

/// P(X <= k) for X ~ Binomial(n, 1/2).
pub fn binom_cdf_half(k: u64, n: u64) -> f64 {
    if k >= n {
        return 1.0;
    }
    let ln2 = core::f64::consts::LN_2;
    let mut sum = 0.0;
    for i in 0..=k {
        let ln_c = ln_gamma(n as f64 + 1.0) - ln_gamma(i as f64 + 1.0) - ln_gamma((n - i) as f64 + 1.0);
        sum += libm::exp(ln_c - n as f64 * ln2);
    }
    sum.min(1.0)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
/// `a` is n x n row-major and is consumed as scratch.
pub fn symmetric_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    if n == 0 {
        return Vec::new();
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + libm::sqrt(1.0 + theta * theta))
                } else {
                    -1.0 / (-theta + libm::sqrt(1.0 + theta * theta))
                };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Centered singular values of an n x d matrix via the d x d Gram matrix.
pub fn centered_singular_values(e: &[f64], n: usize, d: usize) -> Vec<f64> {
    assert_eq!(e.len(), n * d);
    let mut means = vec![0.0; d];
    for row in e.chunks_exact(d) {
        for (m, &v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in means.iter_mut() {
        *m /= n as f64;
    }
    let mut gram = vec![0.0; d * d];
    for row in e.chunks_exact(d) {
        for i in 0..d {
            let ci = row[i] - means[i];
            for j in i..d {
                gram[i * d + j] += ci * (row[j] - means[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[i * d + j] = gram[j * d + i];
        }
    }
    let mut ev = symmetric_eigenvalues(gram, d);
    for v in ev.iter_mut() {
        *v = if *v > 0.0 { libm::sqrt(*v) } else { 0.0 };
    }
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_sf_reference_values() {
        // frozen against an independent statistics library
        assert!((chi2_sf(4.05, 1) - 0.04417134490844271).abs() < 1e-10);
        assert!((chi2_sf(1.0, 3) - 0.8012519569012009).abs() < 1e-10);
        assert!((chi2_sf(7.81, 3) - 0.05010605635000589).abs() < 1e-10);
        assert!((chi2_sf(1.0, 4) - 0.9097959895689501).abs() < 1e-10);
        assert!((chi2_sf(13.28, 4) - 0.00998568814291).abs() < 1e-9);
    }

    #[test]
    fn binomial_tail_reference() {
        // 2 * P(X <= 5 | n=20) = 0.04138946533203125 exactly (dyadic)
        assert!((2.0 * binom_cdf_half(5, 20) - 0.04138946533203125).abs() < 1e-12);
        assert_eq!(binom_cdf_half(20, 20), 1.0);
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // A = diag(3, 1) rotated by 45 degrees
        let a = vec![2.0, 1.0, 1.0, 2.0];
        let mut ev = symmetric_eigenvalues(a, 2);
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((ev[0] - 3.0).abs() < 1e-10);
        assert!((ev[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn singular_values_of_rank_one() {
        // rows all equal => centered matrix is zero
        let e = vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        let sv = centered_singular_values(&e, 3, 2);
        assert!(sv.iter().all(|&s| s.abs() < 1e-12));
    }

    #[test]
    fn chi2_gof_detects_mismatch() {
        let (_, p_ok) = chi2_gof(&[250, 247, 260, 243], &[0.25; 4]).unwrap();
        assert!(p_ok > 0.01);
        let (_, p_bad) = chi2_gof(&[400, 200, 200, 200], &[0.25; 4]).unwrap();
        assert!(p_bad < 1e-6);
    }
}
