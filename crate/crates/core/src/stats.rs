//! Descriptive statistics and the distribution tests used by the backtest.

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (divisor `n − 1`); zero for fewer than two
/// values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Central moments `(m2, m3, m4)` with divisor `n`.
pub fn central_moments(xs: &[f64]) -> (f64, f64, f64) {
    let m = mean(xs);
    let n = xs.len() as f64;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for x in xs {
        let d = x - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    (m2 / n, m3 / n, m4 / n)
}

/// Population skewness `m3 / m2^{3/2}`; zero for constant data.
pub fn skewness(xs: &[f64]) -> f64 {
    let (m2, m3, _) = central_moments(xs);
    if m2 <= 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

/// Population excess kurtosis `m4 / m2² − 3`; zero for constant data.
pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    let (m2, _, m4) = central_moments(xs);
    if m2 <= 0.0 {
        0.0
    } else {
        m4 / (m2 * m2) - 3.0
    }
}

/// Percentile `p ∈ [0, 100]` by linear interpolation between order
/// statistics at rank `p/100 · (n − 1)`.
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, p)
}

pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Mean over sample standard deviation; zero when the deviation is zero.
pub fn sharpe(xs: &[f64]) -> f64 {
    let s = sample_std(xs);
    if s > 0.0 {
        mean(xs) / s
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JarqueBera {
    pub statistic: f64,
    pub p_value: f64,
}

/// `JB = n/6 · (S² + K²/4)` from skewness and excess kurtosis; the p-value
/// is the χ²(2) survival function `exp(−JB/2)`.
pub fn jb_from_moments(n: usize, skew: f64, ex_kurt: f64) -> JarqueBera {
    let statistic = n as f64 / 6.0 * (skew * skew + ex_kurt * ex_kurt / 4.0);
    JarqueBera {
        statistic,
        p_value: (-statistic / 2.0).exp(),
    }
}

/// Jarque–Bera normality test. Constant samples give `JB = 0`, `p = 1`.
pub fn jarque_bera(xs: &[f64]) -> Result<JarqueBera> {
    if xs.len() < 2 {
        return Err(Error::InsufficientData {
            need: 2,
            got: xs.len(),
        });
    }
    Ok(jb_from_moments(xs.len(), skewness(xs), excess_kurtosis(xs)))
}

/// One-sample Kolmogorov–Smirnov statistic `sup |F_n − F|`.
pub fn ks_statistic(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in v.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Asymptotic KS p-value with the small-sample correction
/// `λ = (√n + 0.12 + 0.11/√n)·D` and the Kolmogorov series
/// `Q(λ) = 2 Σ (−1)^{k−1} e^{−2k²λ²}`.
pub fn ks_p_value(n: usize, d: f64) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
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
