//! Distances and tests between simulated and exact results.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// Mean with standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
}

impl Stat {
    /// Sample mean and standard error of the mean; zero error for fewer
    /// than two values.
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Stat { mean, se: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Stat { mean, se: (var / n as f64).sqrt() }
    }
}

/// Total-variation distance between two distributions given as maps. Mass
/// missing from either map is lumped into one extra outcome.
pub fn tv_distance<K: Ord>(a: &BTreeMap<K, f64>, b: &BTreeMap<K, f64>) -> Result<f64> {
    if !a.is_empty() && !b.is_empty() && !a.keys().any(|k| b.contains_key(k)) {
        return Err(Error::Validation("distributions have disjoint supports".into()));
    }
    let mut sum = 0.0;
    for (k, &p) in a {
        sum += (p - b.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, &q) in b {
        if !a.contains_key(k) {
            sum += q;
        }
    }
    let rest_a = (1.0 - a.values().sum::<f64>()).max(0.0);
    let rest_b = (1.0 - b.values().sum::<f64>()).max(0.0);
    sum += (rest_a - rest_b).abs();
    Ok(0.5 * sum)
}

/// Standardized differences of estimates against exact values, for states
/// whose estimate has a positive standard error.
pub fn per_state_z<K: Ord + Clone>(est: &BTreeMap<K, Stat>, exact: &BTreeMap<K, f64>) -> Vec<(K, f64)> {
    est.iter()
        .filter(|(_, s)| s.se > 0.0)
        .map(|(k, s)| (k.clone(), (s.mean - exact.get(k).copied().unwrap_or(0.0)) / s.se))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KsReport {
    pub statistic: f64,
    pub p_value: f64,
    pub samples: usize,
}

impl KsReport {
    pub fn rejected(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// One-sample Kolmogorov-Smirnov test against a continuous distribution
/// function.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsReport> {
    if samples.is_empty() {
        return Err(Error::Validation("no samples to test".into()));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let sn = n.sqrt();
    Ok(KsReport { statistic: d, p_value: kolmogorov_q((sn + 0.12 + 0.11 / sn) * d), samples: xs.len() })
}

/// Tail of the Kolmogorov distribution.
fn kolmogorov_q(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Absolute difference between the sample mean and `expected`.
pub fn mean_gap(samples: &[f64], expected: f64) -> f64 {
    (samples.iter().sum::<f64>() / samples.len() as f64 - expected).abs()
}

/// Sample autocorrelation at `lag`.
pub fn autocorrelation(samples: &[f64], lag: usize) -> f64 {
    let n = samples.len();
    if n <= lag + 1 {
        return 0.0;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var: f64 = samples.iter().map(|x| (x - mean).powi(2)).sum();
    let cov: f64 = (0..n - lag).map(|i| (samples[i] - mean) * (samples[i + lag] - mean)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_inputs_have_zero_distance() {
        let a: BTreeMap<u32, f64> = [(0, 0.25), (1, 0.75)].into();
        assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
        let b: BTreeMap<u32, f64> = [(2, 1.0)].into();
        assert!(tv_distance(&a, &b).is_err());
    }

    #[test]
    fn ks_accepts_matching_law_and_rejects_wrong_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..5000).map(|_| -(1.0 - rng.gen::<f64>()).ln() / 2.0).collect();
        assert!(!ks_test(&xs, |x| 1.0 - (-2.0 * x).exp()).unwrap().rejected(0.01));
        assert!(ks_test(&xs, |x| 1.0 - (-2.4 * x).exp()).unwrap().rejected(0.01));
    }
}
