//! Response-time distributions built from independent exponential stages.
//!
//! A distribution is a finite mixture of components. Each component is an
//! independent sum of terms; a term is either `Exp(rate)` or a zero-inflated
//! exponential (`Exp(rate)` with probability `p`, zero otherwise), which is
//! the M/M/1 waiting time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative gap below which two exponential rates are treated as equal.
pub const CONFLUENCE_GAP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Term {
    Exp { rate: f64 },
    ZeroOr { prob: f64, rate: f64 },
}

impl Term {
    pub fn mean(&self) -> f64 {
        match *self {
            Term::Exp { rate } => 1.0 / rate,
            Term::ZeroOr { prob, rate } => prob / rate,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Term::Exp { rate } => 1.0 / (rate * rate),
            Term::ZeroOr { prob, rate } => (2.0 * prob - prob * prob) / (rate * rate),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub terms: Vec<Term>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseDist {
    pub components: Vec<Component>,
}

impl ResponseDist {
    /// Point mass at zero.
    pub fn zero() -> Self {
        ResponseDist { components: vec![Component { weight: 1.0, terms: Vec::new() }] }
    }

    pub fn exp(rate: f64) -> Result<Self> {
        check_rate(rate)?;
        Ok(ResponseDist { components: vec![Component { weight: 1.0, terms: vec![Term::Exp { rate }] }] })
    }

    /// Response time of an M/M/1 FCFS queue: `Exp(service - arrival)`.
    pub fn mm1_response(arrival: f64, service: f64) -> Result<Self> {
        if !(arrival < service) {
            return Err(Error::Validation(format!("M/M/1 with arrival {arrival} >= service {service}")));
        }
        Self::exp(service - arrival)
    }

    /// Waiting time of an M/M/1 FCFS queue: zero with probability `1 - rho`,
    /// otherwise `Exp(service - arrival)`.
    pub fn mm1_waiting(arrival: f64, service: f64) -> Result<Self> {
        if !(arrival < service) || arrival < 0.0 {
            return Err(Error::Validation(format!("M/M/1 with arrival {arrival} >= service {service}")));
        }
        Ok(ResponseDist {
            components: vec![Component {
                weight: 1.0,
                terms: vec![Term::ZeroOr { prob: arrival / service, rate: service - arrival }],
            }],
        })
    }

    /// Distribution of the sum of independent draws from `self` and `other`.
    pub fn convolve(&self, other: &ResponseDist) -> ResponseDist {
        let mut components = Vec::with_capacity(self.components.len() * other.components.len());
        for a in &self.components {
            for b in &other.components {
                let mut terms = a.terms.clone();
                terms.extend(b.terms.iter().copied());
                components.push(Component { weight: a.weight * b.weight, terms });
            }
        }
        ResponseDist { components }
    }

    /// Mixture of distributions with the given weights.
    pub fn mixture(parts: &[(f64, ResponseDist)]) -> Result<ResponseDist> {
        let total: f64 = parts.iter().map(|p| p.0).sum();
        if !(total > 0.0) || parts.iter().any(|p| p.0 < 0.0) {
            return Err(Error::Validation("mixture weights must be nonnegative with positive sum".into()));
        }
        let components = parts
            .iter()
            .flat_map(|(w, d)| {
                d.components.iter().map(move |c| Component { weight: c.weight * w / total, terms: c.terms.clone() })
            })
            .filter(|c| c.weight > 0.0)
            .collect();
        Ok(ResponseDist { components })
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.terms.iter().map(Term::mean).sum::<f64>()).sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        let second: f64 = self
            .components
            .iter()
            .map(|c| {
                let m: f64 = c.terms.iter().map(Term::mean).sum();
                let v: f64 = c.terms.iter().map(Term::variance).sum();
                c.weight * (v + m * m)
            })
            .sum();
        (second - mean * mean).max(0.0)
    }

    /// Probability of a zero value.
    pub fn atom_at_zero(&self) -> f64 {
        self.components
            .iter()
            .map(|c| {
                c.weight
                    * c.terms
                        .iter()
                        .map(|t| match *t {
                            Term::Exp { .. } => 0.0,
                            Term::ZeroOr { prob, .. } => 1.0 - prob,
                        })
                        .product::<f64>()
            })
            .sum()
    }

    /// `P(T > t)`.
    pub fn survival(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 1.0;
        }
        let mut total = 0.0;
        for c in &self.components {
            let fixed: Vec<f64> = c
                .terms
                .iter()
                .filter_map(|t| match *t {
                    Term::Exp { rate } => Some(rate),
                    _ => None,
                })
                .collect();
            let optional: Vec<(f64, f64)> = c
                .terms
                .iter()
                .filter_map(|t| match *t {
                    Term::ZeroOr { prob, rate } => Some((prob, rate)),
                    _ => None,
                })
                .collect();
            for mask in 0u64..1 << optional.len() {
                let mut p = c.weight;
                let mut rates = fixed.clone();
                for (k, &(prob, rate)) in optional.iter().enumerate() {
                    if mask >> k & 1 == 1 {
                        p *= prob;
                        rates.push(rate);
                    } else {
                        p *= 1.0 - prob;
                    }
                }
                if p > 0.0 {
                    total += p * hypoexp_survival(&rates, t);
                }
            }
        }
        total.clamp(0.0, 1.0)
    }

    /// `P(T <= t)`.
    pub fn cdf(&self, t: f64) -> f64 {
        1.0 - self.survival(t)
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Validation(format!("quantile level {p} outside [0, 1)")));
        }
        if p <= self.atom_at_zero() {
            return Ok(0.0);
        }
        let mut hi = self.mean().max(1e-12) + 10.0 * self.variance().sqrt();
        while self.cdf(hi) < p {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * hi {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mut u: f64 = rng.gen();
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            if u < c.weight {
                chosen = c;
                break;
            }
            u -= c.weight;
        }
        chosen
            .terms
            .iter()
            .map(|t| match *t {
                Term::Exp { rate } => exp_sample(rng, rate),
                Term::ZeroOr { prob, rate } => {
                    if rng.gen::<f64>() < prob {
                        exp_sample(rng, rate)
                    } else {
                        0.0
                    }
                }
            })
            .sum()
    }
}

fn exp_sample<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    let u: f64 = rng.gen();
    -(1.0 - u).ln() / rate
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::Validation(format!("exponential rate {rate} must be positive")));
    }
    Ok(())
}

/// Survival function of a sum of independent exponentials, by partial
/// fractions over distinct rates with their multiplicities.
pub fn hypoexp_survival(rates: &[f64], t: f64) -> f64 {
    if rates.is_empty() {
        return if t < 0.0 { 1.0 } else { 0.0 };
    }
    let groups = group_rates(rates);
    let mut s = 0.0;
    for (k, &(r, m)) in groups.iter().enumerate() {
        let coeffs = partial_fraction(&groups, k);
        let rt = r * t;
        let decay = (-rt).exp();
        for (j, a) in coeffs.iter().enumerate() {
            let order = j + 1;
            let mut poly = 0.0;
            let mut term = 1.0;
            for q in 0..order {
                if q > 0 {
                    term *= rt / q as f64;
                }
                poly += term;
            }
            s += a / r.powi(order as i32) * decay * poly;
        }
        let _ = m;
    }
    s.clamp(0.0, 1.0)
}

/// Merges rates closer than [`CONFLUENCE_GAP`] (relative) and counts them.
fn group_rates(rates: &[f64]) -> Vec<(f64, usize)> {
    let mut sorted = rates.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut groups: Vec<(f64, usize, f64)> = Vec::new();
    for r in sorted {
        match groups.last_mut() {
            Some(g) if (r - g.0).abs() <= CONFLUENCE_GAP * r.max(g.0) => {
                g.2 += r;
                g.1 += 1;
                g.0 = g.2 / g.1 as f64;
            }
            _ => groups.push((r, 1, r)),
        }
    }
    groups.into_iter().map(|g| (g.0, g.1)).collect()
}

/// Coefficients `A_{k,j}`, `j = 1..m_k`, of `1/(s + r_k)^j` in the expansion of
/// `prod_l (r_l / (r_l + s))^{m_l}`.
fn partial_fraction(groups: &[(f64, usize)], k: usize) -> Vec<f64> {
    let (rk, mk) = groups[k];
    let others: Vec<(f64, usize)> = groups.iter().enumerate().filter(|(l, _)| *l != k).map(|(_, g)| *g).collect();
    // G(s) = C prod_{l != k} (s + r_l)^{-m_l}, evaluated with derivatives at s = -r_k.
    let log_c: f64 = groups.iter().map(|&(r, m)| m as f64 * r.ln()).sum();
    let mut g0_log = log_c;
    let mut sign = 1.0;
    for &(r, m) in &others {
        let d = r - rk;
        g0_log -= m as f64 * d.abs().ln();
        if d < 0.0 && m % 2 == 1 {
            sign = -sign;
        }
    }
    let g0 = sign * g0_log.exp();
    // u^{(p)}(s0) for p >= 1, where u = ln G.
    let u = |p: usize| -> f64 {
        let mut fact = 1.0;
        for q in 1..p {
            fact *= q as f64;
        }
        let sgn = if (p - 1).is_multiple_of(2) { 1.0 } else { -1.0 };
        -others.iter().map(|&(r, m)| m as f64 * sgn * fact / (r - rk).powi(p as i32)).sum::<f64>()
    };
    let mut derivs = vec![g0];
    for n in 0..mk.saturating_sub(1) {
        let mut next = 0.0;
        let mut binom = 1.0;
        for (p, d) in derivs.iter().enumerate() {
            if p > 0 {
                binom = binom * (n - p + 1) as f64 / p as f64;
            }
            next += binom * d * u(n + 1 - p);
        }
        derivs.push(next);
    }
    (1..=mk)
        .map(|j| {
            let n = mk - j;
            let mut fact = 1.0;
            for q in 1..=n {
                fact *= q as f64;
            }
            derivs[n] / fact
        })
        .collect()
}

/// Number of failures before the first success with success probability `success`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometric {
    pub success: f64,
}

impl Geometric {
    pub fn pmf(&self, n: u64) -> f64 {
        self.success * (1.0 - self.success).powi(n as i32)
    }

    pub fn mean(&self) -> f64 {
        (1.0 - self.success) / self.success
    }
}

/// Splits a geometric count with `P(X = n) = (1 - p) p^n` into types, each
/// unit being of type `i` with probability `q_i / p`. The per-type counts are
/// independent geometrics with success probability `1 - q_i / (q_i + 1 - p)`.
pub fn split_geometric(p: f64, q: &[f64]) -> Result<Vec<Geometric>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Validation(format!("geometric parameter {p} outside [0, 1)")));
    }
    if q.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::Validation("split probabilities must be nonnegative".into()));
    }
    let total: f64 = q.iter().sum();
    if total > p * (1.0 + 1e-12) + 1e-15 {
        return Err(Error::Validation(format!("split probabilities sum to {total} > {p}")));
    }
    Ok(q.iter().map(|&qi| Geometric { success: 1.0 - qi / (qi + 1.0 - p) }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn waiting_time_mixture() {
        let d = ResponseDist::mm1_waiting(0.5, 1.4).unwrap();
        let rho = 0.5 / 1.4;
        assert!((d.atom_at_zero() - (1.0 - rho)).abs() < 1e-15);
        assert!((d.mean() - rho / 0.9).abs() < 1e-15);
        assert!((d.cdf(1.0) - (1.0 - rho * (-0.9f64).exp())).abs() < 1e-14);
    }

    #[test]
    fn two_stage_sum() {
        let d = ResponseDist::exp(1.0).unwrap().convolve(&ResponseDist::exp(1.2).unwrap());
        assert!((d.mean() - (1.0 + 1.0 / 1.2)).abs() < 1e-14);
        let t: f64 = 0.7;
        let exact = 1.0 - (1.2 * (-t).exp() - (-1.2 * t).exp()) / 0.2;
        assert!((d.cdf(t) - exact).abs() < 1e-13);
    }

    #[test]
    fn repeated_rates_are_erlang() {
        let mut d = ResponseDist::exp(2.0).unwrap();
        for _ in 0..3 {
            d = d.convolve(&ResponseDist::exp(2.0).unwrap());
        }
        let t: f64 = 1.3;
        let x = 2.0 * t;
        let exact = (-x).exp() * (1.0 + x + x * x / 2.0 + x * x * x / 6.0);
        assert!((d.survival(t) - exact).abs() < 1e-13);
    }

    #[test]
    fn quantile_inverts_cdf() {
        let d = ResponseDist::mm1_waiting(0.3, 1.0)
            .unwrap()
            .convolve(&ResponseDist::exp(0.7).unwrap())
            .convolve(&ResponseDist::exp(0.9).unwrap());
        for p in [0.1, 0.5, 0.9, 0.999] {
            let q = d.quantile(p).unwrap();
            assert!((d.cdf(q) - p).abs() < 1e-10);
        }
    }

    #[test]
    fn sample_mean_matches() {
        let d = ResponseDist::mm1_waiting(0.5, 1.4).unwrap().convolve(&ResponseDist::exp(0.7).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mean = (0..n).map(|_| d.sample(&mut rng)).sum::<f64>() / n as f64;
        let se = (d.variance() / n as f64).sqrt();
        assert!((mean - d.mean()).abs() < 4.0 * se);
    }

    #[test]
    fn geometric_split() {
        let parts = split_geometric(0.6, &[0.2, 0.4, 0.0]).unwrap();
        assert!((parts[0].success - (1.0 - 0.2 / 0.6)).abs() < 1e-15);
        assert_eq!(parts[2].success, 1.0);
        let total_mean: f64 = parts.iter().map(Geometric::mean).sum();
        assert!((total_mean - 0.6 / 0.4).abs() < 1e-12);
        assert!(split_geometric(0.6, &[0.5, 0.5]).is_err());
        assert!(split_geometric(1.0, &[0.5]).is_err());
    }
}
