//! Aggregated forms of the product-form distributions.
//!
//! Per-class counts `x` carry the weight `Phi(x) prod_i lambda_i^{x_i}` with
//! `Phi(x) = (1/mu(x)) sum_{i: x_i > 0} Phi(x - e_i)`. Busy-server (or
//! in-service class) skeletons with geometric gap counts give the partially
//! aggregated forms, from which conditional queueing times follow. The
//! probability of an empty system and mean class counts also satisfy
//! recursions over systems with one server removed.

use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Sub};

use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

use crate::assignment::{idle_order_weights, ActivationTable, TABLE_SERVER_CAP};
use crate::detailed::{Normalization, ProductForm};
use crate::dist::ResponseDist;
use crate::error::{Error, Result};
use crate::model::{BitSet, ModelKind, SystemSpec};
use crate::oi::OiRate;

/// Largest number of count vectors held in one level of a sweep.
pub const LEVEL_CAP: usize = 4_000_000;

/// Largest class count for which sums are organized by support set.
pub const SUPPORT_CLASS_CAP: usize = 22;

const MAX_LEVELS: usize = 200_000;

fn indicator(set: BitSet, n: usize) -> Vec<u32> {
    (0..n).map(|i| set.contains(i) as u32).collect()
}

fn support_of(x: &[u32]) -> BitSet {
    BitSet::from_indices(x.iter().enumerate().filter(|(_, &v)| v > 0).map(|(i, _)| i))
}

/// Departure rate of any sequence whose set of items is `set`, when the rate
/// depends on that set only.
fn set_rate(rate: &OiRate, set: BitSet) -> f64 {
    rate.total_of_counts(&indicator(set, rate.items()))
}

fn depends_on_support_only(rate: &OiRate) -> bool {
    matches!(rate, OiRate::Pooled(p) if p.linear.iter().all(|&g| g == 0.0))
}

/// Sum of `Phi(x) prod a^x` over all count vectors, level by level in the
/// total count.
pub struct LevelSweep<'a> {
    arrivals: &'a [f64],
    rate: &'a OiRate,
    envelope: f64,
    filter: Option<&'a dyn Fn(BitSet) -> bool>,
    track: bool,
}

#[derive(Clone, Debug, Default)]
pub struct SweepResult {
    pub total: f64,
    /// Estimated relative mass beyond the last level (zero when exact).
    pub tail_bound: f64,
    pub exact: bool,
    pub levels: usize,
    /// Mass by support set, when tracked.
    pub by_support: HashMap<u64, f64>,
}

impl<'a> LevelSweep<'a> {
    pub fn new(arrivals: &'a [f64], rate: &'a OiRate) -> Self {
        LevelSweep { arrivals, rate, envelope: 0.0, filter: None, track: false }
    }

    /// Ratio bounding the decay of level masses.
    pub fn envelope(mut self, r: f64) -> Self {
        self.envelope = r;
        self
    }

    /// Keeps only count vectors whose support passes `f`; `f` must be closed
    /// under taking subsets.
    pub fn support_filter(mut self, f: &'a dyn Fn(BitSet) -> bool) -> Self {
        self.filter = Some(f);
        self
    }

    pub fn track_supports(mut self) -> Self {
        self.track = true;
        self
    }

    fn allowed(&self, set: BitSet) -> bool {
        self.filter.is_none_or(|f| f(set))
    }

    pub fn total(&self, tol: f64) -> Result<SweepResult> {
        if depends_on_support_only(self.rate) && self.arrivals.len() <= SUPPORT_CLASS_CAP {
            self.by_support_sets()
        } else {
            self.by_levels(tol)
        }
    }

    /// Exact sum when the rate depends on the support only: with `T(A)` the
    /// mass of vectors with support `A`,
    /// `T(A) = sum_{i in A} a_i T(A \ i) / (mu(A) - a(A))`.
    fn by_support_sets(&self) -> Result<SweepResult> {
        let j = self.arrivals.len();
        let size = 1usize << j;
        let mut t = vec![0.0; size];
        t[0] = 1.0;
        let mut total = 1.0;
        for mask in 1..size {
            let set = BitSet(mask as u64);
            if !self.allowed(set) {
                continue;
            }
            let a: f64 = set.iter().map(|i| self.arrivals[i]).sum();
            let gap = set_rate(self.rate, set) - a;
            if !(gap > 0.0) {
                return Err(Error::Unstable { witness: set.iter().map(|i| (i + 1).to_string()).collect(), margin: gap });
            }
            t[mask] = set.iter().map(|i| self.arrivals[i] * t[set.without(i).0 as usize]).sum::<f64>() / gap;
            total += t[mask];
        }
        let by_support = if self.track {
            t.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(m, &w)| (m as u64, w)).collect()
        } else {
            HashMap::new()
        };
        Ok(SweepResult { total, tail_bound: 0.0, exact: true, levels: 0, by_support })
    }

    fn by_levels(&self, tol: f64) -> Result<SweepResult> {
        let j = self.arrivals.len();
        let mut prev: HashMap<Vec<u32>, f64> = HashMap::new();
        prev.insert(vec![0; j], 1.0);
        let mut total = 1.0;
        let mut comp = 0.0;
        let mut by_support: HashMap<u64, f64> = HashMap::new();
        if self.track {
            by_support.insert(0, 1.0);
        }
        let mut last = 1.0;
        let mut tail = f64::INFINITY;
        for level in 1..=MAX_LEVELS {
            let mut next: HashMap<Vec<u32>, f64> = HashMap::with_capacity(prev.len() * 2);
            for x in prev.keys() {
                for i in 0..j {
                    let mut y = x.clone();
                    y[i] += 1;
                    if next.contains_key(&y) || !self.allowed(support_of(&y)) {
                        continue;
                    }
                    let mu = self.rate.total_of_counts(&y);
                    let mut s = 0.0;
                    for k in 0..j {
                        if y[k] > 0 {
                            y[k] -= 1;
                            s += self.arrivals[k] * prev.get(&y).copied().unwrap_or(0.0);
                            y[k] += 1;
                        }
                    }
                    next.insert(y, s / mu);
                }
            }
            if next.len() > LEVEL_CAP {
                return Err(Error::TruncationFailure { achieved: tail, requested: tol });
            }
            let sum: f64 = next.values().sum();
            // Kahan summation of the level masses.
            let yv = sum - comp;
            let t = total + yv;
            comp = (t - total) - yv;
            total = t;
            if self.track {
                for (x, w) in &next {
                    *by_support.entry(support_of(x).0).or_insert(0.0) += w;
                }
            }
            let ratio = if last > 0.0 { sum / last } else { 0.0 };
            last = sum;
            prev = next;
            if sum == 0.0 {
                return Ok(SweepResult { total, tail_bound: 0.0, exact: false, levels: level, by_support });
            }
            let q = ratio.max(self.envelope);
            if q < 1.0 && level >= 2 {
                tail = sum * q / (1.0 - q) / total;
                if tail <= tol {
                    return Ok(SweepResult { total, tail_bound: tail, exact: false, levels: level, by_support });
                }
            }
        }
        Err(Error::TruncationFailure { achieved: tail, requested: tol })
    }
}

/// Table of `Phi(x)` for all count vectors with total at most a frontier.
#[derive(Clone, Debug)]
pub struct PhiTable {
    arrivals: Vec<f64>,
    bound: usize,
    phi: HashMap<Vec<u32>, f64>,
    rates: HashMap<Vec<u32>, f64>,
}

impl PhiTable {
    pub fn build(arrivals: &[f64], rate: &OiRate, bound: usize) -> Result<Self> {
        let j = arrivals.len();
        let mut phi: HashMap<Vec<u32>, f64> = HashMap::new();
        let mut rates: HashMap<Vec<u32>, f64> = HashMap::new();
        phi.insert(vec![0; j], 1.0);
        rates.insert(vec![0; j], 0.0);
        let mut level: Vec<Vec<u32>> = vec![vec![0; j]];
        for _ in 0..bound {
            let mut next = Vec::new();
            for x in &level {
                for i in 0..j {
                    let mut y = x.clone();
                    y[i] += 1;
                    if phi.contains_key(&y) {
                        continue;
                    }
                    let mu = rate.total_of_counts(&y);
                    if !(mu > 0.0) {
                        return Err(Error::InvalidState(format!("count vector {y:?} has zero departure rate")));
                    }
                    let mut s = 0.0;
                    for k in 0..j {
                        if y[k] > 0 {
                            y[k] -= 1;
                            s += phi[&y];
                            y[k] += 1;
                        }
                    }
                    phi.insert(y.clone(), s / mu);
                    rates.insert(y.clone(), mu);
                    next.push(y);
                }
            }
            if phi.len() > LEVEL_CAP {
                return Err(Error::SizeCap { what: "count vectors in table".into(), size: phi.len(), cap: LEVEL_CAP });
            }
            level = next;
        }
        Ok(PhiTable { arrivals: arrivals.to_vec(), bound, phi, rates })
    }

    /// Table for the collaborative service of `spec`.
    pub fn for_spec(spec: &SystemSpec, bound: usize) -> Result<Self> {
        let arrivals: Vec<f64> = (0..spec.num_classes()).map(|i| spec.arrival(i)).collect();
        Self::build(&arrivals, &OiRate::job_service(spec), bound)
    }

    pub fn bound(&self) -> usize {
        self.bound
    }

    pub fn phi(&self, x: &[u32]) -> Option<f64> {
        self.phi.get(x).copied()
    }

    /// Total departure rate `mu(x)`.
    pub fn rate(&self, x: &[u32]) -> Option<f64> {
        self.rates.get(x).copied()
    }

    /// Unnormalized aggregate weight `Phi(x) prod a_i^{x_i}`.
    pub fn weight(&self, x: &[u32]) -> Option<f64> {
        let p = self.phi(x)?;
        Some(p * x.iter().zip(&self.arrivals).map(|(&n, a)| a.powi(n as i32)).product::<f64>())
    }

    /// Balanced-fairness rates `Phi(x - e_i) / Phi(x)`.
    pub fn balanced_rates(&self, x: &[u32]) -> Option<Vec<f64>> {
        let p = self.phi(x)?;
        let mut y = x.to_vec();
        (0..x.len())
            .map(|i| {
                if x[i] == 0 {
                    return Some(0.0);
                }
                y[i] -= 1;
                let r = self.phi(&y).map(|q| q / p);
                y[i] += 1;
                r
            })
            .collect()
    }

    /// Largest residual of `phi_i(x) phi_j(x - e_i) = phi_j(x) phi_i(x - e_j)`
    /// over pairs of classes present in `x`, relative to the larger side.
    pub fn balance_residual(&self, x: &[u32]) -> Option<f64> {
        let rates = self.balanced_rates(x)?;
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            for j in 0..x.len() {
                if i == j || x[i] == 0 || x[j] == 0 {
                    continue;
                }
                let mut xi = x.to_vec();
                xi[i] -= 1;
                let mut xj = x.to_vec();
                xj[j] -= 1;
                let lhs = rates[i] * self.balanced_rates(&xi)?[j];
                let rhs = rates[j] * self.balanced_rates(&xj)?[i];
                worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
            }
        }
        Some(worst)
    }
}

/// `Phi` table for the collaborative service of `spec` and the probability of
/// the empty system.
pub fn phi_table(spec: &SystemSpec, frontier: usize) -> Result<(PhiTable, f64)> {
    let table = PhiTable::for_spec(spec, frontier)?;
    let pf = ProductForm::new(spec)?;
    let norm = pf.normalization(1e-13)?;
    Ok((table, 1.0 / norm.constant))
}

/// Stationary probability of the per-class count vector `x`.
pub fn pi_aggregate(table: &PhiTable, pi_empty: f64, x: &[u32]) -> Result<f64> {
    table
        .weight(x)
        .map(|w| pi_empty * w)
        .ok_or_else(|| Error::InvalidState(format!("count vector {x:?} lies outside the table frontier {}", table.bound())))
}

/// Balanced-fairness rates of every class in state `x`.
pub fn balanced_rates(table: &PhiTable, x: &[u32]) -> Result<Vec<f64>> {
    table
        .balanced_rates(x)
        .ok_or_else(|| Error::InvalidState(format!("count vector {x:?} lies outside the table frontier {}", table.bound())))
}

/// Numbers that the server-removal recursions can run on.
pub trait Scalar:
    Clone + PartialOrd + Zero + One + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self>
{
    fn arrival(spec: &SystemSpec, classes: BitSet) -> Self;
    fn service(spec: &SystemSpec, servers: BitSet) -> Self;
    fn to_f64(&self) -> f64;
}

impl Scalar for f64 {
    fn arrival(spec: &SystemSpec, classes: BitSet) -> Self {
        spec.arrival_rate(classes)
    }

    fn service(spec: &SystemSpec, servers: BitSet) -> Self {
        spec.service_rate(servers)
    }

    fn to_f64(&self) -> f64 {
        *self
    }
}

impl Scalar for BigRational {
    fn arrival(spec: &SystemSpec, classes: BitSet) -> Self {
        spec.exact_arrival_rate(classes)
    }

    fn service(spec: &SystemSpec, servers: BitSet) -> Self {
        spec.exact_service_rate(servers)
    }

    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
}

/// Memoized `pi(empty)` of the collaborative subsystems obtained by keeping a
/// subset of classes:
/// `f(C) = (mu(S(C)) - lambda(C)) / sum_{k in S(C)} mu_k / f(C \ C_k)`.
pub struct EmptyRecursion<'a, T: Scalar> {
    spec: &'a SystemSpec,
    memo: HashMap<u64, T>,
}

pub type EmptyMemo<'a> = EmptyRecursion<'a, f64>;

impl<'a, T: Scalar> EmptyRecursion<'a, T> {
    pub fn new(spec: &'a SystemSpec) -> Self {
        let mut memo = HashMap::new();
        memo.insert(0, T::one());
        EmptyRecursion { spec, memo }
    }

    pub fn pi_empty(&mut self, classes: BitSet) -> Result<T> {
        if let Some(v) = self.memo.get(&classes.0) {
            return Ok(v.clone());
        }
        let spec = self.spec;
        let servers = spec.servers_of(classes);
        let gap = T::service(spec, servers) - T::arrival(spec, classes);
        if !(gap > T::zero()) {
            return Err(Error::Unstable { witness: spec.class_labels(classes), margin: gap.to_f64() });
        }
        let mut denom = T::zero();
        for k in servers.iter() {
            let sub = self.pi_empty(classes.difference(spec.server_classes(k)))?;
            denom = denom + T::service(spec, BitSet::single(k)) / sub;
        }
        let v = gap / denom;
        self.memo.insert(classes.0, v.clone());
        Ok(v)
    }

    /// Probability that server `k` is idle in the subsystem of `classes`.
    pub fn psi(&mut self, classes: BitSet, k: usize) -> Result<T> {
        let full = self.pi_empty(classes)?;
        let sub = self.pi_empty(classes.difference(self.spec.server_classes(k)))?;
        Ok(full / sub)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmptyReport<T> {
    pub pi_empty: T,
    /// Probability that each server is idle.
    pub psi: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanCounts<T> {
    pub total: T,
    pub per_class: Vec<T>,
}

fn require_recursion_kind(spec: &SystemSpec) -> Result<()> {
    if !spec.kind().is_bipartite() || matches!(spec.kind(), ModelKind::ClosedToken | ModelKind::Dbma) {
        return Err(Error::Unsupported(format!("server-removal recursions do not apply to the {} kind", spec.kind())));
    }
    if (0..spec.num_classes()).any(|i| spec.class_abandonment(i) > 0.0) {
        return Err(Error::Unsupported("server-removal recursions assume no abandonment".into()));
    }
    Ok(())
}

/// Probability of an empty collaborative system and per-server idle
/// probabilities, by recursion over systems with a server removed.
pub fn pi_empty_recursive<T: Scalar>(spec: &SystemSpec) -> Result<EmptyReport<T>> {
    require_recursion_kind(spec)?;
    let mut rec = EmptyRecursion::<T>::new(spec);
    let all = spec.all_classes();
    let pi_empty = rec.pi_empty(all)?;
    let psi = (0..spec.num_servers()).map(|k| rec.psi(all, k)).collect::<Result<Vec<_>>>()?;
    Ok(EmptyReport { pi_empty, psi })
}

/// Mean number of jobs of each class in the collaborative system:
/// `L_i(C) = [lambda_i + sum_{k in S(C) \ S_i} mu_k psi_k L_i(C \ C_k)] / (mu(S(C)) - lambda(C))`.
pub fn mean_counts<T: Scalar>(spec: &SystemSpec) -> Result<MeanCounts<T>> {
    require_recursion_kind(spec)?;
    let mut rec = EmptyRecursion::<T>::new(spec);
    let mut memo: HashMap<(u64, usize), T> = HashMap::new();
    let all = spec.all_classes();
    let per_class = (0..spec.num_classes())
        .map(|i| class_mean(spec, &mut rec, &mut memo, all, i))
        .collect::<Result<Vec<_>>>()?;
    let total = per_class.iter().cloned().fold(T::zero(), |a, b| a + b);
    Ok(MeanCounts { total, per_class })
}

fn class_mean<T: Scalar>(
    spec: &SystemSpec,
    rec: &mut EmptyRecursion<T>,
    memo: &mut HashMap<(u64, usize), T>,
    classes: BitSet,
    i: usize,
) -> Result<T> {
    if !classes.contains(i) {
        return Ok(T::zero());
    }
    if let Some(v) = memo.get(&(classes.0, i)) {
        return Ok(v.clone());
    }
    let servers = spec.servers_of(classes);
    let gap = T::service(spec, servers) - T::arrival(spec, classes);
    if !(gap > T::zero()) {
        return Err(Error::Unstable { witness: spec.class_labels(classes), margin: gap.to_f64() });
    }
    let mut num = T::arrival(spec, BitSet::single(i));
    for k in servers.difference(spec.class_servers(i)).iter() {
        let psi = rec.psi(classes, k)?;
        let sub = class_mean(spec, rec, memo, classes.difference(spec.server_classes(k)), i)?;
        num = num + T::service(spec, BitSet::single(k)) * psi * sub;
    }
    let v = num / gap;
    memo.insert((classes.0, i), v.clone());
    Ok(v)
}

/// Sum over all randomized-assignment states of their weights:
/// `sum_B H(B)` with `H(B) = sum_{b in B} lambda_b(B \ b) H(B \ b) / (mu(B) - lambda(R(B)))`.
pub fn interleaved_constant(spec: &SystemSpec, table: &ActivationTable, token_rate: &OiRate) -> Result<f64> {
    let h = busy_order_sums(spec, token_rate, Some(table))?;
    Ok(h.iter().sum())
}

/// For every busy set, the sum over its orders of the activation product
/// (or one, without a table) times `prod_j 1/(mu(b_1..b_j) - lambda(R(b_1..b_j)))`.
fn busy_order_sums(spec: &SystemSpec, service: &OiRate, table: Option<&ActivationTable>) -> Result<Vec<f64>> {
    let m = spec.num_servers();
    if m > TABLE_SERVER_CAP {
        return Err(Error::SizeCap { what: "servers in busy-set sums".into(), size: m, cap: TABLE_SERVER_CAP });
    }
    let size = 1usize << m;
    let mut h = vec![0.0; size];
    h[0] = 1.0;
    for mask in 1..size {
        let set = BitSet(mask as u64);
        let gap = set_rate(service, set) - spec.arrival_rate(spec.classes_within(set));
        if !(gap > 0.0) {
            return Err(Error::Unstable { witness: spec.class_labels(spec.classes_within(set)), margin: gap });
        }
        let s: f64 = set
            .iter()
            .map(|b| {
                let prev = set.without(b);
                table.map_or(1.0, |t| t.rate(prev, b)) * h[prev.0 as usize]
            })
            .sum();
        h[mask] = s / gap;
    }
    Ok(h)
}

/// Normalizing constant of paired matching: job and server sequences of equal
/// length, summed level by level.
pub fn paired_normalization(pf: &ProductForm, max_load: f64, tol: f64) -> Result<Normalization> {
    let spec = pf.spec();
    let (j, m) = (spec.num_classes(), spec.num_servers());
    if j > SUPPORT_CLASS_CAP || m > SUPPORT_CLASS_CAP {
        return Err(Error::SizeCap { what: "classes or servers for paired sums".into(), size: j.max(m), cap: SUPPORT_CLASS_CAP });
    }
    let job_step = SupportLevels::new(pf.job_arrivals(), pf.job_rate());
    let server_step = SupportLevels::new(pf.server_arrivals(), pf.server_rate());
    let mut jobs = vec![0.0; 1 << j];
    let mut servers = vec![0.0; 1 << m];
    jobs[0] = 1.0;
    servers[0] = 1.0;
    let mut total = 1.0;
    let mut last = 1.0;
    let mut tail = f64::INFINITY;
    // Classes a waiting server set excludes from the job side.
    let allowed: Vec<BitSet> =
        (0..1u64 << m).map(|b| spec.all_classes().difference(spec.classes_of(BitSet(b)))).collect();
    for level in 1..=MAX_LEVELS {
        jobs = job_step.step(&jobs);
        servers = server_step.step(&servers);
        let sub = subset_sums(&jobs, j);
        let sum: f64 = servers.iter().enumerate().map(|(b, w)| w * sub[allowed[b].0 as usize]).sum();
        total += sum;
        let ratio = sum / last;
        last = sum;
        if sum == 0.0 {
            return Ok(Normalization { constant: total, tail_bound: 0.0, exact: true });
        }
        let q = ratio.max(max_load * max_load);
        if q < 1.0 && level >= 2 {
            tail = sum * q / (1.0 - q) / total;
            if tail <= tol {
                return Ok(Normalization { constant: total, tail_bound: tail, exact: false });
            }
        }
    }
    Err(Error::TruncationFailure { achieved: tail, requested: tol })
}

/// One-step recursion of level masses by support set:
/// `mu(A) W_n(A) = a(A) W_{n-1}(A) + sum_{i in A} a_i W_{n-1}(A \ i)`.
struct SupportLevels {
    arrivals: Vec<f64>,
    rates: Vec<f64>,
}

impl SupportLevels {
    fn new(arrivals: &[f64], rate: &OiRate) -> Self {
        let n = arrivals.len();
        let rates = (0..1u64 << n).map(|s| if s == 0 { 0.0 } else { set_rate(rate, BitSet(s)) }).collect();
        SupportLevels { arrivals: arrivals.to_vec(), rates }
    }

    fn step(&self, prev: &[f64]) -> Vec<f64> {
        let mut next = vec![0.0; prev.len()];
        for mask in 1..prev.len() {
            let set = BitSet(mask as u64);
            let mut s = 0.0;
            for i in set.iter() {
                s += self.arrivals[i] * (prev[mask] + prev[set.without(i).0 as usize]);
            }
            next[mask] = s / self.rates[mask];
        }
        next
    }
}

/// `out[A] = sum_{B subset of A} w[B]`.
fn subset_sums(w: &[f64], n: usize) -> Vec<f64> {
    let mut out = w.to_vec();
    for i in 0..n {
        for mask in 0..out.len() {
            if mask >> i & 1 == 1 {
                out[mask] += out[mask ^ (1 << i)];
            }
        }
    }
    out
}

/// Partially aggregated state: an ordered list of busy servers (or of classes
/// in service, for collaborative service), the number of queued jobs behind
/// each, and, for longest-idle assignment, the ordered idle servers.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartialState {
    pub busy: Vec<usize>,
    pub gaps: Vec<u32>,
    pub idle: Option<Vec<usize>>,
}

impl PartialState {
    pub fn new(busy: Vec<usize>, gaps: Vec<u32>) -> Self {
        PartialState { busy, gaps, idle: None }
    }

    pub fn with_idle(mut self, idle: Vec<usize>) -> Self {
        self.idle = Some(idle);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartialVariant {
    Rais,
    Alis,
    Collaborative,
}

/// Partially aggregated product form of one system.
pub struct PartialForm<'a> {
    spec: &'a SystemSpec,
    variant: PartialVariant,
    table: Option<&'a ActivationTable>,
    service: OiRate,
    constant: f64,
}

impl<'a> PartialForm<'a> {
    pub fn new(spec: &'a SystemSpec, variant: PartialVariant, table: Option<&'a ActivationTable>) -> Result<Self> {
        spec.require_stable()?;
        let service = match variant {
            PartialVariant::Collaborative => OiRate::job_service(spec),
            _ => OiRate::token_service(spec),
        };
        let constant = match variant {
            PartialVariant::Rais => {
                let t = table.ok_or_else(|| Error::Validation("randomized assignment needs an activation table".into()))?;
                if t.servers() != spec.num_servers() || t.classes() != spec.num_classes() {
                    return Err(Error::Validation("activation table does not match the system".into()));
                }
                interleaved_constant(spec, t, &service)?
            }
            PartialVariant::Alis => {
                let busy = busy_order_sums(spec, &service, None)?;
                let idle = idle_order_weights(spec);
                let all = (1usize << spec.num_servers()) - 1;
                busy.iter().enumerate().map(|(b, w)| w * idle[all ^ b]).sum()
            }
            PartialVariant::Collaborative => {
                let mut rec = EmptyMemo::new(spec);
                1.0 / rec.pi_empty(spec.all_classes())?
            }
        };
        Ok(PartialForm { spec, variant, table, service, constant })
    }

    /// Sum of the weights of all states.
    pub fn constant(&self) -> f64 {
        self.constant
    }

    fn validate(&self, state: &PartialState) -> Result<()> {
        let spec = self.spec;
        let bad = |m: &str| Err(Error::InvalidState(m.into()));
        if state.busy.len() != state.gaps.len() {
            return bad("one gap count is needed per busy entry");
        }
        match self.variant {
            PartialVariant::Collaborative => {
                let mut covered = BitSet::EMPTY;
                for &d in &state.busy {
                    if d >= spec.num_classes() {
                        return bad("unknown class");
                    }
                    if spec.class_servers(d).is_subset(covered) {
                        return bad("a class in service has no server left to it");
                    }
                    covered = covered.union(spec.class_servers(d));
                }
                if state.idle.is_some() {
                    return bad("collaborative states have no idle list");
                }
            }
            _ => {
                let set = BitSet::from_indices(state.busy.iter().copied());
                if set.len() != state.busy.len() || state.busy.iter().any(|&b| b >= spec.num_servers()) {
                    return bad("busy servers must be distinct and known");
                }
                match (&state.idle, self.variant) {
                    (Some(idle), PartialVariant::Alis) => {
                        let iset = BitSet::from_indices(idle.iter().copied());
                        if iset.len() != idle.len() || !iset.is_disjoint(set) || iset.union(set) != spec.all_servers() {
                            return bad("idle and busy servers must partition the servers");
                        }
                    }
                    (None, PartialVariant::Rais) => {}
                    (_, PartialVariant::Alis) => return bad("longest-idle states list the idle servers"),
                    _ => return bad("randomized-assignment states have no idle list"),
                }
            }
        }
        Ok(())
    }

    /// Unnormalized weight (the empty system has weight one, except under
    /// longest-idle assignment where the all-busy empty-queue state does).
    pub fn weight(&self, state: &PartialState) -> Result<f64> {
        self.validate(state)?;
        let spec = self.spec;
        let mut w = 1.0;
        let mut covered = BitSet::EMPTY;
        for (&e, &n) in state.busy.iter().zip(&state.gaps) {
            let prefix = covered;
            covered = match self.variant {
                PartialVariant::Collaborative => covered.union(spec.class_servers(e)),
                _ => covered.with(e),
            };
            let mu = match self.variant {
                PartialVariant::Collaborative => spec.service_rate(covered),
                _ => set_rate(&self.service, covered),
            };
            let alpha = spec.arrival_rate(spec.classes_within(covered)) / mu;
            let head = match self.variant {
                PartialVariant::Rais => self.table.unwrap().rate(prefix, e),
                PartialVariant::Collaborative => spec.arrival(e),
                PartialVariant::Alis => 1.0,
            };
            w *= head / mu * alpha.powi(n as i32);
        }
        if let Some(idle) = &state.idle {
            let mut set = BitSet::EMPTY;
            for &s in idle {
                set = set.with(s);
                w /= spec.arrival_rate(spec.classes_of(set));
            }
        }
        Ok(w)
    }

    pub fn probability(&self, state: &PartialState) -> Result<f64> {
        Ok(self.weight(state)? / self.constant)
    }
}

/// Stationary probability of a partially aggregated state.
pub fn pi_partial_agg(
    spec: &SystemSpec,
    state: &PartialState,
    variant: PartialVariant,
    table: Option<&ActivationTable>,
) -> Result<f64> {
    PartialForm::new(spec, variant, table)?.probability(state)
}

/// Outcome of comparing longest-idle and randomized partial forms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginalCheck {
    pub alis: f64,
    pub rais: f64,
    pub discrepancy: f64,
}

/// Sums the longest-idle probability of `(s, b, n)` over all orders `s` of
/// the idle servers and compares it with the randomized-assignment
/// probability of `(b, n)`.
pub fn alis_rais_marginal_check(
    spec: &SystemSpec,
    busy: &[usize],
    gaps: &[u32],
    table: &ActivationTable,
) -> Result<MarginalCheck> {
    let alis = PartialForm::new(spec, PartialVariant::Alis, None)?;
    let rais = PartialForm::new(spec, PartialVariant::Rais, Some(table))?;
    alis_rais_compare(spec, &alis, &rais, busy, gaps)
}

/// As [`alis_rais_marginal_check`] with prebuilt forms.
pub fn alis_rais_compare(
    spec: &SystemSpec,
    alis: &PartialForm,
    rais: &PartialForm,
    busy: &[usize],
    gaps: &[u32],
) -> Result<MarginalCheck> {
    let r = rais.probability(&PartialState::new(busy.to_vec(), gaps.to_vec()))?;
    let idle: Vec<usize> = spec.all_servers().difference(BitSet::from_indices(busy.iter().copied())).iter().collect();
    let mut a = 0.0;
    for perm in permutations(&idle) {
        a += alis.probability(&PartialState::new(busy.to_vec(), gaps.to_vec()).with_idle(perm))?;
    }
    let discrepancy = (a - r).abs() / a.abs().max(r.abs()).max(f64::MIN_POSITIVE);
    Ok(MarginalCheck { alis: a, rais: r, discrepancy })
}

pub(crate) fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.is_empty() {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for (k, &x) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(k);
        for mut p in permutations(&rest) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}

/// What a queueing time is conditioned on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// Busy servers in arrival order of the jobs they serve.
    BusyServers(Vec<usize>),
    /// Classes of the jobs in service, in arrival order (collaborative service).
    InService(Vec<usize>),
}

/// Queueing time of a class-`class` arrival given the busy servers (or the
/// classes in service): zero when some compatible server is free of earlier
/// jobs, otherwise a sum of exponential stages, one for each prefix from the
/// first that covers the class onwards, with rates `mu(b_1..b_j) - lambda(R(b_1..b_j))`.
pub fn cond_queue_time(spec: &SystemSpec, class: usize, cond: &Conditioning) -> Result<ResponseDist> {
    if class >= spec.num_classes() {
        return Err(Error::Validation(format!("unknown class index {class}")));
    }
    let prefixes: Vec<BitSet> = match cond {
        Conditioning::BusyServers(b) => {
            let set = BitSet::from_indices(b.iter().copied());
            if set.len() != b.len() || b.iter().any(|&s| s >= spec.num_servers()) {
                return Err(Error::InvalidState("busy servers must be distinct and known".into()));
            }
            let mut acc = BitSet::EMPTY;
            b.iter()
                .map(|&s| {
                    acc = acc.with(s);
                    acc
                })
                .collect()
        }
        Conditioning::InService(d) => {
            let mut acc = BitSet::EMPTY;
            let mut out = Vec::new();
            for &c in d {
                if c >= spec.num_classes() || spec.class_servers(c).is_subset(acc) {
                    return Err(Error::InvalidState("a class in service has no server left to it".into()));
                }
                acc = acc.union(spec.class_servers(c));
                out.push(acc);
            }
            out
        }
    };
    let need = spec.class_servers(class);
    let Some(first) = prefixes.iter().position(|p| need.is_subset(*p)) else {
        return Ok(ResponseDist::zero());
    };
    let mut dist = ResponseDist::zero();
    for &p in &prefixes[first..] {
        let rate = spec.service_rate(p) - spec.arrival_rate(spec.classes_within(p));
        if !(rate > 0.0) {
            return Err(Error::Unstable { witness: spec.class_labels(spec.classes_within(p)), margin: rate });
        }
        dist = dist.convolve(&ResponseDist::exp(rate)?);
    }
    Ok(dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::build_activation;
    use crate::model::SystemBuilder;

    fn w_model(kind: ModelKind) -> SystemSpec {
        SystemBuilder::new(kind)
            .class("1", 0.3)
            .class("2", 0.3)
            .class("3", 0.5)
            .server("1", 1.0)
            .server("2", 1.0)
            .edge("1", "1")
            .edge("2", "2")
            .edges("3", &["1", "2"])
            .build()
            .unwrap()
    }

    #[test]
    fn phi_values_for_w_model() {
        let spec = w_model(ModelKind::Collaborative);
        let (table, pi0) = phi_table(&spec, 4).unwrap();
        assert_eq!(table.phi(&[1, 0, 0]), Some(1.0));
        assert_eq!(table.phi(&[0, 0, 1]), Some(0.5));
        assert_eq!(table.phi(&[1, 0, 1]), Some(0.75));
        let p = pi_aggregate(&table, pi0, &[1, 0, 1]).unwrap();
        assert!((p - 0.0354375).abs() < 1e-12);
        let rates = balanced_rates(&table, &[1, 0, 1]).unwrap();
        assert!((rates[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((rates[2] - 4.0 / 3.0).abs() < 1e-15);
        assert!(table.balance_residual(&[1, 1, 1]).unwrap() < 1e-12);
    }

    #[test]
    fn empty_probability_exact() {
        let spec = w_model(ModelKind::Collaborative);
        let r = pi_empty_recursive::<BigRational>(&spec).unwrap();
        assert_eq!(r.pi_empty, BigRational::new(63.into(), 200.into()));
        let f = pi_empty_recursive::<f64>(&spec).unwrap();
        let s: f64 = f.psi.iter().sum();
        assert!((s - 0.9).abs() < 1e-12);
    }

    #[test]
    fn mean_counts_w_model() {
        let spec = w_model(ModelKind::Collaborative);
        let l = mean_counts::<f64>(&spec).unwrap();
        assert!((l.per_class[2] - 5.0 / 9.0).abs() < 1e-12);
        assert!((l.per_class[0] - (0.3 / 0.9 + 0.5 * 0.3 / 0.7)).abs() < 1e-12);
    }

    #[test]
    fn support_sums_match_level_sweep() {
        let spec = w_model(ModelKind::Collaborative);
        let arrivals: Vec<f64> = (0..3).map(|i| spec.arrival(i)).collect();
        let custom_rate = OiRate::job_service(&spec);
        let exact = LevelSweep::new(&arrivals, &custom_rate).total(1e-14).unwrap();
        let hooked = OiRate::custom(3, {
            let rate = custom_rate.clone();
            move |s: &[u8]| rate.total(s)
        });
        let swept = LevelSweep::new(&arrivals, &hooked).envelope(0.55).total(1e-13).unwrap();
        assert!(exact.exact);
        assert!((exact.total - 1.0 / 0.315).abs() < 1e-12);
        assert!((swept.total - exact.total).abs() / exact.total < 1e-11);
    }

    #[test]
    fn collaborative_partial_weight() {
        let spec = w_model(ModelKind::Collaborative);
        let p = pi_partial_agg(&spec, &PartialState::new(vec![2], vec![2]), PartialVariant::Collaborative, None).unwrap();
        assert!((p - 0.315 * 0.25 * 0.3025).abs() < 1e-12);
    }

    #[test]
    fn conditional_queue_times() {
        let spec = w_model(ModelKind::NcRais);
        let both = Conditioning::BusyServers(vec![0, 1]);
        let d3 = cond_queue_time(&spec, 2, &both).unwrap();
        assert!((d3.mean() - 1.0 / 0.9).abs() < 1e-12);
        let d1 = cond_queue_time(&spec, 0, &both).unwrap();
        assert!((d1.mean() - (1.0 / 0.7 + 1.0 / 0.9)).abs() < 1e-12);
        let one = Conditioning::BusyServers(vec![1]);
        assert_eq!(cond_queue_time(&spec, 0, &one).unwrap().mean(), 0.0);
    }

    #[test]
    fn alis_rais_agree() {
        let spec = w_model(ModelKind::NcRais);
        let table = build_activation(&spec).unwrap();
        for busy in [vec![], vec![0], vec![1], vec![0, 1], vec![1, 0]] {
            let gaps: Vec<u32> = busy.iter().map(|_| 1).collect();
            let c = alis_rais_marginal_check(&spec, &busy, &gaps, &table).unwrap();
            assert!(c.discrepancy < 1e-12, "{busy:?}: {c:?}");
        }
    }
}
