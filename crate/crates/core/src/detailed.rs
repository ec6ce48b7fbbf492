//! Detailed states and their product-form weights.
//!
//! A detailed state records the order of jobs (and, depending on the model,
//! of idle or waiting servers, or of busy servers interleaved with queued
//! jobs). Every model here has a stationary distribution of product form: a
//! product over positions of an arrival weight divided by an
//! order-independent rate of the prefix.

use std::fmt;

use smallvec::SmallVec;

use crate::aggregate::{self, LevelSweep};
use crate::assignment::ActivationTable;
use crate::error::{Error, Result};
use crate::model::{BitSet, ModelKind, SystemSpec};
use crate::oi::{self, OiRate, PooledRate};

pub type Seq = SmallVec<[u8; 16]>;

/// Marks a busy server in an interleaved sequence.
pub const BUSY_TAG: u8 = 0x80;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DetailedState {
    /// Jobs (or agents) in arrival order: collaborative service and
    /// general-graph matching.
    Jobs(Seq),
    /// Queued jobs and idle (or waiting) servers, each in arrival order:
    /// longest-idle assignment, double-sided matching, paired matching.
    TwoSided { jobs: Seq, servers: Seq },
    /// Busy servers (tagged with [`BUSY_TAG`]) interleaved with queued jobs,
    /// in arrival order of the jobs they hold: randomized assignment.
    Interleaved(Seq),
    /// Busy tokens and idle tokens, each in order: closed token model.
    Tokens { busy: Seq, idle: Seq },
}

impl DetailedState {
    pub fn empty(spec: &SystemSpec) -> Self {
        match spec.kind() {
            ModelKind::Collaborative | ModelKind::Gm => DetailedState::Jobs(Seq::new()),
            ModelKind::NcRais | ModelKind::TokenRais => DetailedState::Interleaved(Seq::new()),
            ModelKind::NcAlis => DetailedState::TwoSided {
                jobs: Seq::new(),
                servers: (0..spec.num_servers() as u8).collect(),
            },
            ModelKind::ClosedToken => DetailedState::Tokens {
                busy: Seq::new(),
                idle: (0..spec.num_servers() as u8).collect(),
            },
            _ => DetailedState::TwoSided { jobs: Seq::new(), servers: Seq::new() },
        }
    }

    /// Builds a job sequence from class ids.
    pub fn jobs(spec: &SystemSpec, classes: &[&str]) -> Result<Self> {
        Ok(DetailedState::Jobs(to_seq(spec.class_ids(classes)?)))
    }

    /// Builds a two-sided state from class ids and server ids.
    pub fn two_sided(spec: &SystemSpec, classes: &[&str], servers: &[&str]) -> Result<Self> {
        Ok(DetailedState::TwoSided { jobs: to_seq(spec.class_ids(classes)?), servers: to_seq(spec.server_ids(servers)?) })
    }

    /// Builds an interleaved state; busy servers are written `[id]`.
    pub fn interleaved(spec: &SystemSpec, entries: &[&str]) -> Result<Self> {
        let mut seq = Seq::new();
        for e in entries {
            match e.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                Some(s) => seq.push(spec.server_ids(&[s])?[0] as u8 | BUSY_TAG),
                None => seq.push(spec.class_ids(&[e])?[0] as u8),
            }
        }
        Ok(DetailedState::Interleaved(seq))
    }

    pub fn tokens(spec: &SystemSpec, busy: &[&str], idle: &[&str]) -> Result<Self> {
        Ok(DetailedState::Tokens { busy: to_seq(spec.server_ids(busy)?), idle: to_seq(spec.server_ids(idle)?) })
    }

    /// Parses the textual form produced by [`DetailedState::label`].
    pub fn parse(spec: &SystemSpec, text: &str) -> Result<Self> {
        let inner = text
            .trim()
            .strip_prefix('(')
            .and_then(|t| t.strip_suffix(')'))
            .ok_or_else(|| Error::InvalidState(format!("state {text:?} must be written in parentheses")))?;
        let split = |part: &str| -> Vec<String> {
            part.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
        };
        let (left, right) = match inner.split_once(';') {
            Some((l, r)) => (split(l), Some(split(r))),
            None => (split(inner), None),
        };
        let l: Vec<&str> = left.iter().map(String::as_str).collect();
        let state = match (spec.kind(), right) {
            (ModelKind::Collaborative | ModelKind::Gm, None) => Self::jobs(spec, &l)?,
            (ModelKind::NcRais | ModelKind::TokenRais, None) => Self::interleaved(spec, &l)?,
            (ModelKind::ClosedToken, Some(r)) => {
                let r: Vec<&str> = r.iter().map(String::as_str).collect();
                Self::tokens(spec, &l, &r)?
            }
            (
                ModelKind::NcAlis | ModelKind::Dbm | ModelKind::DbmK(_) | ModelKind::Dbma | ModelKind::Pbm,
                r,
            ) => {
                let r = r.unwrap_or_default();
                let r: Vec<&str> = r.iter().map(String::as_str).collect();
                Self::two_sided(spec, &l, &r)?
            }
            (kind, _) => return Err(Error::InvalidState(format!("state {text:?} does not fit the {kind} kind"))),
        };
        Ok(state)
    }

    /// Human-readable form using class and server ids.
    pub fn label(&self, spec: &SystemSpec) -> String {
        let classes = |s: &Seq| s.iter().map(|&c| spec.classes()[c as usize].id.clone()).collect::<Vec<_>>().join(",");
        let servers = |s: &Seq| s.iter().map(|&c| spec.servers()[c as usize].id.clone()).collect::<Vec<_>>().join(",");
        match self {
            DetailedState::Jobs(s) => format!("({})", classes(s)),
            DetailedState::TwoSided { jobs, servers: srv } => format!("({};{})", classes(jobs), servers(srv)),
            DetailedState::Interleaved(s) => format!(
                "({})",
                s.iter()
                    .map(|&e| if e & BUSY_TAG != 0 {
                        format!("[{}]", spec.servers()[(e & !BUSY_TAG) as usize].id)
                    } else {
                        spec.classes()[e as usize].id.clone()
                    })
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            DetailedState::Tokens { busy, idle } => format!("({};{})", servers(busy), servers(idle)),
        }
    }

    /// Length used for truncation: jobs present (entries for interleaved
    /// states, the longer side for matching with abandonment).
    pub fn size(&self) -> usize {
        match self {
            DetailedState::Jobs(s) | DetailedState::Interleaved(s) => s.len(),
            DetailedState::TwoSided { jobs, servers } => jobs.len().max(servers.len()),
            DetailedState::Tokens { .. } => 0,
        }
    }
}

impl fmt::Display for DetailedState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

fn to_seq(v: Vec<usize>) -> Seq {
    v.into_iter().map(|i| i as u8).collect()
}

/// Normalizing constant of a product form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    /// Sum of all weights (the weight of the empty state is one).
    pub constant: f64,
    /// Bound on the relative error of `constant` due to truncation (zero if exact).
    pub tail_bound: f64,
    pub exact: bool,
}

/// Product-form weights of the detailed states of one system.
#[derive(Clone, Debug)]
pub struct ProductForm<'a> {
    spec: &'a SystemSpec,
    table: Option<&'a ActivationTable>,
    job_rate: OiRate,
    server_rate: OiRate,
    token_rate: OiRate,
    job_arrivals: Vec<f64>,
    server_arrivals: Vec<f64>,
    custom: bool,
}

impl<'a> ProductForm<'a> {
    pub fn new(spec: &'a SystemSpec) -> Result<Self> {
        let j = spec.num_classes();
        let m = spec.num_servers();
        let mut job_arrivals: Vec<f64> = (0..j).map(|i| spec.arrival(i)).collect();
        let mut server_arrivals: Vec<f64> = (0..m).map(|s| spec.service(s)).collect();
        let (job_rate, server_rate) = match spec.kind() {
            ModelKind::Gm => (OiRate::agent_matching(spec), OiRate::server_activation(spec)),
            ModelKind::Pbm => {
                let (lam, mu) = (spec.total_arrival(), spec.total_service());
                for a in &mut job_arrivals {
                    *a /= lam;
                }
                for a in &mut server_arrivals {
                    *a /= mu;
                }
                (
                    OiRate::Pooled(PooledRate {
                        reach: (0..j).map(|i| spec.class_servers(i)).collect(),
                        resource_rates: server_arrivals.clone(),
                        linear: vec![0.0; j],
                    }),
                    OiRate::Pooled(PooledRate {
                        reach: (0..m).map(|s| spec.server_classes(s)).collect(),
                        resource_rates: job_arrivals.clone(),
                        linear: vec![0.0; m],
                    }),
                )
            }
            _ => (OiRate::job_service(spec), OiRate::server_activation(spec)),
        };
        if spec.kind() == ModelKind::ClosedToken {
            job_arrivals = vec![1.0; j];
            server_arrivals = vec![1.0; m];
        }
        Ok(ProductForm {
            spec,
            table: None,
            job_rate,
            server_rate,
            token_rate: OiRate::token_service(spec),
            job_arrivals,
            server_arrivals,
            custom: false,
        })
    }

    /// Product form of a randomized-assignment model using `table`.
    pub fn with_table(spec: &'a SystemSpec, table: &'a ActivationTable) -> Result<Self> {
        if table.servers() != spec.num_servers() || table.classes() != spec.num_classes() {
            return Err(Error::Validation("activation table does not match the system".into()));
        }
        let mut pf = Self::new(spec)?;
        pf.table = Some(table);
        Ok(pf)
    }

    /// Collaborative product form with a user supplied order-independent
    /// service functional over class sequences.
    pub fn with_job_rate(spec: &'a SystemSpec, rate: OiRate) -> Result<Self> {
        if spec.kind() != ModelKind::Collaborative {
            return Err(Error::Unsupported("custom service functionals apply to the collaborative kind".into()));
        }
        if rate.items() != spec.num_classes() {
            return Err(Error::Validation("service functional has the wrong number of classes".into()));
        }
        let mut pf = Self::new(spec)?;
        pf.job_rate = rate;
        pf.custom = true;
        Ok(pf)
    }

    pub fn spec(&self) -> &'a SystemSpec {
        self.spec
    }

    pub fn table(&self) -> Option<&'a ActivationTable> {
        self.table
    }

    pub fn job_rate(&self) -> &OiRate {
        &self.job_rate
    }

    pub fn server_rate(&self) -> &OiRate {
        &self.server_rate
    }

    pub fn token_rate(&self) -> &OiRate {
        &self.token_rate
    }

    pub fn job_arrivals(&self) -> &[f64] {
        &self.job_arrivals
    }

    pub fn server_arrivals(&self) -> &[f64] {
        &self.server_arrivals
    }

    fn table_or_err(&self) -> Result<&'a ActivationTable> {
        self.table
            .ok_or_else(|| Error::Validation("randomized assignment needs an activation table".into()))
    }

    /// Checks that `state` is a reachable detailed state of this model.
    pub fn validate(&self, state: &DetailedState) -> Result<()> {
        let spec = self.spec;
        let (j, m) = (spec.num_classes() as u8, spec.num_servers() as u8);
        let bad = |msg: String| Err(Error::InvalidState(msg));
        let check_classes = |s: &Seq| s.iter().all(|&c| c < j);
        let check_servers = |s: &Seq| s.iter().all(|&c| c < m);
        let kind = spec.kind();
        match (state, kind) {
            (DetailedState::Jobs(s), ModelKind::Collaborative) => {
                if !check_classes(s) {
                    return bad("unknown class".into());
                }
            }
            (DetailedState::Jobs(s), ModelKind::Gm) => {
                if !check_classes(s) {
                    return bad("unknown class".into());
                }
                let present = BitSet::from_indices(s.iter().map(|&c| c as usize));
                if !spec.linked_to(present).is_disjoint(present) {
                    return bad("two waiting agents are compatible".into());
                }
            }
            (
                DetailedState::TwoSided { jobs, servers },
                ModelKind::NcAlis | ModelKind::Dbm | ModelKind::DbmK(_) | ModelKind::Dbma | ModelKind::Pbm,
            ) => {
                if !check_classes(jobs) || !check_servers(servers) {
                    return bad("unknown class or server".into());
                }
                let reach = spec.servers_of(BitSet::from_indices(jobs.iter().map(|&c| c as usize)));
                if servers.iter().any(|&s| reach.contains(s as usize)) {
                    return bad("a waiting job is compatible with an idle or waiting server".into());
                }
                if kind == ModelKind::NcAlis {
                    let set = BitSet::from_indices(servers.iter().map(|&s| s as usize));
                    if set.len() != servers.len() {
                        return bad("idle server listed twice".into());
                    }
                }
                if let Some(k) = kind.server_buffer() {
                    if servers.len() > k {
                        return bad(format!("{} waiting servers exceed the buffer of {k}", servers.len()));
                    }
                }
                if kind == ModelKind::Pbm && jobs.len() != servers.len() {
                    return bad("paired matching needs equal numbers of unmatched jobs and servers".into());
                }
            }
            (DetailedState::Interleaved(s), ModelKind::NcRais | ModelKind::TokenRais) => {
                let mut busy = BitSet::EMPTY;
                for &e in s {
                    if e & BUSY_TAG != 0 {
                        let b = (e & !BUSY_TAG) as usize;
                        if b >= m as usize || busy.contains(b) {
                            return bad("unknown or repeated busy server".into());
                        }
                        busy = busy.with(b);
                    } else {
                        if e >= j {
                            return bad("unknown class".into());
                        }
                        if !spec.class_servers(e as usize).is_subset(busy) {
                            return bad(format!(
                                "queued class {} has a compatible server that is idle or busy with a later job",
                                spec.classes()[e as usize].id
                            ));
                        }
                    }
                }
            }
            (DetailedState::Tokens { busy, idle }, ModelKind::ClosedToken) => {
                let all = BitSet::from_indices(busy.iter().chain(idle.iter()).map(|&t| t as usize));
                if busy.len() + idle.len() != m as usize || all != spec.all_servers() {
                    return bad("every token must appear exactly once".into());
                }
            }
            _ => return bad(format!("state shape does not match the {kind} kind")),
        }
        Ok(())
    }

    /// Natural log of the unnormalized weight (empty state has weight one).
    pub fn log_weight(&self, state: &DetailedState) -> Result<f64> {
        self.validate(state)?;
        let zero_rate = || Error::InvalidState("a prefix has zero departure rate".into());
        let lw = match state {
            DetailedState::Jobs(s) => oi::log_weight(&self.job_arrivals, &self.job_rate, s).ok_or_else(zero_rate)?,
            DetailedState::TwoSided { jobs, servers } => {
                oi::log_weight(&self.job_arrivals, &self.job_rate, jobs).ok_or_else(zero_rate)?
                    + oi::log_weight(&self.server_arrivals, &self.server_rate, servers).ok_or_else(zero_rate)?
            }
            DetailedState::Interleaved(s) => {
                let table = self.table_or_err()?;
                let mut busy = BitSet::EMPTY;
                let mut order: Seq = Seq::new();
                let mut rate = 0.0;
                let mut acc = 0.0;
                for &e in s {
                    if e & BUSY_TAG != 0 {
                        let b = (e & !BUSY_TAG) as usize;
                        acc += table.rate(busy, b).ln();
                        busy = busy.with(b);
                        order.push(b as u8);
                        rate = self.token_rate.total(&order);
                    } else {
                        acc += self.spec.arrival(e as usize).ln();
                    }
                    if !(rate > 0.0) {
                        return Err(zero_rate());
                    }
                    acc -= rate.ln();
                }
                acc
            }
            DetailedState::Tokens { busy, idle } => {
                oi::log_weight(&self.server_arrivals, &self.token_rate, busy).ok_or_else(zero_rate)?
                    + oi::log_weight(&self.server_arrivals, &self.server_rate, idle).ok_or_else(zero_rate)?
            }
        };
        Ok(lw)
    }

    /// Unnormalized weight, relative to the empty state.
    pub fn weight(&self, state: &DetailedState) -> Result<f64> {
        Ok(self.log_weight(state)?.exp())
    }

    /// Stationary probability of `state`.
    pub fn probability(&self, state: &DetailedState, norm: &Normalization) -> Result<f64> {
        Ok((self.log_weight(state)? - norm.constant.ln()).exp())
    }

    /// Every valid state of size at most `bound` (all states for the closed token model).
    pub fn enumerate(&self, bound: usize) -> Vec<DetailedState> {
        let spec = self.spec;
        let j = spec.num_classes();
        let m = spec.num_servers();
        let mut out = Vec::new();
        match spec.kind() {
            ModelKind::Collaborative => {
                for s in sequences(j, bound, &|_| true) {
                    out.push(DetailedState::Jobs(s));
                }
            }
            ModelKind::Gm => {
                let ok = |s: &Seq| {
                    let present = BitSet::from_indices(s.iter().map(|&c| c as usize));
                    spec.linked_to(present).is_disjoint(present)
                };
                for s in sequences(j, bound, &ok) {
                    out.push(DetailedState::Jobs(s));
                }
            }
            ModelKind::NcAlis | ModelKind::Dbm | ModelKind::DbmK(_) | ModelKind::Dbma | ModelKind::Pbm => {
                let kind = spec.kind();
                let server_bound = match kind {
                    ModelKind::NcAlis => m,
                    ModelKind::Pbm | ModelKind::Dbma => bound,
                    k => k.server_buffer().unwrap_or(0),
                };
                let distinct = kind == ModelKind::NcAlis;
                let server_ok = |s: &Seq| {
                    !distinct || BitSet::from_indices(s.iter().map(|&x| x as usize)).len() == s.len()
                };
                for servers in sequences(m, server_bound, &server_ok) {
                    let set = BitSet::from_indices(servers.iter().map(|&x| x as usize));
                    let allowed = spec.all_classes().difference(spec.classes_of(set));
                    let job_ok = |s: &Seq| s.last().is_none_or(|&c| allowed.contains(c as usize));
                    let job_bound = if kind == ModelKind::Pbm { servers.len() } else { bound };
                    for jobs in sequences(j, job_bound, &job_ok) {
                        if kind == ModelKind::Pbm && jobs.len() != servers.len() {
                            continue;
                        }
                        out.push(DetailedState::TwoSided { jobs, servers: servers.clone() });
                    }
                }
            }
            ModelKind::NcRais | ModelKind::TokenRais => {
                let ok = |s: &Seq| {
                    let last = *s.last().unwrap();
                    let busy = BitSet::from_indices(
                        s[..s.len() - 1].iter().filter(|&&e| e & BUSY_TAG != 0).map(|&e| (e & !BUSY_TAG) as usize),
                    );
                    if last & BUSY_TAG != 0 {
                        !busy.contains((last & !BUSY_TAG) as usize)
                    } else {
                        spec.class_servers(last as usize).is_subset(busy)
                    }
                };
                let alphabet: Vec<u8> = (0..j as u8).chain((0..m as u8).map(|b| b | BUSY_TAG)).collect();
                for s in sequences_over(&alphabet, bound, &|s: &Seq| s.is_empty() || ok(s)) {
                    out.push(DetailedState::Interleaved(s));
                }
            }
            ModelKind::ClosedToken => {
                let distinct = |s: &Seq| BitSet::from_indices(s.iter().map(|&x| x as usize)).len() == s.len();
                for perm in sequences(m, m, &distinct).into_iter().filter(|p| p.len() == m) {
                    for split in 0..=m {
                        out.push(DetailedState::Tokens {
                            busy: perm[..split].iter().copied().collect(),
                            idle: perm[split..].iter().copied().collect(),
                        });
                    }
                }
            }
        }
        out
    }

    /// Sum of all weights.
    pub fn normalization(&self, tol: f64) -> Result<Normalization> {
        let spec = self.spec;
        match spec.kind() {
            ModelKind::Collaborative => {
                let report = if self.custom { None } else { Some(spec.require_stable()?) };
                let envelope = report.map_or(0.0, |r| r.max_load);
                let sweep = LevelSweep::new(&self.job_arrivals, &self.job_rate).envelope(envelope);
                let res = sweep.total(tol)?;
                Ok(Normalization { constant: res.total, tail_bound: res.tail_bound, exact: res.exact })
            }
            ModelKind::Gm => {
                let envelope = gm_load(spec)?;
                let ok = |set: BitSet| spec.linked_to(set).is_disjoint(set);
                let sweep = LevelSweep::new(&self.job_arrivals, &self.job_rate).envelope(envelope).support_filter(&ok);
                let res = sweep.total(tol)?;
                Ok(Normalization { constant: res.total, tail_bound: res.tail_bound, exact: res.exact })
            }
            ModelKind::NcAlis => {
                spec.require_stable()?;
                let h = idle_weights_with_rates(spec);
                let mut total = 0.0;
                let mut memo = aggregate::EmptyMemo::new(spec);
                for (mask, w) in h.iter().enumerate() {
                    let set = BitSet(mask as u64);
                    let allowed = spec.all_classes().difference(spec.classes_of(set));
                    total += w / memo.pi_empty(allowed)?;
                }
                Ok(Normalization { constant: total, tail_bound: 0.0, exact: true })
            }
            ModelKind::Dbm | ModelKind::DbmK(_) => {
                spec.require_stable()?;
                let k = spec.kind().server_buffer().unwrap();
                let t = waiting_server_weights(spec, k);
                let mut memo = aggregate::EmptyMemo::new(spec);
                let mut total = 0.0;
                for (mask, w) in t.iter().enumerate() {
                    if *w == 0.0 {
                        continue;
                    }
                    let allowed = spec.all_classes().difference(spec.classes_of(BitSet(mask as u64)));
                    total += w / memo.pi_empty(allowed)?;
                }
                Ok(Normalization { constant: total, tail_bound: 0.0, exact: true })
            }
            ModelKind::Dbma => {
                let jobs = LevelSweep::new(&self.job_arrivals, &self.job_rate).track_supports().total(tol)?;
                let servers = LevelSweep::new(&self.server_arrivals, &self.server_rate).track_supports().total(tol)?;
                let mut total = 0.0;
                for (&b, &ws) in &servers.by_support {
                    let allowed = spec.all_classes().difference(spec.classes_of(BitSet(b)));
                    let wj: f64 = jobs
                        .by_support
                        .iter()
                        .filter(|(&a, _)| BitSet(a).is_subset(allowed))
                        .map(|(_, w)| w)
                        .sum();
                    total += ws * wj;
                }
                Ok(Normalization {
                    constant: total,
                    tail_bound: jobs.tail_bound + servers.tail_bound,
                    exact: jobs.exact && servers.exact,
                })
            }
            ModelKind::Pbm => {
                let report = spec.require_stable()?;
                aggregate::paired_normalization(self, report.max_load, tol)
            }
            ModelKind::NcRais | ModelKind::TokenRais => {
                spec.require_stable()?;
                let table = self.table_or_err()?;
                let total = aggregate::interleaved_constant(spec, table, &self.token_rate)?;
                Ok(Normalization { constant: total, tail_bound: 0.0, exact: true })
            }
            ModelKind::ClosedToken => {
                let m = spec.num_servers();
                let size = 1usize << m;
                let busy = order_sums(size, |set| 1.0 / self.token_rate.total_of_counts(&indicator(set, m)));
                let idle = order_sums(size, |set| 1.0 / spec.arrival_rate(spec.classes_of(set)));
                let all = size - 1;
                let total: f64 = (0..size).map(|b| busy[b] * idle[all ^ b]).sum();
                Ok(Normalization { constant: total, tail_bound: 0.0, exact: true })
            }
        }
    }
}

fn indicator(set: BitSet, n: usize) -> Vec<u32> {
    (0..n).map(|i| set.contains(i) as u32).collect()
}

/// For every set `S`, the sum over orders of `S` of the product of `f` over
/// the prefix sets.
pub(crate) fn order_sums(size: usize, f: impl Fn(BitSet) -> f64) -> Vec<f64> {
    let mut h = vec![0.0; size];
    h[0] = 1.0;
    for mask in 1..size {
        let set = BitSet(mask as u64);
        let s: f64 = set.iter().map(|j| h[set.without(j).0 as usize]).sum();
        h[mask] = s * f(set);
    }
    h
}

/// Sum over orders of each idle set of `prod_j mu_{s_j} / lambda(C(s_1..s_j))`.
fn idle_weights_with_rates(spec: &SystemSpec) -> Vec<f64> {
    let m = spec.num_servers();
    let size = 1usize << m;
    let mut h = vec![0.0; size];
    h[0] = 1.0;
    for mask in 1..size {
        let set = BitSet(mask as u64);
        let lam = spec.arrival_rate(spec.classes_of(set));
        let s: f64 = set.iter().map(|j| spec.service(j) * h[set.without(j).0 as usize]).sum();
        h[mask] = s / lam;
    }
    h
}

/// For every server set `B`, the total weight of waiting-server sequences of
/// length at most `k` whose set of types is exactly `B`.
fn waiting_server_weights(spec: &SystemSpec, k: usize) -> Vec<f64> {
    let m = spec.num_servers();
    let size = 1usize << m;
    let mut cur = vec![0.0; size];
    cur[0] = 1.0;
    let mut total = cur.clone();
    for _ in 0..k {
        let mut next = vec![0.0; size];
        for mask in 1..size {
            let set = BitSet(mask as u64);
            let lam = spec.arrival_rate(spec.classes_of(set));
            let s: f64 = set
                .iter()
                .map(|j| spec.service(j) * (cur[mask] + cur[set.without(j).0 as usize]))
                .sum();
            next[mask] = s / lam;
        }
        for (t, n) in total.iter_mut().zip(&next) {
            *t += n;
        }
        cur = next;
    }
    total
}

/// Largest ratio of arrival probability to matching probability over
/// independent sets of agent classes.
fn gm_load(spec: &SystemSpec) -> Result<f64> {
    let j = spec.num_classes();
    if j > crate::model::STABILITY_CLASS_CAP {
        return Err(Error::SizeCap { what: "agent classes".into(), size: j, cap: crate::model::STABILITY_CLASS_CAP });
    }
    let mut worst: f64 = 0.0;
    let mut witness = BitSet::EMPTY;
    for set in spec.all_classes().subsets().skip(1) {
        if !spec.linked_to(set).is_disjoint(set) {
            continue;
        }
        let r = spec.arrival_rate(set) / spec.arrival_rate(spec.linked_to(set));
        if r > worst {
            worst = r;
            witness = set;
        }
    }
    if worst >= 1.0 {
        return Err(Error::Unstable {
            witness: spec.class_labels(witness),
            margin: spec.arrival_rate(spec.linked_to(witness)) - spec.arrival_rate(witness),
        });
    }
    Ok(worst)
}

/// All sequences over `0..n` of length at most `bound` whose every prefix
/// satisfies `ok`.
fn sequences(n: usize, bound: usize, ok: &dyn Fn(&Seq) -> bool) -> Vec<Seq> {
    let alphabet: Vec<u8> = (0..n as u8).collect();
    sequences_over(&alphabet, bound, ok)
}

fn sequences_over(alphabet: &[u8], bound: usize, ok: &dyn Fn(&Seq) -> bool) -> Vec<Seq> {
    let mut out = vec![Seq::new()];
    let mut frontier = vec![Seq::new()];
    for _ in 0..bound {
        let mut next = Vec::new();
        for s in &frontier {
            for &a in alphabet {
                let mut t = s.clone();
                t.push(a);
                if ok(&t) {
                    next.push(t);
                }
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Probability (or weight, when `norm` is `None`) of a detailed state.
pub fn pi_detailed(
    spec: &SystemSpec,
    state: &DetailedState,
    table: Option<&ActivationTable>,
    norm: Option<&Normalization>,
) -> Result<f64> {
    let pf = match table {
        Some(t) => ProductForm::with_table(spec, t)?,
        None => ProductForm::new(spec)?,
    };
    match norm {
        Some(n) => pf.probability(state, n),
        None => pf.weight(state),
    }
}

/// Order-independent departure rate of a job sequence and the rate granted to
/// each position.
pub fn oi_rate(spec: &SystemSpec, state: &DetailedState) -> Result<(f64, Vec<f64>)> {
    let DetailedState::Jobs(seq) = state else {
        return Err(Error::InvalidState("departure rates are defined for job sequences".into()));
    };
    let pf = ProductForm::new(spec)?;
    pf.validate(state)?;
    let inc = pf.job_rate().increments(seq);
    Ok((inc.iter().sum(), inc))
}

/// A set of count vectors, used as an acceptance region for a loss model.
pub struct TruncationRegion<'r> {
    contains: &'r dyn Fn(&[u32]) -> bool,
    bound: usize,
}

impl<'r> TruncationRegion<'r> {
    /// Region `{x : contains(x) and |x| <= bound}`.
    pub fn new(contains: &'r dyn Fn(&[u32]) -> bool, bound: usize) -> Self {
        TruncationRegion { contains, bound }
    }

    pub fn contains(&self, x: &[u32]) -> bool {
        x.iter().sum::<u32>() as usize <= self.bound && (self.contains)(x)
    }

    pub fn bound(&self) -> usize {
        self.bound
    }
}

/// Checks that a region of count vectors is closed under removing any single
/// job, which makes its set of sequences closed under permutations and
/// prefixes. Returns a count vector violating it, if any.
pub fn check_truncation_region(classes: usize, region: &TruncationRegion) -> Option<Vec<u32>> {
    for_each_count_vector(classes, region.bound, &mut |x| {
        if !region.contains(x) {
            return None;
        }
        for i in 0..x.len() {
            if x[i] > 0 {
                let mut y = x.to_vec();
                y[i] -= 1;
                if !region.contains(&y) {
                    return Some(x.to_vec());
                }
            }
        }
        None
    })
}

pub(crate) fn for_each_count_vector<T>(
    classes: usize,
    bound: usize,
    f: &mut dyn FnMut(&[u32]) -> Option<T>,
) -> Option<T> {
    fn rec<T>(x: &mut Vec<u32>, i: usize, left: u32, f: &mut dyn FnMut(&[u32]) -> Option<T>) -> Option<T> {
        if i == x.len() {
            return f(x);
        }
        for v in 0..=left {
            x[i] = v;
            if let Some(t) = rec(x, i + 1, left - v, f) {
                return Some(t);
            }
        }
        x[i] = 0;
        None
    }
    let mut x = vec![0u32; classes];
    rec(&mut x, 0, bound as u32, f)
}

/// Stationary probability of `state` in the loss model that rejects arrivals
/// leaving `region`. Fails when the region is not closed under removals.
pub fn pi_truncated(pf: &ProductForm, region: &TruncationRegion, state: &DetailedState) -> Result<f64> {
    let spec = pf.spec();
    if spec.kind() != ModelKind::Collaborative {
        return Err(Error::Unsupported("truncation regions are defined for job sequences".into()));
    }
    if let Some(w) = check_truncation_region(spec.num_classes(), region) {
        return Err(Error::Validation(format!("region is not closed under removing a job: witness {w:?}")));
    }
    let DetailedState::Jobs(seq) = state else {
        return Err(Error::InvalidState("expected a job sequence".into()));
    };
    let mut counts = vec![0u32; spec.num_classes()];
    for &c in seq {
        counts[c as usize] += 1;
    }
    if !region.contains(&counts) {
        return Ok(0.0);
    }
    let table = aggregate::PhiTable::build(pf.job_arrivals(), pf.job_rate(), region.bound())?;
    let mut total = 0.0;
    for_each_count_vector::<()>(spec.num_classes(), region.bound(), &mut |x| {
        if region.contains(x) {
            total += table.weight(x).unwrap_or(0.0);
        }
        None
    });
    Ok(pf.weight(state)? / total)
}

#[cfg(test)]
mod tests {
    use super::*;
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
    fn mm1_geometric() {
        let spec = SystemBuilder::new(ModelKind::Collaborative)
            .class("1", 0.5)
            .server("1", 1.0)
            .edge("1", "1")
            .build()
            .unwrap();
        let pf = ProductForm::new(&spec).unwrap();
        let norm = pf.normalization(1e-12).unwrap();
        assert!((norm.constant - 2.0).abs() < 1e-10);
        for n in 0..6 {
            let s = DetailedState::Jobs(std::iter::repeat_n(0u8, n).collect());
            let p = pf.probability(&s, &norm).unwrap();
            assert!((p - 0.5 * 0.5f64.powi(n as i32)).abs() < 1e-10);
        }
    }

    #[test]
    fn w_model_weights() {
        let spec = w_model(ModelKind::Collaborative);
        let pf = ProductForm::new(&spec).unwrap();
        let s = DetailedState::jobs(&spec, &["1", "3"]).unwrap();
        assert!((pf.weight(&s).unwrap() - 0.3 * 0.5 / 2.0).abs() < 1e-15);
        let s = DetailedState::jobs(&spec, &["3", "1"]).unwrap();
        assert!((pf.weight(&s).unwrap() - 0.25 * 0.15).abs() < 1e-15);
        let (total, inc) = oi_rate(&spec, &s).unwrap();
        assert_eq!(total, 2.0);
        assert_eq!(inc, vec![2.0, 0.0]);
    }

    #[test]
    fn alis_validity_and_labels() {
        let spec = w_model(ModelKind::NcAlis);
        let pf = ProductForm::new(&spec).unwrap();
        let ok = DetailedState::two_sided(&spec, &["1"], &["2"]).unwrap();
        pf.validate(&ok).unwrap();
        let bad = DetailedState::two_sided(&spec, &["3"], &["2"]).unwrap();
        assert!(matches!(pf.validate(&bad), Err(Error::InvalidState(_))));
        assert_eq!(ok.label(&spec), "(1;2)");
        assert_eq!(DetailedState::parse(&spec, "(1;2)").unwrap(), ok);
    }

    #[test]
    fn truncation_regions() {
        let total = |x: &[u32]| x.iter().sum::<u32>() <= 5;
        assert!(check_truncation_region(3, &TruncationRegion::new(&total, 8)).is_none());
        let boxed = |x: &[u32]| x[0] <= 2 && x[1] <= 3;
        assert!(check_truncation_region(3, &TruncationRegion::new(&boxed, 8)).is_none());
        let exact = |x: &[u32]| x[0] == 2;
        assert_eq!(check_truncation_region(3, &TruncationRegion::new(&exact, 8)), Some(vec![2, 0, 0]));
    }

    #[test]
    fn enumeration_counts() {
        let spec = w_model(ModelKind::Collaborative);
        let pf = ProductForm::new(&spec).unwrap();
        assert_eq!(pf.enumerate(3).len(), 1 + 3 + 9 + 27);
        let alis = w_model(ModelKind::NcAlis);
        let pf = ProductForm::new(&alis).unwrap();
        for s in pf.enumerate(3) {
            pf.validate(&s).unwrap();
        }
    }
}
