//! Transition structure of every model kind on detailed states, and partial
//! balance residuals of the product-form weights.
//!
//! Each transition carries the family it belongs to when leaving its source
//! and when entering its target. Partial balance states that, for every
//! family, the probability flow out of a state equals the flow into it; the
//! sum over families is global balance.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::assignment::ActivationTable;
use crate::detailed::{DetailedState, ProductForm, Seq, BUSY_TAG};
use crate::error::{Error, Result};
use crate::model::{BitSet, ModelKind, SystemSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(tag = "family", content = "index", rename_all = "snake_case")]
pub enum Family {
    /// Departures from the job (or agent, or busy-entry) queue.
    Departure,
    /// Arrivals of a class that join the queue.
    Class(usize),
    /// Departures from the idle or waiting server queue.
    IdleDeparture,
    /// A server joining the idle or waiting server queue.
    Server(usize),
    /// Service completions of busy tokens.
    BusyDeparture,
    /// Models checked for global balance only.
    Global,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub target: DetailedState,
    pub rate: f64,
    pub out_family: Family,
    pub in_family: Family,
}

/// Transitions of one system, optionally restricted to states of size at
/// most `bound` (arrivals that would leave the region are rejected).
pub struct Dynamics<'a> {
    pf: ProductForm<'a>,
    bound: usize,
}

impl<'a> Dynamics<'a> {
    pub fn new(pf: ProductForm<'a>) -> Self {
        Dynamics { pf, bound: usize::MAX }
    }

    pub fn truncated(pf: ProductForm<'a>, bound: usize) -> Self {
        Dynamics { pf, bound }
    }

    pub fn product_form(&self) -> &ProductForm<'a> {
        &self.pf
    }

    pub fn bound(&self) -> usize {
        self.bound
    }

    fn spec(&self) -> &'a SystemSpec {
        self.pf.spec()
    }

    /// Size that the truncation bound applies to.
    pub fn size(&self, state: &DetailedState) -> usize {
        match (self.spec().kind(), state) {
            (ModelKind::NcAlis | ModelKind::Dbm | ModelKind::DbmK(_) | ModelKind::Pbm, DetailedState::TwoSided { jobs, .. }) => {
                jobs.len()
            }
            _ => state.size(),
        }
    }

    pub fn in_region(&self, state: &DetailedState) -> bool {
        self.size(state) <= self.bound
    }

    /// State from which exploration starts.
    pub fn initial(&self) -> DetailedState {
        DetailedState::empty(self.spec())
    }

    /// All transitions out of `state` with positive rate, self-loops excluded.
    pub fn transitions(&self, state: &DetailedState) -> Result<Vec<Transition>> {
        let spec = self.spec();
        let mut out = Vec::new();
        let mut push = |target: DetailedState, rate: f64, out_family: Family, in_family: Family| {
            if rate > 0.0 && self.in_region(&target) {
                out.push(Transition { target, rate, out_family, in_family });
            }
        };
        match (spec.kind(), state) {
            (ModelKind::Collaborative, DetailedState::Jobs(s)) => {
                for c in 0..spec.num_classes() {
                    push(DetailedState::Jobs(appended(s, c as u8)), spec.arrival(c), Family::Class(c), Family::Departure);
                }
                for (j, d) in self.pf.job_rate().increments(s).into_iter().enumerate() {
                    push(DetailedState::Jobs(removed(s, j)), d, Family::Departure, Family::Class(s[j] as usize));
                }
            }
            (ModelKind::Gm, DetailedState::Jobs(s)) => {
                for c in 0..spec.num_classes() {
                    let p = spec.arrival(c);
                    match s.iter().position(|&a| spec.links(c).contains(a as usize)) {
                        Some(j) => push(DetailedState::Jobs(removed(s, j)), p, Family::Departure, Family::Class(s[j] as usize)),
                        None => push(DetailedState::Jobs(appended(s, c as u8)), p, Family::Class(c), Family::Departure),
                    }
                }
            }
            (ModelKind::NcAlis, DetailedState::TwoSided { jobs, servers }) => {
                for c in 0..spec.num_classes() {
                    let lam = spec.arrival(c);
                    match servers.iter().position(|&s| spec.class_servers(c).contains(s as usize)) {
                        Some(j) => push(
                            two(jobs.clone(), removed(servers, j)),
                            lam,
                            Family::IdleDeparture,
                            Family::Server(servers[j] as usize),
                        ),
                        None => push(two(appended(jobs, c as u8), servers.clone()), lam, Family::Class(c), Family::Departure),
                    }
                }
                let idle = BitSet::from_indices(servers.iter().map(|&s| s as usize));
                for b in spec.all_servers().difference(idle).iter() {
                    let mu = spec.service(b);
                    match jobs.iter().position(|&c| spec.class_servers(c as usize).contains(b)) {
                        Some(k) => push(two(removed(jobs, k), servers.clone()), mu, Family::Departure, Family::Class(jobs[k] as usize)),
                        None => push(two(jobs.clone(), appended(servers, b as u8)), mu, Family::Server(b), Family::IdleDeparture),
                    }
                }
            }
            (ModelKind::Dbm | ModelKind::DbmK(_) | ModelKind::Dbma, DetailedState::TwoSided { jobs, servers }) => {
                let buffer = spec.kind().server_buffer().unwrap_or(usize::MAX);
                for c in 0..spec.num_classes() {
                    let lam = spec.arrival(c);
                    match servers.iter().position(|&s| spec.class_servers(c).contains(s as usize)) {
                        Some(j) => push(
                            two(jobs.clone(), removed(servers, j)),
                            lam,
                            Family::IdleDeparture,
                            Family::Server(servers[j] as usize),
                        ),
                        None => push(two(appended(jobs, c as u8), servers.clone()), lam, Family::Class(c), Family::Departure),
                    }
                }
                for s in 0..spec.num_servers() {
                    let mu = spec.service(s);
                    match jobs.iter().position(|&c| spec.class_servers(c as usize).contains(s)) {
                        Some(k) => push(two(removed(jobs, k), servers.clone()), mu, Family::Departure, Family::Class(jobs[k] as usize)),
                        None if servers.len() < buffer => {
                            push(two(jobs.clone(), appended(servers, s as u8)), mu, Family::Server(s), Family::IdleDeparture)
                        }
                        None => {}
                    }
                }
                for (k, &c) in jobs.iter().enumerate() {
                    let g = spec.class_abandonment(c as usize);
                    push(two(removed(jobs, k), servers.clone()), g, Family::Departure, Family::Class(c as usize));
                }
                for (k, &s) in servers.iter().enumerate() {
                    let g = spec.server_abandonment(s as usize);
                    push(two(jobs.clone(), removed(servers, k)), g, Family::IdleDeparture, Family::Server(s as usize));
                }
            }
            (ModelKind::NcRais | ModelKind::TokenRais, DetailedState::Interleaved(z)) => {
                let table = self
                    .pf
                    .table()
                    .ok_or_else(|| Error::Validation("randomized assignment needs an activation table".into()))?;
                self.interleaved_transitions(z, table, &mut push);
            }
            (ModelKind::ClosedToken, DetailedState::Tokens { busy, idle }) => {
                for c in 0..spec.num_classes() {
                    if let Some(j) = idle.iter().position(|&t| spec.class_servers(c).contains(t as usize)) {
                        push(
                            DetailedState::Tokens { busy: appended(busy, idle[j]), idle: removed(idle, j) },
                            spec.arrival(c),
                            Family::IdleDeparture,
                            Family::BusyDeparture,
                        );
                    }
                }
                for (j, d) in self.pf.token_rate().increments(busy).into_iter().enumerate() {
                    push(
                        DetailedState::Tokens { busy: removed(busy, j), idle: appended(idle, busy[j]) },
                        d,
                        Family::BusyDeparture,
                        Family::IdleDeparture,
                    );
                }
            }
            (ModelKind::Pbm, DetailedState::TwoSided { jobs, servers }) => {
                let (lam, mu) = (spec.total_arrival(), spec.total_service());
                for c in 0..spec.num_classes() {
                    for s in 0..spec.num_servers() {
                        let p = spec.arrival(c) / lam * spec.service(s) / mu;
                        let waiting_server = servers.iter().position(|&t| spec.class_servers(c).contains(t as usize));
                        let waiting_job = jobs.iter().position(|&d| spec.class_servers(d as usize).contains(s));
                        let target = match (waiting_server, waiting_job) {
                            (Some(j), Some(k)) => two(removed(jobs, k), removed(servers, j)),
                            (Some(j), None) => two(jobs.clone(), appended(&removed(servers, j), s as u8)),
                            (None, Some(k)) => two(appended(&removed(jobs, k), c as u8), servers.clone()),
                            (None, None) if spec.class_servers(c).contains(s) => continue,
                            (None, None) => two(appended(jobs, c as u8), appended(servers, s as u8)),
                        };
                        if &target != state {
                            push(target, p, Family::Global, Family::Global);
                        }
                    }
                }
            }
            (kind, _) => return Err(Error::InvalidState(format!("state shape does not match the {kind} kind"))),
        }
        Ok(merge(out))
    }

    fn interleaved_transitions(
        &self,
        z: &Seq,
        table: &ActivationTable,
        push: &mut impl FnMut(DetailedState, f64, Family, Family),
    ) {
        let spec = self.spec();
        let busy_order: Seq = z.iter().filter(|&&e| e & BUSY_TAG != 0).map(|&e| e & !BUSY_TAG).collect();
        let busy = BitSet::from_indices(busy_order.iter().map(|&b| b as usize));
        for c in 0..spec.num_classes() {
            let lam = spec.arrival(c);
            let compatible = spec.class_servers(c);
            if compatible.is_subset(busy) {
                push(DetailedState::Interleaved(appended(z, c as u8)), lam, Family::Class(c), Family::Departure);
                continue;
            }
            for s in compatible.difference(busy).iter() {
                let p = table.probability(busy, c, s);
                push(
                    DetailedState::Interleaved(appended(z, s as u8 | BUSY_TAG)),
                    lam * p,
                    Family::Server(s),
                    Family::Departure,
                );
            }
        }
        let increments = self.pf.token_rate().increments(&busy_order);
        let mut k = 0;
        for (j, &e) in z.iter().enumerate() {
            if e & BUSY_TAG == 0 {
                continue;
            }
            let s = (e & !BUSY_TAG) as usize;
            let d = increments[k];
            k += 1;
            let next = z[j + 1..]
                .iter()
                .position(|&f| f & BUSY_TAG == 0 && spec.class_servers(f as usize).contains(s))
                .map(|p| p + j + 1);
            match next {
                Some(q) => {
                    let c = z[q] as usize;
                    let mut t = z.clone();
                    t[q] = e;
                    t.remove(j);
                    push(DetailedState::Interleaved(t), d, Family::Departure, Family::Class(c));
                }
                None => push(DetailedState::Interleaved(removed(z, j)), d, Family::Departure, Family::Server(s)),
            }
        }
    }

    /// States that may lead to `state` in one transition.
    fn predecessor_candidates(&self, state: &DetailedState) -> Vec<DetailedState> {
        let spec = self.spec();
        let classes: Vec<u8> = (0..spec.num_classes() as u8).collect();
        let servers: Vec<u8> = (0..spec.num_servers() as u8).collect();
        let mut out = Vec::new();
        match state {
            DetailedState::Jobs(s) => {
                out.extend(edits(s, &classes).into_iter().map(DetailedState::Jobs));
            }
            DetailedState::TwoSided { jobs, servers: srv } => {
                let je = edits(jobs, &classes);
                let se = edits(srv, &servers);
                for j in &je {
                    out.push(two(j.clone(), srv.clone()));
                }
                for s in &se {
                    out.push(two(jobs.clone(), s.clone()));
                }
                if spec.kind() == ModelKind::Pbm {
                    for j in &je {
                        for s in &se {
                            out.push(two(j.clone(), s.clone()));
                        }
                    }
                }
            }
            DetailedState::Interleaved(z) => {
                let alphabet: Vec<u8> = classes.iter().copied().chain(servers.iter().map(|&b| b | BUSY_TAG)).collect();
                out.extend(edits(z, &alphabet).into_iter().map(DetailedState::Interleaved));
                for (k, &e) in z.iter().enumerate() {
                    if e & BUSY_TAG == 0 {
                        continue;
                    }
                    for &c in &classes {
                        for j in 0..=k {
                            let mut t = z.clone();
                            t[k] = c;
                            t.insert(j, e);
                            out.push(DetailedState::Interleaved(t));
                        }
                    }
                }
            }
            DetailedState::Tokens { busy, idle } => {
                if let Some(&last) = busy.last() {
                    let b = removed(busy, busy.len() - 1);
                    for j in 0..=idle.len() {
                        let mut i = idle.clone();
                        i.insert(j, last);
                        out.push(DetailedState::Tokens { busy: b.clone(), idle: i });
                    }
                }
                if let Some(&last) = idle.last() {
                    let i = removed(idle, idle.len() - 1);
                    for j in 0..=busy.len() {
                        let mut b = busy.clone();
                        b.insert(j, last);
                        out.push(DetailedState::Tokens { busy: b, idle: i.clone() });
                    }
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }

    /// Every state with a transition into `state`, with those transitions.
    pub fn predecessors(&self, state: &DetailedState) -> Result<Vec<(DetailedState, Transition)>> {
        let mut out = Vec::new();
        for y in self.predecessor_candidates(state) {
            if &y == state || !self.in_region(&y) || self.pf.validate(&y).is_err() {
                continue;
            }
            for t in self.transitions(&y)? {
                if &t.target == state {
                    out.push((y.clone(), t));
                }
            }
        }
        Ok(out)
    }

    /// Flow out minus flow in for every family, in units of the weight of `state`.
    pub fn balance(&self, state: &DetailedState) -> Result<BalanceReport> {
        let lw = self.pf.log_weight(state)?;
        let mut families: BTreeMap<Family, f64> = BTreeMap::new();
        for t in self.transitions(state)? {
            *families.entry(t.out_family).or_insert(0.0) += t.rate;
        }
        for (y, t) in self.predecessors(state)? {
            let ratio = (self.pf.log_weight(&y)? - lw).exp();
            *families.entry(t.in_family).or_insert(0.0) -= ratio * t.rate;
        }
        let global = families.values().sum();
        Ok(BalanceReport { families, global })
    }
}

/// Residuals of the balance equations at one state.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BalanceReport {
    pub families: BTreeMap<Family, f64>,
    pub global: f64,
}

impl BalanceReport {
    pub fn max_family_residual(&self) -> f64 {
        self.families.values().fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// Partial-balance residual of one family at `state`; zero when the family
/// has no flow there.
pub fn partial_balance_residual(
    spec: &SystemSpec,
    table: Option<&ActivationTable>,
    state: &DetailedState,
    family: Family,
) -> Result<f64> {
    let pf = match table {
        Some(t) => ProductForm::with_table(spec, t)?,
        None => ProductForm::new(spec)?,
    };
    let report = Dynamics::new(pf).balance(state)?;
    Ok(report.families.get(&family).copied().unwrap_or(0.0))
}

/// Largest residual over every family and every state of size at most
/// `max_size`, computed from one forward pass over states up to
/// `max_size + 1`.
pub fn balance_sweep(dynamics: &Dynamics, max_size: usize) -> Result<SweepSummary> {
    let pf = dynamics.product_form();
    let states = pf.enumerate(max_size + 1);
    let weights: HashMap<&DetailedState, f64> =
        states.iter().map(|s| Ok((s, pf.log_weight(s)?))).collect::<Result<_>>()?;
    let mut flows: HashMap<(&DetailedState, Family), f64> = HashMap::new();
    let mut inflow: HashMap<(DetailedState, Family), f64> = HashMap::new();
    for s in &states {
        for t in dynamics.transitions(s)? {
            *flows.entry((s, t.out_family)).or_insert(0.0) += t.rate;
            let Some(&lt) = weights.get(&t.target) else {
                if dynamics.size(&t.target) <= max_size + 1 {
                    return Err(Error::InvalidState(format!("transition reaches unlisted state {}", t.target.label(pf.spec()))));
                }
                continue;
            };
            *inflow.entry((t.target.clone(), t.in_family)).or_insert(0.0) += (weights[s] - lt).exp() * t.rate;
        }
    }
    let mut summary = SweepSummary { states: 0, max_family_residual: 0.0, max_global_residual: 0.0, worst: None };
    let mut by_state: HashMap<&DetailedState, BTreeMap<Family, f64>> = HashMap::new();
    for ((x, f), r) in flows {
        *by_state.entry(x).or_default().entry(f).or_insert(0.0) += r;
    }
    for ((x, f), r) in inflow {
        if let Some((k, _)) = weights.get_key_value(&x) {
            *by_state.entry(*k).or_default().entry(f).or_insert(0.0) -= r;
        }
    }
    for s in states.iter().filter(|s| dynamics.size(s) <= max_size) {
        summary.states += 1;
        let Some(fams) = by_state.get(s) else { continue };
        let global: f64 = fams.values().sum();
        summary.max_global_residual = summary.max_global_residual.max(global.abs());
        for (f, r) in fams {
            if r.abs() > summary.max_family_residual {
                summary.max_family_residual = r.abs();
                summary.worst = Some((s.clone(), *f));
            }
        }
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub states: usize,
    pub max_family_residual: f64,
    pub max_global_residual: f64,
    pub worst: Option<(DetailedState, Family)>,
}

fn two(jobs: Seq, servers: Seq) -> DetailedState {
    DetailedState::TwoSided { jobs, servers }
}

fn appended(s: &Seq, x: u8) -> Seq {
    let mut t = s.clone();
    t.push(x);
    t
}

fn removed(s: &Seq, j: usize) -> Seq {
    let mut t = s.clone();
    t.remove(j);
    t
}

/// `s` with one entry removed, or one symbol inserted anywhere.
fn edits(s: &Seq, alphabet: &[u8]) -> Vec<Seq> {
    let mut out = Vec::with_capacity(s.len() + (s.len() + 1) * alphabet.len());
    for j in 0..s.len() {
        out.push(removed(s, j));
    }
    for j in 0..=s.len() {
        for &a in alphabet {
            let mut t = s.clone();
            t.insert(j, a);
            out.push(t);
        }
    }
    out
}

/// Sums the rates of transitions sharing target and families.
fn merge(mut ts: Vec<Transition>) -> Vec<Transition> {
    ts.sort_by(|a, b| (&a.target, a.out_family, a.in_family).cmp(&(&b.target, b.out_family, b.in_family)));
    let mut out: Vec<Transition> = Vec::with_capacity(ts.len());
    for t in ts {
        match out.last_mut() {
            Some(l) if l.target == t.target && l.out_family == t.out_family && l.in_family == t.in_family => l.rate += t.rate,
            _ => out.push(t),
        }
    }
    out
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
    fn collaborative_families_balance() {
        let spec = w_model(ModelKind::Collaborative);
        let dyn_ = Dynamics::new(ProductForm::new(&spec).unwrap());
        for s in dyn_.product_form().enumerate(3) {
            let r = dyn_.balance(&s).unwrap();
            assert!(r.max_family_residual() < 1e-12, "{s:?}: {r:?}");
        }
        let empty = DetailedState::empty(&spec);
        let r = partial_balance_residual(&spec, None, &empty, Family::Class(2)).unwrap();
        assert!(r.abs() < 1e-15);
    }

    #[test]
    fn rais_families_balance() {
        let spec = w_model(ModelKind::NcRais);
        let table = build_activation(&spec).unwrap();
        let dyn_ = Dynamics::new(ProductForm::with_table(&spec, &table).unwrap());
        let sweep = balance_sweep(&dyn_, 4).unwrap();
        assert!(sweep.max_family_residual < 1e-12, "{sweep:?}");
        for s in dyn_.product_form().enumerate(3) {
            let r = dyn_.balance(&s).unwrap();
            assert!(r.max_family_residual() < 1e-12, "{s:?}: {r:?}");
        }
    }

    #[test]
    fn truncated_arrivals_are_rejected() {
        let spec = w_model(ModelKind::Collaborative);
        let dyn_ = Dynamics::truncated(ProductForm::new(&spec).unwrap(), 1);
        let s = DetailedState::jobs(&spec, &["1"]).unwrap();
        assert!(dyn_.transitions(&s).unwrap().iter().all(|t| t.target.size() == 0));
    }

    fn n_shape(kind: ModelKind) -> SystemBuilder {
        SystemBuilder::new(kind)
            .class("1", 0.6)
            .class("2", 0.5)
            .server("1", 1.5)
            .server("2", 1.2)
            .edges("1", &["1", "2"])
            .edge("2", "2")
    }

    fn sweep(spec: &SystemSpec, table: Option<&ActivationTable>, size: usize) -> SweepSummary {
        let pf = match table {
            Some(t) => ProductForm::with_table(spec, t).unwrap(),
            None => ProductForm::new(spec).unwrap(),
        };
        balance_sweep(&Dynamics::new(pf), size).unwrap()
    }

    #[test]
    fn every_kind_balances() {
        let cases: Vec<(SystemSpec, bool)> = vec![
            (w_model(ModelKind::NcAlis), false),
            (w_model(ModelKind::Dbm), false),
            (n_shape(ModelKind::DbmK(2)).build().unwrap(), false),
            (
                SystemBuilder::new(ModelKind::Dbma)
                    .class_with_abandonment("1", 0.6, 0.3)
                    .class_with_abandonment("2", 0.5, 0.2)
                    .server_with_abandonment("1", 1.5, 0.4)
                    .server_with_abandonment("2", 1.2, 0.7)
                    .edges("1", &["1", "2"])
                    .edge("2", "2")
                    .build()
                    .unwrap(),
                false,
            ),
            (
                n_shape(ModelKind::Collaborative).class_with_abandonment("3", 0.2, 0.5).edge("3", "1").build().unwrap(),
                false,
            ),
            (
                n_shape(ModelKind::TokenRais)
                    .processor("p", 1.0)
                    .processor("q", 2.0)
                    .token_edge("1", "p")
                    .token_edge("2", "p")
                    .token_edge("2", "q")
                    .build()
                    .unwrap(),
                true,
            ),
            (
                n_shape(ModelKind::ClosedToken).processor("p", 1.0).token_edge("1", "p").token_edge("2", "p").build().unwrap(),
                false,
            ),
            (
                SystemBuilder::new(ModelKind::Gm)
                    .class("a", 0.3)
                    .class("b", 0.3)
                    .class("c", 0.4)
                    .link("a", "b")
                    .link("b", "c")
                    .link("a", "c")
                    .build()
                    .unwrap(),
                false,
            ),
        ];
        for (spec, needs_table) in cases {
            let table = needs_table.then(|| build_activation(&spec).unwrap());
            let s = sweep(&spec, table.as_ref(), 4);
            assert!(s.states > 0);
            assert!(s.max_family_residual < 1e-12, "{}: {s:?}", spec.kind());
        }
    }

    #[test]
    fn paired_arrivals_balance_globally() {
        let spec = n_shape(ModelKind::Pbm).build().unwrap();
        let s = sweep(&spec, None, 4);
        assert!(s.max_global_residual < 1e-12, "{s:?}");
    }
}
