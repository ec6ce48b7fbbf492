//! Randomized assignment of arriving jobs to idle servers.
//!
//! A table gives, for every set of busy servers `B`, the probability that an
//! arriving class-`c` job with at least one idle compatible server is sent to
//! idle server `s`, and the induced activation rates
//! `lambda_s(B) = sum_c lambda_c p(c -> s | B)`. The product of activation
//! rates along an order of busy servers must not depend on the order.
//!
//! Construction: the target products are the ones induced by assigning to the
//! longest idle server and averaging over the stationary order of idle
//! servers, `P(B) = h(complement of B) / h(all)` with
//! `h(I) = (1/lambda(C(I))) sum_{s in I} h(I \ s)`. Routing probabilities that
//! realize the targets are then obtained from a feasibility max-flow per busy
//! set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BitSet, SystemSpec};

/// Largest server count for which a table is built.
pub const TABLE_SERVER_CAP: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub class: usize,
    pub server: usize,
    pub probability: f64,
}

/// How a table was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssignmentRule {
    /// Targets averaged over longest-idle orders, routing from max-flow.
    IdleOrderAverage,
    /// Loaded from an exported table.
    Imported,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTable {
    classes: usize,
    servers: usize,
    rates: Vec<Vec<f64>>,
    routing: Vec<Vec<Route>>,
    rule: AssignmentRule,
}

/// Outcome of checking the assignment condition.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentReport {
    /// Largest relative spread of the activation product over orders of a busy set.
    pub max_order_spread: f64,
    /// Largest relative residual of a two-server cycle identity.
    pub max_cycle_residual: f64,
    /// Largest mismatch between stored rates and rates implied by the routing.
    pub max_routing_mismatch: f64,
    /// Largest mismatch between total activation and the rate of jobs that find an idle server.
    pub max_total_mismatch: f64,
}

impl ActivationTable {
    pub fn servers(&self) -> usize {
        self.servers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn rule(&self) -> AssignmentRule {
        self.rule
    }

    /// Activation rate of idle server `server` when `busy` are busy.
    pub fn rate(&self, busy: BitSet, server: usize) -> f64 {
        self.rates[busy.0 as usize][server]
    }

    /// Routing entries for busy set `busy`.
    pub fn routes(&self, busy: BitSet) -> &[Route] {
        &self.routing[busy.0 as usize]
    }

    /// Probability that a class-`class` job is sent to `server` when `busy` are busy.
    pub fn probability(&self, busy: BitSet, class: usize, server: usize) -> f64 {
        self.routes(busy)
            .iter()
            .find(|r| r.class == class && r.server == server)
            .map_or(0.0, |r| r.probability)
    }

    /// Product of activation rates along the busy order `order`.
    pub fn product(&self, order: &[usize]) -> f64 {
        let mut busy = BitSet::EMPTY;
        let mut p = 1.0;
        for &b in order {
            p *= self.rate(busy, b);
            busy = busy.with(b);
        }
        p
    }

    /// Portable form with class and server ids.
    pub fn export(&self, spec: &SystemSpec) -> TableExport {
        let mut rates = Vec::new();
        let mut routing = Vec::new();
        for mask in 0..self.rates.len() {
            let busy = BitSet(mask as u64);
            for s in BitSet::full(self.servers).difference(busy).iter() {
                rates.push(RateEntry {
                    busy: spec.server_labels(busy),
                    server: spec.servers()[s].id.clone(),
                    rate: self.rates[mask][s],
                });
            }
            for r in &self.routing[mask] {
                routing.push(RouteEntry {
                    busy: spec.server_labels(busy),
                    class: spec.classes()[r.class].id.clone(),
                    server: spec.servers()[r.server].id.clone(),
                    probability: r.probability,
                });
            }
        }
        TableExport { rule: self.rule, rates, routing }
    }

    /// Rebuilds a table from its exported form.
    pub fn import(spec: &SystemSpec, data: &TableExport) -> Result<Self> {
        let m = spec.num_servers();
        if m > TABLE_SERVER_CAP {
            return Err(Error::SizeCap { what: "servers in activation table".into(), size: m, cap: TABLE_SERVER_CAP });
        }
        let size = 1usize << m;
        let mut rates = vec![vec![0.0; m]; size];
        let mut routing = vec![Vec::new(); size];
        let busy_of = |ids: &[String]| -> Result<BitSet> {
            let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            spec.server_set(&refs)
        };
        for e in &data.rates {
            let busy = busy_of(&e.busy)?;
            let s = spec.server_ids(&[e.server.as_str()])?[0];
            if busy.contains(s) {
                return Err(Error::Validation(format!("activation entry for busy server {:?}", e.server)));
            }
            rates[busy.0 as usize][s] = e.rate;
        }
        for e in &data.routing {
            let busy = busy_of(&e.busy)?;
            let s = spec.server_ids(&[e.server.as_str()])?[0];
            let c = spec.class_ids(&[e.class.as_str()])?[0];
            routing[busy.0 as usize].push(Route { class: c, server: s, probability: e.probability });
        }
        Ok(ActivationTable { classes: spec.num_classes(), servers: m, rates, routing, rule: AssignmentRule::Imported })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateEntry {
    pub busy: Vec<String>,
    pub server: String,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteEntry {
    pub busy: Vec<String>,
    pub class: String,
    pub server: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableExport {
    pub rule: AssignmentRule,
    pub rates: Vec<RateEntry>,
    pub routing: Vec<RouteEntry>,
}

/// Sum over all orders of the idle set `I` of `prod_j 1/lambda(C(I_j))`,
/// where `I_j` is the set of the first `j` idle servers, for every `I`.
pub fn idle_order_weights(spec: &SystemSpec) -> Vec<f64> {
    let m = spec.num_servers();
    let size = 1usize << m;
    let mut h = vec![0.0; size];
    h[0] = 1.0;
    for mask in 1..size {
        let set = BitSet(mask as u64);
        let lam = spec.arrival_rate(spec.classes_of(set));
        let s: f64 = set.iter().map(|j| h[set.without(j).0 as usize]).sum();
        h[mask] = s / lam;
    }
    h
}

/// Builds an activation table satisfying the assignment condition.
pub fn build_activation(spec: &SystemSpec) -> Result<ActivationTable> {
    let m = spec.num_servers();
    if m > TABLE_SERVER_CAP {
        return Err(Error::SizeCap { what: "servers in activation table".into(), size: m, cap: TABLE_SERVER_CAP });
    }
    let all = spec.all_servers();
    let h = idle_order_weights(spec);
    let size = 1usize << m;
    let mut rates = vec![vec![0.0; m]; size];
    let mut routing = vec![Vec::new(); size];
    for mask in 0..size {
        let busy = BitSet(mask as u64);
        let idle = all.difference(busy);
        if idle.is_empty() {
            continue;
        }
        for s in idle.iter() {
            rates[mask][s] = h[idle.without(s).0 as usize] / h[idle.0 as usize];
        }
        routing[mask] = route_by_flow(spec, idle, &rates[mask])?;
    }
    Ok(ActivationTable { classes: spec.num_classes(), servers: m, rates, routing, rule: AssignmentRule::IdleOrderAverage })
}

/// Splits every class with an idle compatible server among those servers so
/// that server `s` receives `demand[s]`.
fn route_by_flow(spec: &SystemSpec, idle: BitSet, demand: &[f64]) -> Result<Vec<Route>> {
    let classes: Vec<usize> = spec.classes_of(idle).iter().collect();
    let servers: Vec<usize> = idle.iter().collect();
    let nc = classes.len();
    let source = 0;
    let sink = 1 + nc + servers.len();
    let mut g = FlowGraph::new(sink + 1);
    for (k, &c) in classes.iter().enumerate() {
        g.add_edge(source, 1 + k, spec.arrival(c));
        for (l, &s) in servers.iter().enumerate() {
            if spec.class_servers(c).contains(s) {
                g.add_edge(1 + k, 1 + nc + l, f64::INFINITY);
            }
        }
    }
    for (l, &s) in servers.iter().enumerate() {
        g.add_edge(1 + nc + l, sink, demand[s]);
    }
    let supply: f64 = classes.iter().map(|&c| spec.arrival(c)).sum();
    let flow = g.max_flow(source, sink);
    if (flow - supply).abs() > 1e-9 * supply.max(1.0) {
        return Err(Error::Validation(format!(
            "activation targets for idle set {:?} are not realizable (flow {flow} of {supply})",
            spec.server_labels(idle)
        )));
    }
    let mut routes = Vec::new();
    for (k, &c) in classes.iter().enumerate() {
        let lam = spec.arrival(c);
        let mut entries: Vec<Route> = g
            .edges_from(1 + k)
            .filter(|&(to, f)| to > nc && to < sink && f > 0.0)
            .map(|(to, f)| Route { class: c, server: servers[to - 1 - nc], probability: f / lam })
            .collect();
        let total: f64 = entries.iter().map(|r| r.probability).sum();
        for r in &mut entries {
            r.probability /= total;
        }
        entries.sort_by_key(|r| r.server);
        routes.extend(entries);
    }
    Ok(routes)
}

/// Checks the assignment condition for every busy set: the activation
/// product is the same along every order, the two-server cycle identities
/// hold, the routing reproduces the rates, and the total activation rate
/// equals the rate of jobs that find an idle compatible server.
pub fn verify_assignment_condition(spec: &SystemSpec, table: &ActivationTable, tol: f64) -> Result<AssignmentReport> {
    let m = spec.num_servers();
    if table.servers != m || table.classes != spec.num_classes() {
        return Err(Error::Validation("activation table does not match the system".into()));
    }
    let all = spec.all_servers();
    let size = 1usize << m;
    let mut report = AssignmentReport {
        max_order_spread: 0.0,
        max_cycle_residual: 0.0,
        max_routing_mismatch: 0.0,
        max_total_mismatch: 0.0,
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE);

    // Routing consistency and totals.
    for mask in 0..size {
        let busy = BitSet(mask as u64);
        let idle = all.difference(busy);
        if idle.is_empty() {
            continue;
        }
        let mut implied = vec![0.0; m];
        let mut per_class = vec![0.0; spec.num_classes()];
        for r in table.routes(busy) {
            if !idle.contains(r.server) || !spec.class_servers(r.class).contains(r.server) {
                return Err(Error::Validation(format!(
                    "routing sends class {:?} to busy or incompatible server {:?}",
                    spec.classes()[r.class].id,
                    spec.servers()[r.server].id
                )));
            }
            if !(r.probability >= 0.0) {
                return Err(Error::Validation("negative routing probability".into()));
            }
            implied[r.server] += spec.arrival(r.class) * r.probability;
            per_class[r.class] += r.probability;
        }
        for c in spec.classes_of(idle).iter() {
            report.max_routing_mismatch = report.max_routing_mismatch.max((per_class[c] - 1.0).abs());
        }
        let mut total = 0.0;
        for s in idle.iter() {
            report.max_routing_mismatch = report.max_routing_mismatch.max(rel(implied[s], table.rate(busy, s)));
            total += table.rate(busy, s);
        }
        let expected = spec.arrival_rate(spec.classes_of(idle));
        report.max_total_mismatch = report.max_total_mismatch.max(rel(total, expected));
    }

    // Two-server cycles.
    for mask in 0..size {
        let busy = BitSet(mask as u64);
        let idle: Vec<usize> = all.difference(busy).iter().collect();
        for (a, &u) in idle.iter().enumerate() {
            for &v in &idle[a + 1..] {
                let lhs = table.rate(busy, u) * table.rate(busy.with(u), v);
                let rhs = table.rate(busy, v) * table.rate(busy.with(v), u);
                report.max_cycle_residual = report.max_cycle_residual.max(rel(lhs, rhs));
            }
        }
    }

    // Extremes of the product over all orders of every busy set.
    let mut hi = vec![(0.0f64, usize::MAX); size];
    let mut lo = vec![(f64::INFINITY, usize::MAX); size];
    hi[0] = (1.0, usize::MAX);
    lo[0] = (1.0, usize::MAX);
    let mut worst: Option<(usize, f64)> = None;
    for mask in 1..size {
        let set = BitSet(mask as u64);
        for b in set.iter() {
            let prev = set.without(b);
            let r = table.rate(prev, b);
            let (h, l) = (hi[prev.0 as usize].0 * r, lo[prev.0 as usize].0 * r);
            if h > hi[mask].0 {
                hi[mask] = (h, b);
            }
            if l < lo[mask].0 {
                lo[mask] = (l, b);
            }
        }
        let spread = rel(hi[mask].0, lo[mask].0);
        if spread > report.max_order_spread {
            report.max_order_spread = spread;
        }
        if spread > tol && worst.is_none_or(|w| spread > w.1) {
            worst = Some((mask, spread));
        }
    }
    if report.max_routing_mismatch > tol {
        return Err(Error::Tolerance {
            what: "routing consistency of activation table".into(),
            value: report.max_routing_mismatch,
            tolerance: tol,
        });
    }
    if report.max_total_mismatch > tol {
        return Err(Error::Tolerance {
            what: "total activation rate".into(),
            value: report.max_total_mismatch,
            tolerance: tol,
        });
    }
    if let Some((mask, spread)) = worst {
        let trace = |ext: &Vec<(f64, usize)>| {
            let mut order = Vec::new();
            let mut set = BitSet(mask as u64);
            while !set.is_empty() {
                let b = ext[set.0 as usize].1;
                order.push(spec.servers()[b].id.clone());
                set = set.without(b);
            }
            order.reverse();
            order
        };
        return Err(Error::AssignmentViolation {
            busy: spec.server_labels(BitSet(mask as u64)),
            first: trace(&hi),
            second: trace(&lo),
            discrepancy: spread,
        });
    }
    Ok(report)
}

/// Dinic max-flow on a small dense graph with floating capacities.
struct FlowGraph {
    adj: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<f64>,
    orig: Vec<f64>,
}

const FLOW_EPS: f64 = 1e-15;

impl FlowGraph {
    fn new(n: usize) -> Self {
        FlowGraph { adj: vec![Vec::new(); n], to: Vec::new(), cap: Vec::new(), orig: Vec::new() }
    }

    fn add_edge(&mut self, u: usize, v: usize, c: f64) {
        self.adj[u].push(self.to.len());
        self.to.push(v);
        self.cap.push(c);
        self.orig.push(c);
        self.adj[v].push(self.to.len());
        self.to.push(u);
        self.cap.push(0.0);
        self.orig.push(0.0);
    }

    fn edges_from(&self, u: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.adj[u]
            .iter()
            .filter(|&&e| e % 2 == 0)
            .map(|&e| (self.to[e], self.cap[e ^ 1]))
    }

    fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let n = self.adj.len();
        let mut total = 0.0;
        loop {
            let mut level = vec![usize::MAX; n];
            level[s] = 0;
            let mut queue = std::collections::VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for &e in &self.adj[u] {
                    let v = self.to[e];
                    if self.cap[e] > FLOW_EPS && level[v] == usize::MAX {
                        level[v] = level[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
            if level[t] == usize::MAX {
                return total;
            }
            let mut next = vec![0usize; n];
            loop {
                let f = self.push(s, t, f64::INFINITY, &level, &mut next);
                if f <= FLOW_EPS {
                    break;
                }
                total += f;
            }
        }
    }

    fn push(&mut self, u: usize, t: usize, limit: f64, level: &[usize], next: &mut [usize]) -> f64 {
        if u == t {
            return limit;
        }
        while next[u] < self.adj[u].len() {
            let e = self.adj[u][next[u]];
            let v = self.to[e];
            if self.cap[e] > FLOW_EPS && level[v] == level[u] + 1 {
                let f = self.push(v, t, limit.min(self.cap[e]), level, next);
                if f > FLOW_EPS {
                    self.cap[e] -= f;
                    self.cap[e ^ 1] += f;
                    return f;
                }
            }
            next[u] += 1;
        }
        0.0
    }
}
