//! Discrete-event simulation of every model kind, the truncated generator
//! solver, and tools to compare estimates with exact results.

pub mod compare;
mod coupled;
pub mod generator;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::assignment::ActivationTable;
use crate::detailed::{DetailedState, Seq, BUSY_TAG};
use crate::error::{Error, Result};
use crate::model::{BitSet, ModelKind, SystemSpec};
use crate::oi::OiRate;

pub use compare::Stat;
pub use coupled::{coupled_trace, CoupledTrace};
pub use generator::{busy_servers, generator_solve, GeneratorSolution, SolveConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecordFlags {
    pub state_occupancy: bool,
    pub response_samples: bool,
    pub departure_gaps: bool,
    pub busy_set_occupancy: bool,
}

impl Default for RecordFlags {
    fn default() -> Self {
        RecordFlags { state_occupancy: true, response_samples: true, departure_gaps: false, busy_set_occupancy: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub seed: u64,
    pub warmup: f64,
    pub horizon: f64,
    pub replications: usize,
    pub record: RecordFlags,
    /// Keep every `sample_stride`-th response sample of each class.
    pub sample_stride: usize,
    /// Most response samples kept per class and replication.
    pub max_samples: usize,
    /// A replication aborts when a queue grows beyond this length.
    pub queue_cap: usize,
    pub threads: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            warmup: 1e5,
            horizon: 1e6,
            replications: 10,
            record: RecordFlags::default(),
            sample_stride: 1,
            max_samples: 1_000_000,
            queue_cap: 100_000,
            threads: 1,
        }
    }
}

impl SimConfig {
    /// Configuration with warmup set to a tenth of the horizon.
    pub fn new(seed: u64, horizon: f64, replications: usize) -> Self {
        SimConfig { seed, warmup: horizon / 10.0, horizon, replications, ..SimConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup >= 0.0 && self.horizon > self.warmup && self.horizon.is_finite()) {
            return Err(Error::Validation(format!(
                "need horizon > warmup >= 0, got horizon {} and warmup {}",
                self.horizon, self.warmup
            )));
        }
        if self.replications == 0 {
            return Err(Error::Validation("need at least one replication".into()));
        }
        if self.sample_stride == 0 {
            return Err(Error::Validation("sample stride must be positive".into()));
        }
        Ok(())
    }
}

/// Output of one replication. Occupancies are fractions of the observed
/// time after warmup.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Replication {
    pub index: usize,
    pub occupancy: BTreeMap<DetailedState, f64>,
    pub busy_sets: BTreeMap<BitSet, f64>,
    /// Time from arrival to departure (or to matching) per class.
    pub response: Vec<Vec<f64>>,
    /// Time from arrival to start of service per class, for kinds with
    /// dedicated servers.
    pub waiting: Vec<Vec<f64>>,
    pub departure_gaps: Vec<f64>,
    pub events: u64,
    /// Arrivals rejected or lost.
    pub lost: u64,
    pub abandoned: u64,
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimEstimate {
    pub seed: u64,
    pub replications: Vec<Replication>,
}

impl SimEstimate {
    pub fn completed(&self) -> impl Iterator<Item = &Replication> {
        self.replications.iter().filter(|r| r.aborted.is_none())
    }

    pub fn aborted(&self) -> usize {
        self.replications.len() - self.completed().count()
    }

    /// Mean occupancy over completed replications with its standard error.
    pub fn occupancy(&self) -> BTreeMap<DetailedState, Stat> {
        let per: Vec<&BTreeMap<DetailedState, f64>> = self.completed().map(|r| &r.occupancy).collect();
        across(&per)
    }

    pub fn pooled_occupancy(&self) -> BTreeMap<DetailedState, f64> {
        self.occupancy().into_iter().map(|(k, s)| (k, s.mean)).collect()
    }

    pub fn busy_set_occupancy(&self) -> BTreeMap<BitSet, Stat> {
        let per: Vec<&BTreeMap<BitSet, f64>> = self.completed().map(|r| &r.busy_sets).collect();
        across(&per)
    }

    pub fn response_samples(&self, class: usize) -> Vec<f64> {
        self.completed().flat_map(|r| r.response[class].iter().copied()).collect()
    }

    pub fn waiting_samples(&self, class: usize) -> Vec<f64> {
        self.completed().flat_map(|r| r.waiting[class].iter().copied()).collect()
    }

    /// Mean response time of `class` with the standard error across
    /// replications.
    pub fn mean_response(&self, class: usize) -> Stat {
        let means: Vec<f64> = self
            .completed()
            .filter(|r| !r.response[class].is_empty())
            .map(|r| r.response[class].iter().sum::<f64>() / r.response[class].len() as f64)
            .collect();
        Stat::of(&means)
    }

    pub fn departure_gaps(&self) -> Vec<f64> {
        self.completed().flat_map(|r| r.departure_gaps.iter().copied()).collect()
    }
}

fn across<K: Ord + Clone>(per: &[&BTreeMap<K, f64>]) -> BTreeMap<K, Stat> {
    let mut keys: BTreeMap<K, Vec<f64>> = BTreeMap::new();
    for m in per {
        for k in m.keys() {
            keys.entry(k.clone()).or_default();
        }
    }
    for (k, v) in keys.iter_mut() {
        v.extend(per.iter().map(|m| m.get(k).copied().unwrap_or(0.0)));
    }
    keys.into_iter().map(|(k, v)| (k, Stat::of(&v))).collect()
}

/// Runs `cfg.replications` independent replications. Replication `r` draws
/// from stream `r` of a generator seeded with `cfg.seed`, so results do not
/// depend on the thread count.
pub fn simulate(spec: &SystemSpec, table: Option<&ActivationTable>, cfg: &SimConfig) -> Result<SimEstimate> {
    cfg.validate()?;
    check_inputs(spec, table)?;
    let threads = cfg.threads.clamp(1, cfg.replications);
    let mut reps: Vec<Option<Result<Replication>>> = (0..cfg.replications).map(|_| None).collect();
    if threads == 1 {
        for (r, slot) in reps.iter_mut().enumerate() {
            *slot = Some(run_replication(spec, table, cfg, r, None));
        }
    } else {
        let chunk = cfg.replications.div_ceil(threads);
        std::thread::scope(|scope| {
            for (c, slots) in reps.chunks_mut(chunk).enumerate() {
                scope.spawn(move || {
                    for (k, slot) in slots.iter_mut().enumerate() {
                        *slot = Some(run_replication(spec, table, cfg, c * chunk + k, None));
                    }
                });
            }
        });
    }
    let replications = reps.into_iter().map(|r| r.expect("every replication runs")).collect::<Result<Vec<_>>>()?;
    let est = SimEstimate { seed: cfg.seed, replications };
    if est.completed().count() == 0 {
        let reason = est.replications[0].aborted.clone().unwrap_or_default();
        return Err(Error::SimulationAborted(format!("all {} replications aborted: {reason}", cfg.replications)));
    }
    Ok(est)
}

/// Runs a single replication and writes every event to `log` as one JSON
/// object per line.
pub fn simulate_logged(
    spec: &SystemSpec,
    table: Option<&ActivationTable>,
    cfg: &SimConfig,
    replication: usize,
    log: &mut dyn Write,
) -> Result<Replication> {
    cfg.validate()?;
    check_inputs(spec, table)?;
    run_replication(spec, table, cfg, replication, Some(log))
}

fn check_inputs(spec: &SystemSpec, table: Option<&ActivationTable>) -> Result<()> {
    if matches!(spec.kind(), ModelKind::NcRais | ModelKind::TokenRais) {
        let t = table.ok_or_else(|| Error::Validation("randomized assignment needs an activation table".into()))?;
        if t.classes() != spec.num_classes() || t.servers() != spec.num_servers() {
            return Err(Error::Validation("activation table does not match the system".into()));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct Job {
    class: u8,
    arrival: f64,
}

#[derive(Serialize)]
struct EventRecord<'a> {
    t: f64,
    event: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    class: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    server: Option<&'a str>,
}

struct Ctx<'a, 'w> {
    spec: &'a SystemSpec,
    rng: ChaCha8Rng,
    now: f64,
    warmup: f64,
    flags: RecordFlags,
    stride: usize,
    max_samples: usize,
    response_seen: Vec<usize>,
    waiting_seen: Vec<usize>,
    rep: Replication,
    last_departure: Option<f64>,
    log: Option<&'w mut dyn Write>,
    log_error: Option<std::io::Error>,
}

impl Ctx<'_, '_> {
    fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    fn log(&mut self, event: &str, class: Option<usize>, server: Option<usize>) {
        let Some(out) = self.log.as_mut() else { return };
        let rec = EventRecord {
            t: self.now,
            event,
            class: class.map(|c| self.spec.classes()[c].id.as_str()),
            server: server.map(|s| self.spec.servers()[s].id.as_str()),
        };
        let res = serde_json::to_writer(&mut *out, &rec).map_err(std::io::Error::from).and_then(|_| out.write_all(b"\n"));
        if let Err(e) = res {
            self.log_error.get_or_insert(e);
        }
    }

    fn arrive(&mut self, class: usize) {
        self.log("arrival", Some(class), None);
    }

    fn start(&mut self, job: Job, server: usize) {
        self.log("service_start", Some(job.class as usize), Some(server));
        let c = job.class as usize;
        if self.flags.response_samples && job.arrival >= self.warmup {
            self.waiting_seen[c] += 1;
            if self.waiting_seen[c].is_multiple_of(self.stride) && self.rep.waiting[c].len() < self.max_samples {
                self.rep.waiting[c].push(self.now - job.arrival);
            }
        }
    }

    fn depart(&mut self, job: Job, server: Option<usize>, event: &str) {
        self.log(event, Some(job.class as usize), server);
        let c = job.class as usize;
        if self.flags.response_samples && job.arrival >= self.warmup {
            self.response_seen[c] += 1;
            if self.response_seen[c].is_multiple_of(self.stride) && self.rep.response[c].len() < self.max_samples {
                self.rep.response[c].push(self.now - job.arrival);
            }
        }
        self.departure_gap();
    }

    fn departure_gap(&mut self) {
        if self.flags.departure_gaps && self.now >= self.warmup {
            if let Some(l) = self.last_departure {
                self.rep.departure_gaps.push(self.now - l);
            }
            self.last_departure = Some(self.now);
        }
    }

    fn abandon(&mut self, class: Option<usize>, server: Option<usize>) {
        self.log("abandonment", class, server);
        self.rep.abandoned += 1;
        if class.is_some() {
            self.departure_gap();
        }
    }

    fn lose(&mut self, class: Option<usize>, server: Option<usize>) {
        self.log("loss", class, server);
        self.rep.lost += 1;
    }
}

trait Engine {
    /// Total event rate; ignored by slotted engines.
    fn rate(&self) -> f64;
    fn fire(&mut self, u: f64, ctx: &mut Ctx<'_, '_>) -> Result<()>;
    fn key(&self) -> DetailedState;
    fn busy(&self) -> Option<BitSet>;
    fn len(&self) -> usize;
}

fn pick(weights: impl Iterator<Item = f64>, mut u: f64) -> Option<usize> {
    let mut last = None;
    for (i, w) in weights.enumerate() {
        if w <= 0.0 {
            continue;
        }
        if u < w {
            return Some(i);
        }
        u -= w;
        last = Some(i);
    }
    last
}

fn classes_of(jobs: &[Job]) -> Seq {
    jobs.iter().map(|j| j.class).collect()
}

struct Collaborative<'a> {
    spec: &'a SystemSpec,
    queue: Vec<Job>,
    served: f64,
    abandoning: f64,
}

impl Collaborative<'_> {
    fn refresh(&mut self) {
        let mut covered = BitSet::EMPTY;
        for j in &self.queue {
            covered = covered.union(self.spec.class_servers(j.class as usize));
        }
        self.served = self.spec.service_rate(covered);
        self.abandoning = self.queue.iter().map(|j| self.spec.class_abandonment(j.class as usize)).sum();
    }
}

impl Engine for Collaborative<'_> {
    fn rate(&self) -> f64 {
        self.spec.total_arrival() + self.served + self.abandoning
    }

    fn fire(&mut self, mut u: f64, ctx: &mut Ctx<'_, '_>) -> Result<()> {
        let spec = self.spec;
        let lam = spec.total_arrival();
        if u < lam {
            let c = pick((0..spec.num_classes()).map(|i| spec.arrival(i)), u).unwrap_or(0);
            ctx.arrive(c);
            self.queue.push(Job { class: c as u8, arrival: ctx.now });
        } else {
            u -= lam;
            let mut covered = BitSet::EMPTY;
            let mut chosen = None;
            for (j, job) in self.queue.iter().enumerate() {
                let s = spec.class_servers(job.class as usize);
                let inc = spec.service_rate(s.difference(covered));
                covered = covered.union(s);
                let g = spec.class_abandonment(job.class as usize);
                if u < inc {
                    chosen = Some((j, false));
                    break;
                }
                u -= inc;
                if u < g {
                    chosen = Some((j, true));
                    break;
                }
                u -= g;
            }
            let (j, abandoned) = chosen.unwrap_or((self.queue.len() - 1, false));
            let job = self.queue.remove(j);
            if abandoned {
                ctx.abandon(Some(job.class as usize), None);
            } else {
                ctx.depart(job, None, "completion");
            }
        }
        self.refresh();
        Ok(())
    }

    fn key(&self) -> DetailedState {
        DetailedState::Jobs(classes_of(&self.queue))
    }

    fn busy(&self) -> Option<BitSet> {
        None
    }

    fn len(&self) -> usize {
        self.queue.len()
    }
}

struct Alis<'a> {
    spec: &'a SystemSpec,
    waiting: Vec<Job>,
    idle: Seq,
    in_service: Vec<Option<Job>>,
}

impl Engine for Alis<'_> {
    fn rate(&self) -> f64 {
        let busy: f64 = (0..self.spec.num_servers()).filter(|&s| self.in_service[s].is_some()).map(|s| self.spec.service(s)).sum();
        self.spec.total_arrival() + busy
    }

    fn fire(&mut self, mut u: f64, ctx: &mut Ctx<'_, '_>) -> Result<()> {
        let spec = self.spec;
        let lam = spec.total_arrival();
        if u < lam {
            let c = pick((0..spec.num_classes()).map(|i| spec.arrival(i)), u).unwrap_or(0);
            ctx.arrive(c);
            let job = Job { class: c as u8, arrival: ctx.now };
            match self.idle.iter().position(|&s| spec.class_servers(c).contains(s as usize)) {
                Some(k) => {
                    let s = self.idle.remove(k) as usize;
                    self.in_service[s] = Some(job);
                    ctx.start(job, s);
                }
                None => self.waiting.push(job),
            }
            return Ok(());
        }
        u -= lam;
        let weights = (0..spec.num_servers()).map(|s| if self.in_service[s].is_some() { spec.service(s) } else { 0.0 });
        let b = pick(weights, u).ok_or_else(|| Error::InvalidState("no busy server to complete".into()))?;
        let done = self.in_service[b].take().expect("picked server is busy");
        ctx.depart(done, Some(b), "completion");
        match self.waiting.iter().position(|j| spec.class_servers(j.class as usize).contains(b)) {
            Some(k) => {
                let job = self.waiting.remove(k);
                self.in_service[b] = Some(job);
                ctx.start(job, b);
            }
            None => self.idle.push(b as u8),
        }
        Ok(())
    }

    fn key(&self) -> DetailedState {
        DetailedState::TwoSided { jobs: classes_of(&self.waiting), servers: self.idle.clone() }
    }

    fn busy(&self) -> Option<BitSet> {
        Some(BitSet::from_indices((0..self.spec.num_servers()).filter(|&s| self.in_service[s].is_some())))
    }

    fn len(&self) -> usize {
        self.waiting.len()
    }
}

/// Jobs in arrival order; a job in service carries its server.
struct Rais<'a> {
    spec: &'a SystemSpec,
    table: &'a ActivationTable,
    tokens: Option<OiRate>,
    entries: Vec<(Job, Option<u8>)>,
    busy: BitSet,
}

impl Rais<'_> {
    fn busy_order(&self) -> Seq {
        self.entries.iter().filter_map(|e| e.1).collect()
    }

    fn service_rates(&self) -> Vec<f64> {
        let order = self.busy_order();
        match &self.tokens {
            Some(r) => r.increments(&order),
            None => order.iter().map(|&s| self.spec.service(s as usize)).collect(),
        }
    }
}

impl Engine for Rais<'_> {
    fn rate(&self) -> f64 {
        self.spec.total_arrival() + self.service_rates().iter().sum::<f64>()
    }

    fn fire(&mut self, mut u: f64, ctx: &mut Ctx<'_, '_>) -> Result<()> {
        let spec = self.spec;
        let lam = spec.total_arrival();
        if u < lam {
            let c = pick((0..spec.num_classes()).map(|i| spec.arrival(i)), u).unwrap_or(0);
            ctx.arrive(c);
            let job = Job { class: c as u8, arrival: ctx.now };
            let idle = spec.class_servers(c).difference(self.busy);
            if idle.is_empty() {
                self.entries.push((job, None));
                return Ok(());
            }
            let candidates: Vec<usize> = idle.iter().collect();
            let v = ctx.uniform();
            let k = pick(candidates.iter().map(|&s| self.table.probability(self.busy, c, s)), v)
                .ok_or_else(|| Error::InvalidState(format!("activation table routes no probability from {:?}", self.busy)))?;
            let s = candidates[k];
            self.entries.push((job, Some(s as u8)));
            self.busy = self.busy.with(s);
            ctx.start(job, s);
            return Ok(());
        }
        u -= lam;
        let k = pick(self.service_rates().into_iter(), u).ok_or_else(|| Error::InvalidState("no busy server to complete".into()))?;
        let j = self.entries.iter().enumerate().filter(|e| e.1 .1.is_some()).nth(k).map(|e| e.0).expect("k-th busy entry");
        let (done, s) = self.entries[j];
        let s = s.expect("busy entry") as usize;
        ctx.depart(done, Some(s), "completion");
        let next = self
            .entries
            .iter()
            .position(|e| e.1.is_none() && spec.class_servers(e.0.class as usize).contains(s));
        if let Some(q) = next {
            self.entries[q].1 = Some(s as u8);
            let job = self.entries[q].0;
            ctx.start(job, s);
        } else {
            self.busy = self.busy.without(s);
        }
        self.entries.remove(j);
        Ok(())
    }

    fn key(&self) -> DetailedState {
        DetailedState::Interleaved(
            self.entries
                .iter()
                .map(|(job, s)| match s {
                    Some(s) => s | BUSY_TAG,
                    None => job.class,
                })
                .collect(),
        )
    }

    fn busy(&self) -> Option<BitSet> {
        Some(self.busy)
    }

    fn len(&self) -> usize {
        self.entries.len()
    }
}

struct ClosedTokens<'a> {
    spec: &'a SystemSpec,
    rate: OiRate,
    busy: Vec<(u8, Job)>,
    idle: Seq,
}

impl Engine for ClosedTokens<'_> {
    fn rate(&self) -> f64 {
        let order: Seq = self.busy.iter().map(|b| b.0).collect();
        self.spec.total_arrival() + self.rate.total(&order)
    }

    fn fire(&mut self, mut u: f64, ctx: &mut Ctx<'_, '_>) -> Result<()> {
        let spec = self.spec;
        let lam = spec.total_arrival();
        if u < lam {
            let c = pick((0..spec.num_classes()).map(|i| spec.arrival(i)), u).unwrap_or(0);
            ctx.arrive(c);
            let job = Job { class: c as u8, arrival: ctx.now };
            match self.idle.iter().position(|&t| spec.class_servers(c).contains(t as usize)) {
                Some(k) => {
                    let t = self.idle.remove(k);
                    self.busy.push((t, job));
                    ctx.start(job, t as usize);
                }
                None => ctx.lose(Some(c), None),
            }
            return Ok(());
        }
        u -= lam;
        let order: Seq = self.busy.iter().map(|b| b.0).collect();
        let k = pick(self.rate.increments(&order).into_iter(), u)
            .ok_or_else(|| Error::InvalidState("no busy token to complete".into()))?;
        let (t, job) = self.busy.remove(k);
        ctx.depart(job, Some(t as usize), "completion");
        self.idle.push(t);
        Ok(())
    }

    fn key(&self) -> DetailedState {
        DetailedState::Tokens { busy: self.busy.iter().map(|b| b.0).collect(), idle: self.idle.clone() }
    }

    fn busy(&self) -> Option<BitSet> {
        Some(BitSet::from_indices(self.busy.iter().map(|b| b.0 as usize)))
    }

    fn len(&self) -> usize {
        0
    }
}

/// Bipartite matching of arriving jobs and arriving servers.
struct Matching<'a> {
    spec: &'a SystemSpec,
    jobs: Vec<Job>,
    servers: Vec<(u8, f64)>,
    buffer: usize,
}

impl Engine for Matching<'_> {
    fn rate(&self) -> f64 {
        let spec = self.spec;
        let g: f64 = self.jobs.iter().map(|j| spec.class_abandonment(j.class as usize)).sum();
        let v: f64 = self.servers.iter().map(|s| spec.server_abandonment(s.0 as usize)).sum();
        spec.total_arrival() + spec.total_service() + g + v
    }

    fn fire(&mut self, mut u: f64, ctx: &mut Ctx<'_, '_>) -> Result<()> {
        let spec = self.spec;
        let lam = spec.total_arrival();
        let mu = spec.total_service();
        if u < lam {
            let c = pick((0..spec.num_classes()).map(|i| spec.arrival(i)), u).unwrap_or(0);
            ctx.arrive(c);
            let job = Job { class: c as u8, arrival: ctx.now };
            match self.servers.iter().position(|s| spec.class_servers(c).contains(s.0 as usize)) {
                Some(k) => {
                    let (s, _) = self.servers.remove(k);
                    ctx.depart(job, Some(s as usize), "match");
                }
                None => self.jobs.push(job),
            }
            return Ok(());
        }
        u -= lam;
        if u < mu {
            let s = pick((0..spec.num_servers()).map(|s| spec.service(s)), u).unwrap_or(0);
            ctx.log("server_arrival", None, Some(s));
            match self.jobs.iter().position(|j| spec.class_servers(j.class as usize).contains(s)) {
                Some(k) => {
                    let job = self.jobs.remove(k);
                    ctx.depart(job, Some(s), "match");
                }
                None if self.servers.len() < self.buffer => self.servers.push((s as u8, ctx.now)),
                None => ctx.lose(None, Some(s)),
            }
            return Ok(());
        }
        u -= mu;
        let g = self.jobs.iter().map(|j| spec.class_abandonment(j.class as usize));
        let v = self.servers.iter().map(|s| spec.server_abandonment(s.0 as usize));
        let k = pick(g.chain(v), u).ok_or_else(|| Error::InvalidState("no waiting entity to abandon".into()))?;
        if k < self.jobs.len() {
            let job = self.jobs.remove(k);
            ctx.abandon(Some(job.class as usize), None);
        } else {
            let (s, _) = self.servers.remove(k - self.jobs.len());
            ctx.abandon(None, Some(s as usize));
        }
        Ok(())
    }

    fn key(&self) -> DetailedState {
        DetailedState::TwoSided { jobs: classes_of(&self.jobs), servers: self.servers.iter().map(|s| s.0).collect() }
    }

    fn busy(&self) -> Option<BitSet> {
        None
    }

    fn len(&self) -> usize {
        self.jobs.len().max(self.servers.len())
    }
}

/// Slotted matching on a general compatibility graph.
struct Agents<'a> {
    spec: &'a SystemSpec,
    waiting: Vec<Job>,
}

impl Engine for Agents<'_> {
    fn rate(&self) -> f64 {
        1.0
    }

    fn fire(&mut self, u: f64, ctx: &mut Ctx<'_, '_>) -> Result<()> {
        let spec = self.spec;
        let mut acc = 0.0;
        let Some(c) = (0..spec.num_classes()).find(|&i| {
            acc += spec.arrival(i);
            u < acc
        }) else {
            return Ok(());
        };
        ctx.arrive(c);
        let job = Job { class: c as u8, arrival: ctx.now };
        match self.waiting.iter().position(|a| spec.links(c).contains(a.class as usize)) {
            Some(k) => {
                let partner = self.waiting.remove(k);
                ctx.depart(partner, None, "match");
                ctx.depart(job, None, "match");
            }
            None => self.waiting.push(job),
        }
        Ok(())
    }

    fn key(&self) -> DetailedState {
        DetailedState::Jobs(classes_of(&self.waiting))
    }

    fn busy(&self) -> Option<BitSet> {
        None
    }

    fn len(&self) -> usize {
        self.waiting.len()
    }
}

/// Slotted matching where each slot brings one job and one server.
struct Paired<'a> {
    spec: &'a SystemSpec,
    jobs: Vec<Job>,
    servers: Seq,
}

impl Engine for Paired<'_> {
    fn rate(&self) -> f64 {
        1.0
    }

    fn fire(&mut self, u: f64, ctx: &mut Ctx<'_, '_>) -> Result<()> {
        let spec = self.spec;
        let c = pick((0..spec.num_classes()).map(|i| spec.arrival(i)), u * spec.total_arrival()).unwrap_or(0);
        let v = ctx.uniform();
        let s = pick((0..spec.num_servers()).map(|i| spec.service(i)), v * spec.total_service()).unwrap_or(0);
        ctx.arrive(c);
        ctx.log("server_arrival", None, Some(s));
        let job = Job { class: c as u8, arrival: ctx.now };
        let for_job = self.servers.iter().position(|&t| spec.class_servers(c).contains(t as usize));
        let for_server = self.jobs.iter().position(|j| spec.class_servers(j.class as usize).contains(s));
        match (for_job, for_server) {
            (Some(j), Some(k)) => {
                let t = self.servers.remove(j);
                ctx.depart(job, Some(t as usize), "match");
                let w = self.jobs.remove(k);
                ctx.depart(w, Some(s), "match");
            }
            (Some(j), None) => {
                let t = self.servers.remove(j);
                ctx.depart(job, Some(t as usize), "match");
                self.servers.push(s as u8);
            }
            (None, Some(k)) => {
                let w = self.jobs.remove(k);
                ctx.depart(w, Some(s), "match");
                self.jobs.push(job);
            }
            (None, None) if spec.class_servers(c).contains(s) => ctx.depart(job, Some(s), "match"),
            (None, None) => {
                self.jobs.push(job);
                self.servers.push(s as u8);
            }
        }
        Ok(())
    }

    fn key(&self) -> DetailedState {
        DetailedState::TwoSided { jobs: classes_of(&self.jobs), servers: self.servers.clone() }
    }

    fn busy(&self) -> Option<BitSet> {
        None
    }

    fn len(&self) -> usize {
        self.jobs.len()
    }
}

fn engine<'a>(spec: &'a SystemSpec, table: Option<&'a ActivationTable>) -> Result<Box<dyn Engine + 'a>> {
    let m = spec.num_servers();
    Ok(match spec.kind() {
        ModelKind::Collaborative => Box::new(Collaborative { spec, queue: Vec::new(), served: 0.0, abandoning: 0.0 }),
        ModelKind::NcAlis => Box::new(Alis { spec, waiting: Vec::new(), idle: (0..m as u8).collect(), in_service: vec![None; m] }),
        ModelKind::NcRais | ModelKind::TokenRais => Box::new(Rais {
            spec,
            table: table.ok_or_else(|| Error::Validation("randomized assignment needs an activation table".into()))?,
            tokens: (spec.kind() == ModelKind::TokenRais).then(|| OiRate::token_service(spec)),
            entries: Vec::new(),
            busy: BitSet::EMPTY,
        }),
        ModelKind::ClosedToken => {
            Box::new(ClosedTokens { spec, rate: OiRate::token_service(spec), busy: Vec::new(), idle: (0..m as u8).collect() })
        }
        ModelKind::Dbm | ModelKind::DbmK(_) | ModelKind::Dbma => Box::new(Matching {
            spec,
            jobs: Vec::new(),
            servers: Vec::new(),
            buffer: spec.kind().server_buffer().unwrap_or(usize::MAX),
        }),
        ModelKind::Gm => Box::new(Agents { spec, waiting: Vec::new() }),
        ModelKind::Pbm => Box::new(Paired { spec, jobs: Vec::new(), servers: Seq::new() }),
    })
}

fn run_replication(
    spec: &SystemSpec,
    table: Option<&ActivationTable>,
    cfg: &SimConfig,
    index: usize,
    log: Option<&mut dyn Write>,
) -> Result<Replication> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let j = spec.num_classes();
    let mut ctx = Ctx {
        spec,
        rng,
        now: 0.0,
        warmup: cfg.warmup,
        flags: cfg.record,
        stride: cfg.sample_stride,
        max_samples: cfg.max_samples,
        response_seen: vec![0; j],
        waiting_seen: vec![0; j],
        rep: Replication { index, response: vec![Vec::new(); j], waiting: vec![Vec::new(); j], ..Replication::default() },
        last_departure: None,
        log,
        log_error: None,
    };
    let mut eng = engine(spec, table)?;
    let slotted = matches!(spec.kind(), ModelKind::Gm | ModelKind::Pbm);
    let mut occupancy: HashMap<DetailedState, f64> = HashMap::new();
    let mut busy_sets: HashMap<BitSet, f64> = HashMap::new();
    loop {
        let rate = eng.rate();
        let dt = if slotted {
            1.0
        } else if rate > 0.0 {
            ctx.rng.sample::<f64, _>(Exp1) / rate
        } else {
            f64::INFINITY
        };
        let next = ctx.now + dt;
        let observed = next.min(cfg.horizon) - ctx.now.max(cfg.warmup);
        if observed > 0.0 {
            if cfg.record.state_occupancy {
                *occupancy.entry(eng.key()).or_insert(0.0) += observed;
            }
            if cfg.record.busy_set_occupancy {
                if let Some(b) = eng.busy() {
                    *busy_sets.entry(b).or_insert(0.0) += observed;
                }
            }
        }
        if next >= cfg.horizon {
            break;
        }
        ctx.now = next;
        let u = ctx.uniform() * rate;
        eng.fire(u, &mut ctx)?;
        ctx.rep.events += 1;
        if eng.len() > cfg.queue_cap {
            ctx.rep.aborted = Some(format!("queue length exceeded {} at time {}", cfg.queue_cap, ctx.now));
            break;
        }
    }
    if let Some(e) = ctx.log_error {
        return Err(Error::Io(e.to_string()));
    }
    let span = cfg.horizon - cfg.warmup;
    let mut rep = ctx.rep;
    rep.occupancy = occupancy.into_iter().map(|(k, v)| (k, v / span)).collect();
    rep.busy_sets = busy_sets.into_iter().map(|(k, v)| (k, v / span)).collect();
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SystemBuilder;

    fn mm1() -> SystemSpec {
        SystemBuilder::new(ModelKind::Collaborative).class("a", 0.5).server("s", 1.0).edge("a", "s").build().unwrap()
    }

    #[test]
    fn mm1_empty_fraction() {
        let est = simulate(&mm1(), None, &SimConfig::new(7, 2e5, 4)).unwrap();
        let occ = est.occupancy();
        let empty = occ[&DetailedState::Jobs(Seq::new())];
        assert!((empty.mean - 0.5).abs() < 3.0 * empty.se + 1e-3, "{empty:?}");
        let total: f64 = est.replications[0].occupancy.values().sum();
        assert!((total - 1.0).abs() < 1e-9);
        let mean = est.mean_response(0);
        assert!((mean.mean - 2.0).abs() < 4.0 * mean.se + 0.02, "{mean:?}");
    }

    #[test]
    fn identical_seeds_reproduce() {
        let cfg = SimConfig { threads: 2, ..SimConfig::new(11, 2e4, 3) };
        let a = simulate(&mm1(), None, &cfg).unwrap();
        let b = simulate(&mm1(), None, &SimConfig { threads: 1, ..cfg }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unstable_queue_aborts() {
        let spec = SystemBuilder::new(ModelKind::Collaborative).class("a", 2.0).server("s", 1.0).edge("a", "s").build().unwrap();
        let cfg = SimConfig { queue_cap: 50, ..SimConfig::new(1, 1e5, 2) };
        assert!(matches!(simulate(&spec, None, &cfg), Err(Error::SimulationAborted(_))));
    }

    #[test]
    fn event_log_lines_parse() {
        let cfg = SimConfig::new(3, 20.0, 1);
        let mut buf = Vec::new();
        simulate_logged(&mm1(), None, &cfg, 0, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().count() > 0);
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["t"].is_number() && v["event"].is_string());
        }
    }
}
