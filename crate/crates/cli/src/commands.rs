//! The analysis commands.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;

use serde_json::json;
use skillq::aggregate::{pi_empty_recursive, mean_counts, PhiTable, Scalar};
use skillq::assignment::{build_activation, verify_assignment_condition, ActivationTable, TableExport};
use skillq::detailed::{DetailedState, Normalization, ProductForm};
use skillq::dist::ResponseDist;
use skillq::dynamics::{balance_sweep, Dynamics};
use skillq::nested::{nested_decompose, response_time, BusyWeights, Provenance, ResponseModel};
use skillq::sim::compare::tv_distance;
use skillq::sim::{generator_solve, simulate, simulate_logged, SimConfig, SolveConfig, Stat};
use skillq::{BigRational, BitSet, Error, ModelKind, SystemSpec};

use crate::config::{BusySource, ConfigDocument, ResponseKind};
use crate::records::{Report, Tag};
use crate::CliError;

/// Largest class count for which `check` lists every subset margin.
pub const MARGIN_LIST_CAP: usize = 12;

/// Largest job count used by the balance checks of `validate`.
const SWEEP_CAP: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    /// Stability margins and nestedness.
    Check,
    /// Stationary probabilities of detailed states and count vectors.
    Analyze,
    /// Build, verify and export an activation table.
    Activation,
    /// Response-time distributions of nested systems.
    Nested,
    /// Empty-system probability, idle probabilities and mean counts.
    Means,
    Simulate,
    /// Compare every applicable analytic result with its independent oracle.
    Validate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Check => "check",
            Command::Analyze => "analyze",
            Command::Activation => "activation",
            Command::Nested => "nested",
            Command::Means => "means",
            Command::Simulate => "simulate",
            Command::Validate => "validate",
        }
    }
}

pub struct Context<'a> {
    pub doc: &'a ConfigDocument,
    pub spec: SystemSpec,
    pub sim: SimConfig,
}

pub fn run(command: Command, ctx: &Context, rep: &mut Report) -> Result<(), CliError> {
    match command {
        Command::Check => check(ctx, rep),
        Command::Analyze => analyze(ctx, rep),
        Command::Activation => activation(ctx, rep),
        Command::Nested => nested(ctx, rep),
        Command::Means => means(ctx, rep),
        Command::Simulate => run_simulation(ctx, rep),
        Command::Validate => validate(ctx, rep),
    }
}

fn set_label(ids: Vec<String>) -> String {
    format!("{{{}}}", ids.join(","))
}

/// Kinds whose per-class count distribution is that of the collaborative system.
fn shares_collaborative_law(kind: ModelKind) -> bool {
    matches!(kind, ModelKind::Collaborative | ModelKind::NcAlis | ModelKind::NcRais | ModelKind::Dbm)
}

fn is_rais(kind: ModelKind) -> bool {
    matches!(kind, ModelKind::NcRais | ModelKind::TokenRais)
}

/// Requires stability where the kind has a stability condition.
fn require_stable(spec: &SystemSpec) -> Result<(), CliError> {
    match spec.require_stable() {
        Ok(_) | Err(Error::Unsupported(_)) => Ok(()),
        Err(e) => Err(e.into()),
    }
}

fn activation_table(ctx: &Context, spec: &SystemSpec) -> Result<ActivationTable, CliError> {
    match &ctx.doc.analysis.table {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let data: TableExport = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("activation table {}: {e}", path.display())))?;
            Ok(ActivationTable::import(spec, &data)?)
        }
        None => Ok(build_activation(spec)?),
    }
}

fn table_for(ctx: &Context) -> Result<Option<ActivationTable>, CliError> {
    if is_rais(ctx.spec.kind()) {
        activation_table(ctx, &ctx.spec).map(Some)
    } else {
        Ok(None)
    }
}

fn product_form<'a>(spec: &'a SystemSpec, table: Option<&'a ActivationTable>) -> Result<ProductForm<'a>, CliError> {
    Ok(match table {
        Some(t) => ProductForm::with_table(spec, t)?,
        None => ProductForm::new(spec)?,
    })
}

fn norm_tag(norm: &Normalization) -> Tag {
    if norm.exact {
        Tag::Exact
    } else {
        Tag::Truncated(norm.tail_bound)
    }
}

fn check(ctx: &Context, rep: &mut Report) -> Result<(), CliError> {
    let spec = &ctx.spec;
    let mut unstable = None;
    match spec.check_stability() {
        Err(Error::Unsupported(msg)) => rep.push("stability", json!({ "applicable": false, "message": msg }), Tag::Exact),
        Err(e) => return Err(e.into()),
        Ok(report) => {
            if spec.num_classes() <= MARGIN_LIST_CAP {
                list_margins(spec, rep)?;
            }
            let worst = set_label(spec.class_labels(report.worst));
            rep.push(
                "stability",
                json!({ "stable": report.stable, "worst": worst, "margin": report.margin, "max_load": report.max_load }),
                Tag::Exact,
            );
            if !report.stable {
                unstable = Some(Error::Unstable { witness: spec.class_labels(report.worst), margin: report.margin });
            }
        }
    }
    match nested_decompose(spec) {
        Ok(tree) => rep.push("nested", json!({ "nested": true, "nodes": tree.nodes().len() }), Tag::Exact),
        Err(e @ Error::NotNested { .. }) => {
            rep.push("nested", json!({ "nested": false, "message": e.to_string() }), Tag::Exact)
        }
        Err(Error::Unsupported(msg)) => rep.push("nested", json!({ "applicable": false, "message": msg }), Tag::Exact),
        Err(Error::Unstable { .. }) => {}
        Err(e) => return Err(e.into()),
    }
    match unstable {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn list_margins(spec: &SystemSpec, rep: &mut Report) -> Result<(), CliError> {
    let all = spec.all_classes();
    let (lam, mu) = (spec.total_arrival(), spec.total_service());
    for a in all.subsets().skip(1) {
        let (arrival, capacity) = match spec.kind() {
            ModelKind::Gm => {
                let others = spec.linked_to(a);
                if !others.is_disjoint(a) {
                    continue;
                }
                (spec.arrival_rate(a), spec.arrival_rate(others))
            }
            ModelKind::Pbm => {
                if a == all {
                    continue;
                }
                let r = spec.subset_rates(a)?;
                (r.arrival / lam, r.service / mu)
            }
            _ => {
                let r = spec.subset_rates(a)?;
                (r.arrival, r.service)
            }
        };
        rep.push(
            format!("margin{}", set_label(spec.class_labels(a))),
            json!({ "arrival": arrival, "capacity": capacity, "margin": capacity - arrival }),
            Tag::Exact,
        );
    }
    Ok(())
}

fn analyze(ctx: &Context, rep: &mut Report) -> Result<(), CliError> {
    let spec = &ctx.spec;
    let a = &ctx.doc.analysis;
    require_stable(spec)?;
    let table = table_for(ctx)?;
    let pf = product_form(spec, table.as_ref())?;
    let norm = pf.normalization(a.normalization_tolerance)?;
    let tag = norm_tag(&norm);
    rep.push("normalization", norm.constant, tag);
    if spec.kind() != ModelKind::ClosedToken {
        rep.push("pi_empty", 1.0 / norm.constant, tag);
    }
    for text in &a.states {
        let state = DetailedState::parse(spec, text)?;
        let p = pf.probability(&state, &norm)?;
        rep.push(format!("pi{}", state.label(spec)), p, tag);
    }
    if !a.counts.is_empty() {
        if !shares_collaborative_law(spec.kind()) {
            return Err(Error::Unsupported(format!(
                "count vector probabilities are available for the collaborative, nc_alis, nc_rais and dbm kinds, not {}",
                spec.kind()
            ))
            .into());
        }
        let collab = spec.with_kind(ModelKind::Collaborative)?;
        let cnorm = ProductForm::new(&collab)?.normalization(a.normalization_tolerance)?;
        let bound = a.counts.iter().map(|x| x.iter().sum::<u32>() as usize).max().unwrap_or(0);
        let phi = PhiTable::for_spec(&collab, bound)?;
        for x in &a.counts {
            if x.len() != spec.num_classes() {
                return Err(Error::Validation(format!(
                    "count vector {x:?} has {} entries for {} classes",
                    x.len(),
                    spec.num_classes()
                ))
                .into());
            }
            let w = phi.weight(x).ok_or_else(|| Error::InvalidState(format!("count vector {x:?} is outside the table")))?;
            let label = x.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
            rep.push(format!("pi_counts({label})"), w / cnorm.constant, norm_tag(&cnorm));
        }
    }
    Ok(())
}

fn activation(ctx: &Context, rep: &mut Report) -> Result<(), CliError> {
    let spec = if is_rais(ctx.spec.kind()) { ctx.spec.clone() } else { ctx.spec.with_kind(ModelKind::NcRais)? };
    let table = activation_table(ctx, &spec)?;
    let export = table.export(&spec);
    rep.push("table.rule", table.rule(), Tag::Input);
    let report = verify_assignment_condition(&spec, &table, ctx.doc.analysis.tolerance)?;
    rep.push("assignment.max_order_spread", report.max_order_spread, Tag::Exact);
    rep.push("assignment.max_cycle_residual", report.max_cycle_residual, Tag::Exact);
    rep.push("assignment.max_routing_mismatch", report.max_routing_mismatch, Tag::Exact);
    rep.push("assignment.max_total_mismatch", report.max_total_mismatch, Tag::Exact);
    if let Some(path) = &ctx.doc.analysis.export {
        let file = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(file, &export).map_err(|e| CliError::Io(e.into()))?;
    }
    rep.push("table", &export, Tag::Exact);
    Ok(())
}

/// Busy-set distribution seen by arrivals, with its tag and provenance.
type BusySets = (Vec<(BitSet, f64)>, Tag, Provenance);

fn busy_weights(ctx: &Context) -> Result<BusySets, CliError> {
    let nc = ctx.spec.with_kind(ModelKind::NcAlis)?;
    match ctx.doc.analysis.busy_weights {
        BusySource::Exact => {
            let bound = ctx.doc.analysis.truncation;
            let sol = generator_solve(&nc, None, bound, &SolveConfig::default())?;
            let edge: f64 = sol.iter().filter(|(s, _)| s.size() == bound).map(|(_, p)| p).sum();
            Ok((sol.busy_set_distribution(&nc)?, Tag::Truncated(edge), Provenance::Exact))
        }
        BusySource::Simulated => {
            let mut cfg = ctx.sim.clone();
            cfg.record.busy_set_occupancy = true;
            let est = simulate(&nc, None, &cfg)?;
            let occ = est.busy_set_occupancy();
            let se = occ.values().map(|s| s.se).fold(0.0, f64::max);
            Ok((occ.into_iter().map(|(b, s)| (b, s.mean)).collect(), Tag::Simulated(se), Provenance::Simulated))
        }
    }
}

fn nested(ctx: &Context, rep: &mut Report) -> Result<(), CliError> {
    let spec = &ctx.spec;
    let a = &ctx.doc.analysis;
    let tree = nested_decompose(spec)?;
    for node in tree.nodes() {
        rep.push(
            format!("node{}", set_label(spec.server_labels(node.servers))),
            json!({
                "classes": spec.class_labels(node.classes),
                "parent": node.parent.map(|p| spec.server_labels(tree.nodes()[p].servers)),
                "arrival": node.arrival,
                "mu_hat": node.mu_hat,
                "rho": node.rho,
            }),
            Tag::Exact,
        );
    }
    rep.push("pi_empty", tree.pi_empty(), Tag::Exact);
    let mut tag = Tag::Exact;
    let busy = match a.response {
        ResponseKind::NcEqualRates => {
            let (b, t, prov) = busy_weights(ctx)?;
            tag = t;
            Some((b, prov))
        }
        _ => None,
    };
    for class in 0..spec.num_classes() {
        let model = match a.response {
            ResponseKind::Collaborative => ResponseModel::Collaborative,
            ResponseKind::NcAllBusy => ResponseModel::NcAllBusy,
            ResponseKind::NcGivenBusy => {
                let ids: Vec<&str> = a.busy.iter().map(String::as_str).collect();
                ResponseModel::NcGivenBusy(spec.server_set(&ids)?)
            }
            ResponseKind::NcEqualRates => {
                let (b, prov) = busy.as_ref().expect("weights computed above");
                ResponseModel::NcEqualRates(Some(BusyWeights::from_busy_sets(&tree, class, b, *prov)))
            }
        };
        let dist = response_time(spec, &tree, class, &model)?;
        push_distribution(rep, &format!("response[{}]", spec.classes()[class].id), &dist, tag, ctx)?;
    }
    Ok(())
}

fn push_distribution(rep: &mut Report, name: &str, dist: &ResponseDist, tag: Tag, ctx: &Context) -> Result<(), CliError> {
    rep.push(name.to_string(), dist, tag);
    rep.push(format!("{name}.mean"), dist.mean(), tag);
    rep.push(format!("{name}.variance"), dist.variance(), tag);
    rep.push(format!("{name}.atom_at_zero"), dist.atom_at_zero(), tag);
    for &q in &ctx.doc.analysis.quantiles {
        rep.push(format!("{name}.quantile({q})"), dist.quantile(q)?, tag);
    }
    for &t in &ctx.doc.analysis.points {
        rep.push(format!("{name}.survival({t})"), dist.survival(t), tag);
    }
    Ok(())
}

fn means(ctx: &Context, rep: &mut Report) -> Result<(), CliError> {
    let spec = &ctx.spec;
    let exact = pi_empty_recursive::<BigRational>(spec)?;
    let counts = mean_counts::<BigRational>(spec)?;
    let mut push = |name: String, v: &BigRational| {
        rep.push(name.clone(), v.to_f64(), Tag::Exact);
        rep.push(format!("{name}.rational"), v.to_string(), Tag::Exact);
    };
    push("pi_empty".into(), &exact.pi_empty);
    for (k, p) in exact.psi.iter().enumerate() {
        push(format!("psi[{}]", spec.servers()[k].id), p);
    }
    push("L".into(), &counts.total);
    for (i, l) in counts.per_class.iter().enumerate() {
        push(format!("L[{}]", spec.classes()[i].id), l);
    }
    Ok(())
}

fn run_simulation(ctx: &Context, rep: &mut Report) -> Result<(), CliError> {
    let spec = &ctx.spec;
    let cfg = &ctx.sim;
    require_stable(spec)?;
    let table = table_for(ctx)?;
    if let Some(path) = &ctx.doc.simulation.event_log {
        let mut log = BufWriter::new(File::create(path)?);
        simulate_logged(spec, table.as_ref(), cfg, 0, &mut log)?;
    }
    let est = simulate(spec, table.as_ref(), cfg)?;
    rep.push(
        "replications",
        json!({ "requested": cfg.replications, "completed": est.completed().count(), "aborted": est.aborted() }),
        Tag::Input,
    );
    let completed: Vec<_> = est.completed().collect();
    let per_time = |f: &dyn Fn(&skillq::sim::Replication) -> u64| {
        Stat::of(&completed.iter().map(|r| f(r) as f64 / cfg.horizon).collect::<Vec<_>>())
    };
    let lost = per_time(&|r| r.lost);
    rep.push("loss_rate", lost.mean, Tag::Simulated(lost.se));
    let abandoned = per_time(&|r| r.abandoned);
    rep.push("abandonment_rate", abandoned.mean, Tag::Simulated(abandoned.se));
    if cfg.record.response_samples {
        for (i, c) in spec.classes().iter().enumerate() {
            let s = est.mean_response(i);
            rep.push(format!("mean_response[{}]", c.id), s.mean, Tag::Simulated(s.se));
        }
    }
    if cfg.record.busy_set_occupancy {
        for (b, s) in est.busy_set_occupancy() {
            rep.push(format!("busy{}", set_label(spec.server_labels(b))), s.mean, Tag::Simulated(s.se));
        }
    }
    if cfg.record.state_occupancy {
        let occ = est.occupancy();
        let mut ranked: Vec<(&DetailedState, &Stat)> = occ.iter().collect();
        ranked.sort_by(|x, y| y.1.mean.total_cmp(&x.1.mean).then_with(|| x.0.cmp(y.0)));
        ranked.truncate(ctx.doc.analysis.max_states);
        ranked.sort_by(|x, y| x.0.cmp(y.0));
        for (state, s) in ranked {
            rep.push(format!("occupancy{}", state.label(spec)), s.mean, Tag::Simulated(s.se));
        }
    }
    Ok(())
}

struct Checks<'r> {
    rep: &'r mut Report,
    failed: Vec<String>,
}

impl Checks<'_> {
    fn record(&mut self, name: &str, value: f64, tolerance: f64, tag: Tag) {
        let pass = value <= tolerance;
        if !pass {
            self.failed.push(name.to_string());
        }
        self.rep.push(format!("check.{name}"), json!({ "value": value, "tolerance": tolerance, "pass": pass }), tag);
    }

    fn skip(&mut self, name: &str, e: &Error) {
        self.rep.push(
            format!("check.{name}"),
            json!({ "skipped": true, "reason": e.reason(), "message": e.to_string() }),
            Tag::Input,
        );
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn validate(ctx: &Context, rep: &mut Report) -> Result<(), CliError> {
    let spec = &ctx.spec;
    let a = &ctx.doc.analysis;
    require_stable(spec)?;
    let mut checks = Checks { rep, failed: Vec::new() };
    let table = if is_rais(spec.kind()) {
        let t = activation_table(ctx, spec)?;
        match verify_assignment_condition(spec, &t, a.tolerance) {
            Ok(r) => checks.record("assignment_condition", r.max_order_spread.max(r.max_cycle_residual), a.tolerance, Tag::Exact),
            Err(e @ (Error::AssignmentViolation { .. } | Error::Tolerance { .. })) => {
                checks.failed.push("assignment_condition".into());
                checks.rep.push("check.assignment_condition", json!({ "pass": false, "message": e.to_string() }), Tag::Exact);
            }
            Err(e) => return Err(e.into()),
        }
        Some(t)
    } else {
        None
    };

    let pf = product_form(spec, table.as_ref())?;
    match generator_solve(spec, table.as_ref(), a.truncation, &SolveConfig::default()) {
        Ok(sol) => {
            let weights = sol.states.iter().map(|s| pf.weight(s)).collect::<skillq::Result<Vec<f64>>>()?;
            let z: f64 = weights.iter().sum();
            let worst = sol.probabilities.iter().zip(&weights).map(|(p, w)| rel(*p, w / z)).fold(0.0, f64::max);
            checks.record("generator_agreement", worst, a.generator_tolerance, Tag::Exact);
            checks.record("generator_residual", sol.residual, a.tolerance, Tag::Exact);
        }
        Err(e @ Error::SizeCap { .. }) => checks.skip("generator_agreement", &e),
        Err(e) => return Err(e.into()),
    }

    let dynamics = Dynamics::new(product_form(spec, table.as_ref())?);
    let sweep = balance_sweep(&dynamics, a.truncation.min(SWEEP_CAP))?;
    if spec.kind() == ModelKind::Pbm {
        checks.record("global_balance", sweep.max_global_residual, a.tolerance, Tag::Exact);
    } else {
        checks.record("partial_balance", sweep.max_family_residual, a.tolerance, Tag::Exact);
    }

    if spec.kind() == ModelKind::Collaborative {
        let phi = PhiTable::for_spec(spec, a.truncation.min(SWEEP_CAP))?;
        let worst = count_vectors(spec.num_classes(), a.truncation.min(SWEEP_CAP) as u32)
            .iter()
            .filter_map(|x| phi.balance_residual(x))
            .fold(0.0, f64::max);
        checks.record("balanced_fairness", worst, a.tolerance, Tag::Exact);
    }

    let nested = nested_decompose(spec).ok();
    let recursion = if shares_collaborative_law(spec.kind()) { pi_empty_recursive::<f64>(spec).ok() } else { None };
    if let Some(r) = &recursion {
        let collab = spec.with_kind(ModelKind::Collaborative)?;
        let norm = ProductForm::new(&collab)?.normalization(a.normalization_tolerance)?;
        checks.record("pi_empty_recursion", rel(r.pi_empty, 1.0 / norm.constant), a.tolerance.max(norm.tail_bound), norm_tag(&norm));
        if let Some(tree) = &nested {
            checks.record("pi_empty_nested", rel(tree.pi_empty(), r.pi_empty), a.tolerance, Tag::Exact);
        }
        let gap: f64 = spec.total_service() - spec.total_arrival();
        let psi: f64 = r.psi.iter().enumerate().map(|(k, p)| spec.service(k) * p).sum();
        checks.record("idle_identity", rel(psi, gap), a.tolerance, Tag::Exact);
        if let (Some(tree), Ok(l)) = (&nested, mean_counts::<f64>(spec)) {
            let mut worst: f64 = 0.0;
            for (i, li) in l.per_class.iter().enumerate() {
                let d = response_time(spec, tree, i, &ResponseModel::Collaborative)?;
                worst = worst.max(rel(spec.arrival(i) * d.mean(), *li));
            }
            checks.record("littles_law", worst, a.tolerance, Tag::Exact);
        }
    }

    if a.simulation_check {
        let est = simulate(spec, table.as_ref(), &ctx.sim)?;
        let occ = est.pooled_occupancy();
        let norm = pf.normalization(a.normalization_tolerance)?;
        let exact: BTreeMap<DetailedState, f64> =
            occ.keys().map(|s| pf.probability(s, &norm).map(|p| (s.clone(), p))).collect::<skillq::Result<_>>()?;
        let tv = tv_distance(&occ, &exact)?;
        let per: Vec<f64> = est
            .completed()
            .map(|r| tv_distance(&r.occupancy, &exact))
            .collect::<skillq::Result<Vec<_>>>()?;
        let se = Stat::of(&per).se;
        checks.record("simulation_tv", tv, a.tv_tolerance, Tag::Simulated(se));
    }

    if checks.failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::ValidationFailed(checks.failed))
    }
}

fn count_vectors(classes: usize, max_total: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0; classes]];
    let mut frontier = out.clone();
    for _ in 0..max_total {
        let mut next = Vec::new();
        for x in &frontier {
            let last = x.iter().rposition(|&v| v > 0).unwrap_or(0);
            for i in last..classes {
                let mut y = x.clone();
                y[i] += 1;
                next.push(y);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_vectors_are_unique() {
        let v = count_vectors(3, 3);
        let mut sorted = v.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), v.len());
        // Number of vectors in 3 classes with total at most 3 is C(6,3).
        assert_eq!(v.len(), 20);
    }
}
