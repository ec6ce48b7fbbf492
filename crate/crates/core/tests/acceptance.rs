//! Acceptance criteria. Each test prints one PASS or FAIL line.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::time::Instant;

use skillq::BigRational;
use skillq::aggregate::{
    alis_rais_compare, mean_counts, phi_table, pi_empty_recursive, PartialForm, PartialState, PartialVariant, PhiTable,
};
use skillq::assignment::{build_activation, verify_assignment_condition, ActivationTable};
use skillq::detailed::{DetailedState, ProductForm, BUSY_TAG};
use skillq::dynamics::{balance_sweep, Dynamics};
use skillq::model::{BitSet, ModelKind, SystemSpec};
use skillq::nested::{nested_decompose, response_time, ResponseModel};
use skillq::sim::compare::{ks_test, tv_distance};
use skillq::sim::{generator_solve, simulate, SimConfig, SimEstimate, SolveConfig};

use common::*;

fn report(criterion: &str, pass: bool, detail: &str) {
    let line = format!("criterion {criterion}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    // Written past the test harness capture so the verdict always shows.
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "{}", line.trim_end());
}

fn product_form<'a>(spec: &'a SystemSpec, table: Option<&'a ActivationTable>) -> ProductForm<'a> {
    match table {
        Some(t) => ProductForm::with_table(spec, t).unwrap(),
        None => ProductForm::new(spec).unwrap(),
    }
}

#[test]
fn criterion_1_generator_oracle() {
    let start = Instant::now();
    let cfg = SolveConfig::default();
    let mut worst_rel: f64 = 0.0;
    let mut worst_residual: f64 = 0.0;
    let mut details = Vec::new();
    let mut check = |name: &str, spec: &SystemSpec, table: Option<&ActivationTable>, bound: usize| {
        let sol = generator_solve(spec, table, bound, &cfg).unwrap();
        let pf = product_form(spec, table);
        let weights: Vec<f64> = sol.states.iter().map(|s| pf.weight(s).unwrap()).collect();
        let z: f64 = weights.iter().sum();
        let rel = sol
            .probabilities
            .iter()
            .zip(&weights)
            .map(|(p, w)| ((p - w / z) / (w / z)).abs())
            .fold(0.0, f64::max);
        worst_rel = worst_rel.max(rel);
        worst_residual = worst_residual.max(sol.residual);
        details.push(format!("{name}:{}states", sol.states.len()));
    };
    for fx in core_fixtures() {
        check(fx.name, &fx.build(ModelKind::Collaborative), None, 10);
    }
    let w_alis = w_model().build(ModelKind::NcAlis);
    check("w-alis", &w_alis, None, 10);
    let n_rais = n_model().build(ModelKind::NcRais);
    let table = build_activation(&n_rais).unwrap();
    check("n-rais", &n_rais, Some(&table), 8);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_rel <= 1e-9 && worst_residual <= 1e-12 && secs <= 60.0;
    report(
        "1",
        pass,
        &format!("max relative error {worst_rel:.3e}, max residual {worst_residual:.3e}, {secs:.1}s [{}]", details.join(" ")),
    );
}

#[test]
fn criterion_2_partial_balance() {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut failures = Vec::new();
    let mut check = |label: String, spec: &SystemSpec, table: Option<&ActivationTable>| {
        let dynamics = Dynamics::new(product_form(spec, table));
        let s = balance_sweep(&dynamics, 6).unwrap();
        count += s.states;
        worst = worst.max(s.max_family_residual);
        if s.max_family_residual > 1e-12 {
            failures.push(format!("{label}:{:.2e}", s.max_family_residual));
        }
    };
    for fx in core_fixtures() {
        for kind in [ModelKind::Collaborative, ModelKind::NcAlis, ModelKind::NcRais, ModelKind::DbmK(1)] {
            let spec = fx.build(kind);
            let table = (kind == ModelKind::NcRais).then(|| build_activation(&spec).unwrap());
            check(format!("{}-{kind}", fx.name), &spec, table.as_ref());
        }
        check(format!("{}-dbma", fx.name), &fx.with_abandonment(0.3, 0.5), None);
    }
    check("gm-triangle".into(), &gm_triangle(), None);
    check("gm-kite".into(), &gm_kite(), None);
    report(
        "2",
        failures.is_empty(),
        &format!("max family residual {worst:.3e} over {count} states {}", failures.join(" ")),
    );
}

#[test]
fn criterion_3_assignment_condition() {
    let n = n_model().build(ModelKind::NcRais);
    let table = build_activation(&n).unwrap();
    let p = table.probability(BitSet::EMPTY, 1, 0);
    let target = 1.0 / (1.0 + 2.0 * 1.0);
    let mut pass = (p - target).abs() <= 1e-12;
    let mut worst: f64 = 0.0;
    for fx in core_fixtures() {
        let spec = fx.build(ModelKind::NcRais);
        let t = build_activation(&spec).unwrap();
        match verify_assignment_condition(&spec, &t, 1e-10) {
            Ok(r) => {
                worst = worst
                    .max(r.max_order_spread)
                    .max(r.max_cycle_residual)
                    .max(r.max_routing_mismatch)
                    .max(r.max_total_mismatch);
            }
            Err(_) => pass = false,
        }
    }
    pass &= worst <= 1e-10;
    report("3", pass, &format!("p(2->1 | none busy) = {p:.15}, worst verification residual {worst:.3e}"));
}

/// Per-class counts of a sequence of classes.
fn counts(seq: &[u8], classes: usize) -> Vec<u32> {
    let mut x = vec![0; classes];
    for &c in seq {
        x[c as usize] += 1;
    }
    x
}

#[test]
fn criterion_4_aggregation() {
    let mut worst: f64 = 0.0;
    for fx in core_fixtures() {
        let spec = fx.build(ModelKind::Collaborative);
        let pf = ProductForm::new(&spec).unwrap();
        let norm = pf.normalization(1e-13).unwrap();
        let (table, pi0) = phi_table(&spec, 6).unwrap();
        let mut sums: HashMap<Vec<u32>, f64> = HashMap::new();
        let mut partial: HashMap<(Vec<usize>, Vec<u32>), f64> = HashMap::new();
        for s in pf.enumerate(6) {
            let DetailedState::Jobs(seq) = &s else { unreachable!() };
            let p = pf.probability(&s, &norm).unwrap();
            *sums.entry(counts(seq, spec.num_classes())).or_insert(0.0) += p;
            let (mut lead, mut gaps, mut covered) = (Vec::new(), Vec::new(), BitSet::EMPTY);
            for &c in seq.iter() {
                let servers = spec.class_servers(c as usize);
                if servers.is_subset(covered) {
                    *gaps.last_mut().unwrap() += 1;
                } else {
                    lead.push(c as usize);
                    gaps.push(0);
                    covered = covered.union(servers);
                }
            }
            *partial.entry((lead, gaps)).or_insert(0.0) += p;
        }
        for (x, p) in &sums {
            let q = pi0 * table.weight(x).unwrap();
            worst = worst.max((p - q).abs() / q);
        }
        let collab = PartialForm::new(&spec, PartialVariant::Collaborative, None).unwrap();
        for ((lead, gaps), p) in &partial {
            let q = collab.probability(&PartialState::new(lead.clone(), gaps.clone())).unwrap();
            worst = worst.max((p - q).abs() / q);
        }

        let rais = fx.build(ModelKind::NcRais);
        let t = build_activation(&rais).unwrap();
        let pf = ProductForm::with_table(&rais, &t).unwrap();
        let norm = pf.normalization(1e-13).unwrap();
        let mut partial: HashMap<(Vec<usize>, Vec<u32>), f64> = HashMap::new();
        for s in pf.enumerate(6) {
            let DetailedState::Interleaved(z) = &s else { unreachable!() };
            let (mut busy, mut gaps) = (Vec::new(), Vec::new());
            for &e in z.iter() {
                if e & BUSY_TAG != 0 {
                    busy.push((e & !BUSY_TAG) as usize);
                    gaps.push(0);
                } else {
                    *gaps.last_mut().unwrap() += 1;
                }
            }
            *partial.entry((busy, gaps)).or_insert(0.0) += pf.probability(&s, &norm).unwrap();
        }
        let form = PartialForm::new(&rais, PartialVariant::Rais, Some(&t)).unwrap();
        for ((busy, gaps), p) in &partial {
            let q = form.probability(&PartialState::new(busy.clone(), gaps.clone())).unwrap();
            worst = worst.max((p - q).abs() / q);
        }
    }
    let w = w_model().build(ModelKind::Collaborative);
    let (table, pi0) = phi_table(&w, 4).unwrap();
    let spot = pi0 * table.weight(&[1, 0, 1]).unwrap();
    let pass = worst <= 1e-10 && (spot - 0.0354375).abs() <= 1e-12;
    report("4", pass, &format!("max relative aggregation gap {worst:.3e}, pi_X((1,0,1)) = {spot:.15}"));
}

#[test]
fn criterion_5_empty_probability() {
    let mut worst: f64 = 0.0;
    for fx in core_fixtures().into_iter().chain([tree5()]) {
        let spec = fx.build(ModelKind::Collaborative);
        let norm = ProductForm::new(&spec).unwrap().normalization(1e-13).unwrap();
        let a = 1.0 / norm.constant;
        let b = pi_empty_recursive::<f64>(&spec).unwrap().pi_empty;
        worst = worst.max((a - b).abs());
        if fx.nested {
            let c = nested_decompose(&spec).unwrap().pi_empty();
            worst = worst.max((a - c).abs()).max((b - c).abs());
        }
    }
    let w = w_model().build(ModelKind::Collaborative);
    let exact = pi_empty_recursive::<BigRational>(&w).unwrap().pi_empty;
    let target = BigRational::new(63.into(), 200.into());
    let pass = worst <= 1e-9 && exact == target;
    report("5", pass, &format!("max disagreement {worst:.3e}, W model exact value {exact}"));
}

#[test]
fn criterion_6_littles_law() {
    let mut worst: f64 = 0.0;
    for fx in nested_fixtures() {
        let spec = fx.build(ModelKind::Collaborative);
        let tree = nested_decompose(&spec).unwrap();
        let l = mean_counts::<f64>(&spec).unwrap();
        for i in 0..spec.num_classes() {
            let t = response_time(&spec, &tree, i, &ResponseModel::Collaborative).unwrap();
            worst = worst.max((spec.arrival(i) * t.mean() - l.per_class[i]).abs());
        }
    }
    let w = w_model().build(ModelKind::Collaborative);
    let l = mean_counts::<f64>(&w).unwrap();
    let pass = worst <= 1e-9 && (l.per_class[0] - 0.547619).abs() < 5e-7 && (l.per_class[2] - 0.555556).abs() < 5e-7;
    report(
        "6",
        pass,
        &format!("max |lambda T - L| {worst:.3e}, W model L_1 = {:.6}, L_3 = {:.6}", l.per_class[0], l.per_class[2]),
    );
}

/// Exact probabilities of the states in `support`, keyed like the estimate.
fn analytic_on(pf: &ProductForm, support: impl Iterator<Item = DetailedState>) -> BTreeMap<DetailedState, f64> {
    let norm = pf.normalization(1e-13).unwrap();
    support.map(|s| {
        let p = pf.probability(&s, &norm).unwrap();
        (s, p)
    }).collect()
}

/// Distribution of waiting jobs given that no server is idle, per replication.
fn all_busy_queues(est: &SimEstimate) -> Vec<BTreeMap<DetailedState, f64>> {
    est.completed()
        .map(|r| {
            let mut m: BTreeMap<DetailedState, f64> = BTreeMap::new();
            for (s, p) in &r.occupancy {
                if let DetailedState::TwoSided { jobs, servers } = s {
                    if servers.is_empty() {
                        *m.entry(DetailedState::Jobs(jobs.clone())).or_insert(0.0) += p;
                    }
                }
            }
            let total: f64 = m.values().sum();
            m.values_mut().for_each(|p| *p /= total);
            m
        })
        .collect()
}

fn pooled(maps: &[BTreeMap<DetailedState, f64>]) -> BTreeMap<DetailedState, f64> {
    let mut out: BTreeMap<DetailedState, f64> = BTreeMap::new();
    for m in maps {
        for (k, v) in m {
            *out.entry(k.clone()).or_insert(0.0) += v / maps.len() as f64;
        }
    }
    out
}

#[test]
fn criterion_7_simulation() {
    let start = Instant::now();
    let cfg = SimConfig { sample_stride: 500, ..SimConfig::new(20240601, 1e6, 10) };
    let fx = w_model();

    let collab = fx.build(ModelKind::Collaborative);
    let est = simulate(&collab, None, &cfg).unwrap();
    let sim = est.pooled_occupancy();
    let pf = ProductForm::new(&collab).unwrap();
    let tv_collab = tv_distance(&sim, &analytic_on(&pf, sim.keys().cloned())).unwrap();
    let samples = est.response_samples(2);
    let rate = 2.0 - 1.1;
    let ks = ks_test(&samples, |t| 1.0 - (-rate * t).exp()).unwrap();

    let alis = fx.build(ModelKind::NcAlis);
    let est_alis = simulate(&alis, None, &SimConfig { seed: cfg.seed + 1, ..cfg.clone() }).unwrap();
    let sim = est_alis.pooled_occupancy();
    let pf_alis = ProductForm::new(&alis).unwrap();
    let tv_alis = tv_distance(&sim, &analytic_on(&pf_alis, sim.keys().cloned())).unwrap();

    let per_rep = all_busy_queues(&est_alis);
    let pooled_busy = pooled(&per_rep);
    let tv_cond = tv_distance(&pooled_busy, &analytic_on(&pf, pooled_busy.keys().cloned())).unwrap();
    let spread: f64 =
        per_rep.iter().map(|m| tv_distance(m, &pooled_busy).unwrap()).sum::<f64>() / per_rep.len() as f64;
    let envelope = 3.0 * spread / ((per_rep.len() - 1) as f64).sqrt();

    let dbm = fx.build(ModelKind::Dbm);
    let est_dbm = simulate(&dbm, None, &SimConfig { seed: cfg.seed + 2, ..cfg.clone() }).unwrap();
    let mut sim_dbm: BTreeMap<DetailedState, f64> = BTreeMap::new();
    for (s, p) in est_dbm.pooled_occupancy() {
        let DetailedState::TwoSided { jobs, .. } = s else { unreachable!() };
        *sim_dbm.entry(DetailedState::Jobs(jobs)).or_insert(0.0) += p;
    }
    let tv_dbm = tv_distance(&sim_dbm, &analytic_on(&pf, sim_dbm.keys().cloned())).unwrap();

    let secs = start.elapsed().as_secs_f64();
    let checks = [
        ("a", tv_collab <= 0.01 && tv_alis <= 0.01),
        ("b", !ks.rejected(0.01)),
        ("c", tv_cond <= envelope),
        ("d", tv_dbm <= 0.01),
        ("runtime", secs <= 300.0),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        "7",
        failed.is_empty(),
        &format!(
            "(a) tv collaborative {tv_collab:.4} alis {tv_alis:.4}; (b) ks p-value {:.3} on {} samples; \
             (c) tv {tv_cond:.4} envelope {envelope:.4}; (d) tv {tv_dbm:.4}; {secs:.0}s{}",
            ks.p_value,
            ks.samples,
            if failed.is_empty() { String::new() } else { format!("; failed {}", failed.join(",")) }
        ),
    );
}

fn count_vectors(classes: usize, total: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for _ in 0..classes {
        let mut next = Vec::new();
        for x in &out {
            let used: u32 = x.iter().sum();
            for k in 0..=total - used {
                let mut y = x.clone();
                y.push(k);
                next.push(y);
            }
        }
        out = next;
    }
    out
}

#[test]
fn criterion_8_balanced_fairness() {
    let mut worst_sum: f64 = 0.0;
    let mut worst_balance: f64 = 0.0;
    let mut worst_psi: f64 = 0.0;
    for fx in core_fixtures().into_iter().chain([tree5()]) {
        let spec = fx.build(ModelKind::Collaborative);
        let table = PhiTable::for_spec(&spec, 6).unwrap();
        for x in count_vectors(spec.num_classes(), 6) {
            let present = BitSet::from_indices((0..x.len()).filter(|&i| x[i] > 0));
            let mu = spec.service_rate(spec.servers_of(present));
            let phi = table.balanced_rates(&x).unwrap();
            if !present.is_empty() {
                worst_sum = worst_sum.max((phi.iter().sum::<f64>() - mu).abs() / mu);
            }
            worst_balance = worst_balance.max(table.balance_residual(&x).unwrap());
        }
        let psi = pi_empty_recursive::<f64>(&spec).unwrap().psi;
        let lhs: f64 = (0..spec.num_servers()).map(|k| spec.service(k) * psi[k]).sum();
        worst_psi = worst_psi.max((lhs - (spec.total_service() - spec.total_arrival())).abs());
    }
    let pass = worst_sum <= 1e-12 && worst_balance <= 1e-12 && worst_psi <= 1e-12;
    report(
        "8",
        pass,
        &format!("rate sum {worst_sum:.3e}, balance {worst_balance:.3e}, idle identity {worst_psi:.3e}"),
    );
}

fn ordered_subsets(items: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for (k, &x) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(k);
        for mut tail in ordered_subsets(&rest) {
            tail.insert(0, x);
            out.push(tail);
        }
    }
    out
}

#[test]
fn criterion_9_idle_orders() {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for fx in core_fixtures() {
        let alis_spec = fx.build(ModelKind::NcAlis);
        let rais_spec = fx.build(ModelKind::NcRais);
        let table = build_activation(&rais_spec).unwrap();
        let alis = PartialForm::new(&alis_spec, PartialVariant::Alis, None).unwrap();
        let rais = PartialForm::new(&rais_spec, PartialVariant::Rais, Some(&table)).unwrap();
        let servers: Vec<usize> = (0..rais_spec.num_servers()).collect();
        for busy in ordered_subsets(&servers) {
            for total in 0..=4 {
                for gaps in count_vectors(busy.len(), total).into_iter().filter(|g| g.iter().sum::<u32>() == total) {
                    let c = alis_rais_compare(&rais_spec, &alis, &rais, &busy, &gaps).unwrap();
                    if c.alis == 0.0 && c.rais == 0.0 {
                        continue;
                    }
                    checked += 1;
                    worst = worst.max(c.discrepancy);
                }
            }
        }
    }
    report("9", worst <= 1e-10, &format!("max relative discrepancy {worst:.3e} over {checked} states"));
}
