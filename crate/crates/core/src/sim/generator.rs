//! Brute-force stationary solver on a truncated detailed state space.

use std::collections::HashMap;

use crate::assignment::ActivationTable;
use crate::detailed::{DetailedState, ProductForm, BUSY_TAG};
use crate::dynamics::Dynamics;
use crate::error::{Error, Result};
use crate::model::{BitSet, ModelKind, SystemSpec};

/// Default cap on the number of truncated states.
pub const STATE_CAP: usize = 4_000_000;

#[derive(Clone, Debug)]
pub struct SolveConfig {
    pub max_states: usize,
    /// Target for the largest relative change of any probability over one
    /// symmetric sweep.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig { max_states: STATE_CAP, tolerance: 1e-14, max_sweeps: 20_000 }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorSolution {
    pub states: Vec<DetailedState>,
    pub probabilities: Vec<f64>,
    /// Largest absolute entry of the balance residual after normalization.
    pub residual: f64,
    pub sweeps: usize,
    pub bound: usize,
    index: HashMap<DetailedState, usize>,
}

impl GeneratorSolution {
    pub fn probability(&self, state: &DetailedState) -> Option<f64> {
        self.index.get(state).map(|&i| self.probabilities[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DetailedState, f64)> {
        self.states.iter().zip(self.probabilities.iter().copied())
    }

    /// Probability of each set of busy servers, for the kinds where that
    /// set is determined by the detailed state.
    pub fn busy_set_distribution(&self, spec: &SystemSpec) -> Result<Vec<(BitSet, f64)>> {
        let mut acc: HashMap<BitSet, f64> = HashMap::new();
        for (s, p) in self.iter() {
            let busy = busy_servers(spec, s)
                .ok_or_else(|| Error::Unsupported(format!("busy sets are not defined for the {} kind", spec.kind())))?;
            *acc.entry(busy).or_insert(0.0) += p;
        }
        let mut out: Vec<(BitSet, f64)> = acc.into_iter().collect();
        out.sort_by_key(|(b, _)| *b);
        Ok(out)
    }
}

/// Servers busy in `state`, for kinds with noncollaborative service.
pub fn busy_servers(spec: &SystemSpec, state: &DetailedState) -> Option<BitSet> {
    match (spec.kind(), state) {
        (ModelKind::NcAlis, DetailedState::TwoSided { servers, .. }) => {
            Some(spec.all_servers().difference(BitSet::from_indices(servers.iter().map(|&s| s as usize))))
        }
        (ModelKind::NcRais | ModelKind::TokenRais, DetailedState::Interleaved(z)) => Some(BitSet::from_indices(
            z.iter().filter(|&&e| e & BUSY_TAG != 0).map(|&e| (e & !BUSY_TAG) as usize),
        )),
        (ModelKind::ClosedToken, DetailedState::Tokens { busy, .. }) => {
            Some(BitSet::from_indices(busy.iter().map(|&s| s as usize)))
        }
        _ => None,
    }
}

/// Stationary vector of the chain restricted to states of size at most
/// `bound`, with arrivals that would leave the region rejected.
pub fn generator_solve(
    spec: &SystemSpec,
    table: Option<&ActivationTable>,
    bound: usize,
    cfg: &SolveConfig,
) -> Result<GeneratorSolution> {
    let pf = match table {
        Some(t) => ProductForm::with_table(spec, t)?,
        None => ProductForm::new(spec)?,
    };
    let dynamics = Dynamics::truncated(pf, bound);
    let start = match spec.kind() {
        ModelKind::ClosedToken => DetailedState::Tokens {
            busy: Default::default(),
            idle: (0..spec.num_servers() as u8).collect(),
        },
        _ => dynamics.initial(),
    };

    let mut states = vec![start.clone()];
    let mut index = HashMap::from([(start, 0usize)]);
    let mut edges: Vec<(u32, u32, f64)> = Vec::new();
    let mut out_rate: Vec<f64> = Vec::new();
    let mut head = 0;
    while head < states.len() {
        let ts = dynamics.transitions(&states[head])?;
        let mut total = 0.0;
        for t in ts {
            total += t.rate;
            let next = states.len();
            let j = *index.entry(t.target.clone()).or_insert(next);
            if j == next {
                if next >= cfg.max_states {
                    return Err(Error::SizeCap { what: "truncated states".into(), size: next + 1, cap: cfg.max_states });
                }
                states.push(t.target);
            }
            edges.push((head as u32, j as u32, t.rate));
        }
        out_rate.push(total);
        head += 1;
    }

    let n = states.len();
    let mut start_of = vec![0usize; n + 1];
    for &(_, j, _) in &edges {
        start_of[j as usize + 1] += 1;
    }
    for i in 0..n {
        start_of[i + 1] += start_of[i];
    }
    let mut fill = start_of.clone();
    let mut in_src = vec![0u32; edges.len()];
    let mut in_rate = vec![0f64; edges.len()];
    for &(i, j, r) in &edges {
        let k = fill[j as usize];
        in_src[k] = i;
        in_rate[k] = r;
        fill[j as usize] += 1;
    }
    drop(edges);

    let mut pi = vec![1.0 / n as f64; n];
    let update = |pi: &mut Vec<f64>, i: usize| -> f64 {
        if out_rate[i] == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for k in start_of[i]..start_of[i + 1] {
            acc += pi[in_src[k] as usize] * in_rate[k];
        }
        let new = acc / out_rate[i];
        let change = if pi[i] > 0.0 { ((new - pi[i]) / pi[i]).abs() } else { f64::INFINITY };
        pi[i] = new;
        change
    };
    let mut sweeps = 0;
    loop {
        let mut change: f64 = 0.0;
        for i in 0..n {
            change = change.max(update(&mut pi, i));
        }
        for i in (0..n).rev() {
            change = change.max(update(&mut pi, i));
        }
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= total);
        sweeps += 1;
        if change <= cfg.tolerance {
            break;
        }
        if sweeps >= cfg.max_sweeps {
            return Err(Error::Tolerance { what: "generator sweep change".into(), value: change, tolerance: cfg.tolerance });
        }
    }

    let mut residual: f64 = 0.0;
    for i in 0..n {
        let mut acc = 0.0;
        for k in start_of[i]..start_of[i + 1] {
            acc += pi[in_src[k] as usize] * in_rate[k];
        }
        residual = residual.max((acc - pi[i] * out_rate[i]).abs());
    }
    Ok(GeneratorSolution { states, probabilities: pi, residual, sweeps, bound, index })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SystemBuilder;

    #[test]
    fn truncated_mm1_is_truncated_geometric() {
        let spec = SystemBuilder::new(ModelKind::Collaborative)
            .class("a", 0.5)
            .server("s", 1.0)
            .edge("a", "s")
            .build()
            .unwrap();
        let sol = generator_solve(&spec, None, 10, &SolveConfig::default()).unwrap();
        assert_eq!(sol.states.len(), 11);
        let z: f64 = (0..=10).map(|n| 0.5f64.powi(n)).sum();
        for (s, p) in sol.iter() {
            let expect = 0.5f64.powi(s.size() as i32) / z;
            assert!(((p - expect) / expect).abs() < 1e-12);
        }
        assert!(sol.residual < 1e-14);
    }
}
