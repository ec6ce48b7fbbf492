//! Side-by-side trace of a noncollaborative system and a collaborative
//! queue driven by the same events during periods where every server is
//! busy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::SystemSpec;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CoupledTrace {
    pub events: usize,
    pub busy_periods: usize,
    /// Events compared while every server was busy.
    pub checked: usize,
    pub mismatches: usize,
    /// Event index and the two queue contents at the first disagreement.
    pub first_mismatch: Option<(usize, Vec<u8>, Vec<u8>)>,
}

/// Drives assign-longest-idle service and collaborative service with one
/// uniformized event stream. Each all-busy period starts the collaborative
/// queue from the current waiting jobs; both queues must then agree until
/// a server idles.
pub fn coupled_trace(spec: &SystemSpec, seed: u64, events: usize) -> Result<CoupledTrace> {
    if !spec.kind().is_bipartite() {
        return Err(Error::Unsupported("coupled traces need a bipartite system".into()));
    }
    let m = spec.num_servers();
    let lam = spec.total_arrival();
    let total = lam + spec.total_service();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut waiting: Vec<u8> = Vec::new();
    let mut idle: Vec<u8> = (0..m as u8).collect();
    let mut shadow: Option<Vec<u8>> = None;
    let mut trace = CoupledTrace { events, ..CoupledTrace::default() };
    for step in 0..events {
        let mut u = rng.gen::<f64>() * total;
        let arrival = if u < lam {
            let mut c = spec.num_classes() - 1;
            for i in 0..spec.num_classes() {
                if u < spec.arrival(i) {
                    c = i;
                    break;
                }
                u -= spec.arrival(i);
            }
            Some(c)
        } else {
            None
        };
        let ring = if arrival.is_none() {
            u -= lam;
            let mut s = m - 1;
            for k in 0..m {
                if u < spec.service(k) {
                    s = k;
                    break;
                }
                u -= spec.service(k);
            }
            Some(s)
        } else {
            None
        };
        match (arrival, ring) {
            (Some(c), _) => {
                match idle.iter().position(|&s| spec.class_servers(c).contains(s as usize)) {
                    Some(k) => {
                        idle.remove(k);
                    }
                    None => waiting.push(c as u8),
                }
                if let Some(q) = shadow.as_mut() {
                    q.push(c as u8);
                }
            }
            (None, Some(s)) => {
                if !idle.contains(&(s as u8)) {
                    match waiting.iter().position(|&c| spec.class_servers(c as usize).contains(s)) {
                        Some(k) => {
                            waiting.remove(k);
                        }
                        None => idle.push(s as u8),
                    }
                }
                if let Some(q) = shadow.as_mut() {
                    if let Some(k) = q.iter().position(|&c| spec.class_servers(c as usize).contains(s)) {
                        q.remove(k);
                    }
                }
            }
            (None, None) => unreachable!(),
        }
        if let Some(q) = &shadow {
            trace.checked += 1;
            if *q != waiting {
                trace.mismatches += 1;
                trace.first_mismatch.get_or_insert((step, waiting.clone(), q.clone()));
            }
        }
        if idle.is_empty() {
            if shadow.is_none() {
                trace.busy_periods += 1;
                shadow = Some(waiting.clone());
            }
        } else {
            shadow = None;
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelKind, SystemBuilder};

    #[test]
    fn queues_agree_while_all_busy() {
        let spec = SystemBuilder::new(ModelKind::NcAlis)
            .class("1", 0.3)
            .class("2", 0.3)
            .class("3", 0.5)
            .server("1", 1.0)
            .server("2", 1.0)
            .edge("1", "1")
            .edge("2", "2")
            .edges("3", &["1", "2"])
            .build()
            .unwrap();
        let t = coupled_trace(&spec, 9, 200_000).unwrap();
        assert!(t.busy_periods > 100 && t.checked > 1000);
        assert_eq!(t.mismatches, 0, "{t:?}");
    }
}
