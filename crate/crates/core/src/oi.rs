//! Order-independent rate functionals.
//!
//! A rate functional assigns a total departure rate `mu(c_1..c_n)` to every
//! ordered sequence of items. The rate granted to the item in position `j` is
//! the increment `mu(c_1..c_j) - mu(c_1..c_{j-1})`, so later arrivals never
//! affect earlier ones. The functional is order independent when the total is
//! invariant under permutations and increments are nonnegative.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{BitSet, SystemSpec};

type Hook = Arc<dyn Fn(&[u8]) -> f64 + Send + Sync>;

/// Total rate as a function of an ordered item sequence.
#[derive(Clone)]
pub enum OiRate {
    /// Sum of per-item linear rates plus the pooled rate of all resources
    /// reachable from the items present. Covers collaborative service,
    /// abandonment, idle-server activation, token processors and agent matching.
    Pooled(PooledRate),
    /// User supplied total rate of a sequence of item indices.
    Custom { items: usize, hook: Hook },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PooledRate {
    pub reach: Vec<BitSet>,
    pub resource_rates: Vec<f64>,
    pub linear: Vec<f64>,
}

impl fmt::Debug for OiRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OiRate::Pooled(p) => f.debug_tuple("Pooled").field(p).finish(),
            OiRate::Custom { items, .. } => f.debug_struct("Custom").field("items", items).finish_non_exhaustive(),
        }
    }
}

impl OiRate {
    /// Collaborative service of jobs: classes reach their compatible servers;
    /// class abandonment rates add linearly.
    pub fn job_service(spec: &SystemSpec) -> Self {
        let j = spec.num_classes();
        OiRate::Pooled(PooledRate {
            reach: (0..j).map(|i| spec.class_servers(i)).collect(),
            resource_rates: (0..spec.num_servers()).map(|s| spec.service(s)).collect(),
            linear: (0..j).map(|i| spec.class_abandonment(i)).collect(),
        })
    }

    /// Activation of waiting or idle servers by arriving jobs: servers reach
    /// their compatible classes; server abandonment rates add linearly.
    pub fn server_activation(spec: &SystemSpec) -> Self {
        let m = spec.num_servers();
        OiRate::Pooled(PooledRate {
            reach: (0..m).map(|s| spec.server_classes(s)).collect(),
            resource_rates: (0..spec.num_classes()).map(|i| spec.arrival(i)).collect(),
            linear: (0..m).map(|s| spec.server_abandonment(s)).collect(),
        })
    }

    /// Service of busy tokens: pooled processors when a token layer is
    /// present, otherwise each token is served at its own rate.
    pub fn token_service(spec: &SystemSpec) -> Self {
        let m = spec.num_servers();
        match spec.token_layer() {
            Some(layer) => OiRate::Pooled(PooledRate {
                reach: layer.token_processors.clone(),
                resource_rates: layer.processors.iter().map(|p| p.1.value()).collect(),
                linear: vec![0.0; m],
            }),
            None => OiRate::Pooled(PooledRate {
                reach: (0..m).map(BitSet::single).collect(),
                resource_rates: (0..m).map(|s| spec.service(s)).collect(),
                linear: vec![0.0; m],
            }),
        }
    }

    /// Matching of waiting agents on a general graph: agents reach the
    /// classes they are compatible with, whose arrival probabilities pool.
    pub fn agent_matching(spec: &SystemSpec) -> Self {
        let j = spec.num_classes();
        OiRate::Pooled(PooledRate {
            reach: (0..j).map(|i| spec.links(i)).collect(),
            resource_rates: (0..j).map(|i| spec.arrival(i)).collect(),
            linear: vec![0.0; j],
        })
    }

    /// Wraps a user functional over sequences of item indices `0..items`.
    pub fn custom(items: usize, hook: impl Fn(&[u8]) -> f64 + Send + Sync + 'static) -> Self {
        OiRate::Custom { items, hook: Arc::new(hook) }
    }

    pub fn items(&self) -> usize {
        match self {
            OiRate::Pooled(p) => p.reach.len(),
            OiRate::Custom { items, .. } => *items,
        }
    }

    /// Total rate of a sequence.
    pub fn total(&self, seq: &[u8]) -> f64 {
        match self {
            OiRate::Pooled(p) => {
                let reach = seq.iter().fold(BitSet::EMPTY, |s, &c| s.union(p.reach[c as usize]));
                p.pooled(reach) + seq.iter().map(|&c| p.linear[c as usize]).sum::<f64>()
            }
            OiRate::Custom { hook, .. } => hook(seq),
        }
    }

    /// Totals of every prefix `c_1..c_j`, `j = 1..n`.
    pub fn prefix_totals(&self, seq: &[u8]) -> Vec<f64> {
        match self {
            OiRate::Pooled(p) => {
                let mut reach = BitSet::EMPTY;
                let mut pooled = 0.0;
                let mut linear = 0.0;
                seq.iter()
                    .map(|&c| {
                        let c = c as usize;
                        let new = p.reach[c].difference(reach);
                        if !new.is_empty() {
                            reach = reach.union(new);
                            pooled = p.pooled(reach);
                        }
                        linear += p.linear[c];
                        pooled + linear
                    })
                    .collect()
            }
            OiRate::Custom { hook, .. } => (1..=seq.len()).map(|j| hook(&seq[..j])).collect(),
        }
    }

    /// Rate granted to each position: `mu(c_1..c_j) - mu(c_1..c_{j-1})`.
    pub fn increments(&self, seq: &[u8]) -> Vec<f64> {
        let totals = self.prefix_totals(seq);
        let mut prev = 0.0;
        totals
            .into_iter()
            .map(|t| {
                let d = t - prev;
                prev = t;
                d
            })
            .collect()
    }

    /// Total rate of any sequence whose multiset of items is given by `counts`.
    pub fn total_of_counts(&self, counts: &[u32]) -> f64 {
        match self {
            OiRate::Pooled(p) => {
                let mut reach = BitSet::EMPTY;
                let mut linear = 0.0;
                for (c, &n) in counts.iter().enumerate() {
                    if n > 0 {
                        reach = reach.union(p.reach[c]);
                        linear += p.linear[c] * n as f64;
                    }
                }
                p.pooled(reach) + linear
            }
            OiRate::Custom { hook, .. } => {
                let seq: Vec<u8> = counts
                    .iter()
                    .enumerate()
                    .flat_map(|(c, &n)| std::iter::repeat_n(c as u8, n as usize))
                    .collect();
                hook(&seq)
            }
        }
    }

    /// Samples random sequences and checks permutation invariance of the
    /// total and nonnegativity of the increments.
    pub fn verify(&self, samples: usize, max_len: usize, seed: u64) -> Result<()> {
        let items = self.items();
        if items == 0 {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples {
            let n = rng.gen_range(1..=max_len.max(1));
            let mut seq: Vec<u8> = (0..n).map(|_| rng.gen_range(0..items) as u8).collect();
            for (j, d) in self.increments(&seq).iter().enumerate() {
                if !(*d >= -1e-12) {
                    return Err(Error::OiViolation(format!("negative increment {d} at position {} of {seq:?}", j + 1)));
                }
            }
            let t = self.total(&seq);
            if !(t > 0.0) {
                return Err(Error::OiViolation(format!("nonpositive total {t} for {seq:?}")));
            }
            seq.shuffle(&mut rng);
            let t2 = self.total(&seq);
            if (t - t2).abs() > 1e-12 * t.abs().max(1.0) {
                return Err(Error::OiViolation(format!("total depends on order: {t} vs {t2} for {seq:?}")));
            }
        }
        Ok(())
    }
}

impl PooledRate {
    fn pooled(&self, reach: BitSet) -> f64 {
        reach.iter().map(|r| self.resource_rates[r]).sum()
    }
}

/// Log of the order-independent product weight `prod_i a(c_i) / mu(c_1..c_i)`.
///
/// Returns `None` when some prefix has zero total rate.
pub fn log_weight(arrivals: &[f64], rate: &OiRate, seq: &[u8]) -> Option<f64> {
    let mut acc = 0.0;
    for (&c, t) in seq.iter().zip(rate.prefix_totals(seq)) {
        if !(t > 0.0) {
            return None;
        }
        acc += arrivals[c as usize].ln() - t.ln();
    }
    Some(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelKind, SystemBuilder};

    fn triangle_plus_flexible() -> SystemSpec {
        SystemBuilder::new(ModelKind::Collaborative)
            .class("1", 1.0)
            .class("2", 1.0)
            .class("3", 1.0)
            .class("4", 1.0)
            .server("1", 1.0)
            .server("2", 2.0)
            .server("3", 4.0)
            .server("4", 8.0)
            .edges("1", &["1", "2"])
            .edges("2", &["2", "3"])
            .edges("3", &["1", "3"])
            .edges("4", &["1", "2", "3", "4"])
            .build()
            .unwrap()
    }

    #[test]
    fn collaborative_increments_follow_first_compatible_job() {
        let spec = triangle_plus_flexible();
        let rate = OiRate::job_service(&spec);
        // classes 1,2,3,2,4,1 as indices
        let seq = [0u8, 1, 2, 1, 3, 0];
        let inc = rate.increments(&seq);
        assert_eq!(inc, vec![3.0, 4.0, 0.0, 0.0, 8.0, 0.0]);
        assert_eq!(rate.total(&seq), 15.0);
    }

    #[test]
    fn abandonment_adds_linear_terms() {
        let spec = SystemBuilder::new(ModelKind::Collaborative)
            .class_with_abandonment("1", 1.0, 0.25)
            .server("1", 1.0)
            .edge("1", "1")
            .build()
            .unwrap();
        let rate = OiRate::job_service(&spec);
        assert_eq!(rate.prefix_totals(&[0, 0, 0]), vec![1.25, 1.5, 1.75]);
        assert_eq!(rate.total_of_counts(&[3]), 1.75);
    }

    #[test]
    fn verification_flags_order_dependence() {
        let bad = OiRate::custom(2, |s: &[u8]| if s.first() == Some(&0) { 2.0 } else { 1.0 } + s.len() as f64);
        assert!(matches!(bad.verify(200, 4, 1), Err(Error::OiViolation(_))));
        let good = OiRate::job_service(&triangle_plus_flexible());
        good.verify(500, 6, 7).unwrap();
    }
}
