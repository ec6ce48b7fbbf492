//! Nested compatibility structures and their closed-form response times.
//!
//! In a nested system any two classes have server sets that are disjoint or
//! ordered by inclusion. Classes sharing a server set form one node; nodes
//! form a forest under strict inclusion. Each node gets the effective rate
//! `mu(S) - lambda(R(S)) + lambda(node)` and load `lambda(node) / mu_hat`.

use serde::{Deserialize, Serialize};

use crate::dist::{ResponseDist, Term};
use crate::error::{Error, Result};
use crate::model::{BitSet, SystemSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct NestedNode {
    pub classes: BitSet,
    pub servers: BitSet,
    /// Classes whose servers all lie in `servers`.
    pub required: BitSet,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub arrival: f64,
    pub mu_hat: f64,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NestedTree {
    nodes: Vec<NestedNode>,
    class_node: Vec<usize>,
    roots: Vec<usize>,
}

impl NestedTree {
    pub fn nodes(&self) -> &[NestedNode] {
        &self.nodes
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn node_of(&self, class: usize) -> usize {
        self.class_node[class]
    }

    /// Strict ancestors of `node`, nearest first.
    pub fn ancestors(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.nodes[node].parent;
        while let Some(p) = cur {
            out.push(p);
            cur = self.nodes[p].parent;
        }
        out
    }

    /// Probability of an empty collaborative system, `prod (1 - rho)` over nodes.
    pub fn pi_empty(&self) -> f64 {
        self.nodes.iter().map(|n| 1.0 - n.rho).product()
    }
}

/// Builds the inclusion forest of a nested system, or names two classes whose
/// server sets overlap without one containing the other.
pub fn nested_decompose(spec: &SystemSpec) -> Result<NestedTree> {
    if !spec.kind().is_bipartite() {
        return Err(Error::Unsupported("nestedness is defined for bipartite systems".into()));
    }
    let j = spec.num_classes();
    for a in 0..j {
        for b in a + 1..j {
            let (sa, sb) = (spec.class_servers(a), spec.class_servers(b));
            if !(sa.is_subset(sb) || sb.is_subset(sa) || sa.is_disjoint(sb)) {
                return Err(Error::NotNested {
                    first: spec.classes()[a].id.clone(),
                    second: spec.classes()[b].id.clone(),
                    first_set: spec.server_labels(sa),
                    second_set: spec.server_labels(sb),
                });
            }
        }
    }
    let mut sets: Vec<BitSet> = Vec::new();
    for i in 0..j {
        let s = spec.class_servers(i);
        if !sets.contains(&s) {
            sets.push(s);
        }
    }
    let mut nodes: Vec<NestedNode> = sets
        .iter()
        .map(|&servers| {
            let classes = BitSet::from_indices((0..j).filter(|&i| spec.class_servers(i) == servers));
            let required = spec.classes_within(servers);
            let arrival = spec.arrival_rate(classes);
            let mu_hat = spec.service_rate(servers) - spec.arrival_rate(required) + arrival;
            NestedNode { classes, servers, required, parent: None, children: Vec::new(), arrival, mu_hat, rho: arrival / mu_hat }
        })
        .collect();
    for (v, node) in nodes.iter().enumerate() {
        if !(node.rho < 1.0) || !(node.mu_hat > node.arrival) {
            let _ = v;
            return Err(Error::Unstable {
                witness: spec.class_labels(node.required),
                margin: spec.service_rate(node.servers) - spec.arrival_rate(node.required),
            });
        }
    }
    let mut roots = Vec::new();
    for v in 0..nodes.len() {
        let parent = (0..nodes.len())
            .filter(|&u| u != v && nodes[v].servers.is_subset(nodes[u].servers))
            .min_by_key(|&u| nodes[u].servers.len());
        nodes[v].parent = parent;
        match parent {
            Some(p) => nodes[p].children.push(v),
            None => roots.push(v),
        }
    }
    let class_node = (0..j).map(|i| sets.iter().position(|&s| s == spec.class_servers(i)).unwrap()).collect();
    Ok(NestedTree { nodes, class_node, roots })
}

/// Effective rate `mu(S_i) - lambda(R(S_i)) + lambda_i` and load of each class.
pub fn effective_rates(spec: &SystemSpec, tree: &NestedTree) -> Vec<(f64, f64)> {
    (0..spec.num_classes())
        .map(|i| {
            let node = &tree.nodes[tree.node_of(i)];
            let mu_hat = spec.service_rate(node.servers) - spec.arrival_rate(node.required) + spec.arrival(i);
            (mu_hat, spec.arrival(i) / mu_hat)
        })
        .collect()
}

/// Where conditioning probabilities came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Exact,
    Simulated,
    User,
}

/// What an arriving job of the class sees: the probability that some
/// compatible server is idle, and otherwise the probability of each largest
/// busy ancestor (identified by a class of that node).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusyWeights {
    pub idle_compatible: f64,
    pub top: Vec<(usize, f64)>,
    pub provenance: Provenance,
}

impl BusyWeights {
    /// Derives the weights for `class` from a distribution over busy server sets.
    pub fn from_busy_sets(tree: &NestedTree, class: usize, busy: &[(BitSet, f64)], provenance: Provenance) -> Self {
        let node = tree.node_of(class);
        let own = tree.nodes[node].servers;
        let total: f64 = busy.iter().map(|b| b.1).sum();
        let mut idle_compatible = 0.0;
        let mut top: Vec<(usize, f64)> = Vec::new();
        for &(set, p) in busy {
            if !own.is_subset(set) {
                idle_compatible += p / total;
                continue;
            }
            let y = top_busy(tree, node, set);
            let rep = tree.nodes[y].classes.iter().next().unwrap();
            match top.iter_mut().find(|t| t.0 == rep) {
                Some(t) => t.1 += p / total,
                None => top.push((rep, p / total)),
            }
        }
        top.sort_by_key(|t| t.0);
        BusyWeights { idle_compatible, top, provenance }
    }
}

/// The highest ancestor of `node` (or `node` itself) whose servers are all busy.
fn top_busy(tree: &NestedTree, node: usize, busy: BitSet) -> usize {
    let mut y = node;
    for a in tree.ancestors(node) {
        if tree.nodes[a].servers.is_subset(busy) {
            y = a;
        } else {
            break;
        }
    }
    y
}

#[derive(Clone, Debug, PartialEq)]
pub enum ResponseModel {
    /// Response time under collaborative service.
    Collaborative,
    /// Queueing time under non-collaborative service given all servers busy.
    NcAllBusy,
    /// Queueing time under non-collaborative service given that the servers
    /// in the set (which must cover the class) are busy.
    NcGivenBusy(BitSet),
    /// Response time under non-collaborative service with equal server rates.
    NcEqualRates(Option<BusyWeights>),
}

/// Own stage and ancestor waiting stages, up to ancestor `limit` inclusive.
fn chain(tree: &NestedTree, node: usize, limit: Option<usize>) -> Result<ResponseDist> {
    let own = &tree.nodes[node];
    let mut terms = vec![Term::Exp { rate: own.mu_hat - own.arrival }];
    if limit != Some(node) {
        for a in tree.ancestors(node) {
            let n = &tree.nodes[a];
            terms.push(Term::ZeroOr { prob: n.rho, rate: n.mu_hat - n.arrival });
            if limit == Some(a) {
                break;
            }
        }
    }
    if terms.iter().any(|t| match *t {
        Term::Exp { rate } | Term::ZeroOr { rate, .. } => !(rate > 0.0),
    }) {
        return Err(Error::Validation("nonpositive stage rate".into()));
    }
    Ok(ResponseDist { components: vec![crate::dist::Component { weight: 1.0, terms }] })
}

pub fn response_time(spec: &SystemSpec, tree: &NestedTree, class: usize, model: &ResponseModel) -> Result<ResponseDist> {
    if class >= spec.num_classes() {
        return Err(Error::Validation(format!("unknown class index {class}")));
    }
    let node = tree.node_of(class);
    match model {
        ResponseModel::Collaborative | ResponseModel::NcAllBusy => chain(tree, node, None),
        ResponseModel::NcGivenBusy(busy) => {
            if !tree.nodes[node].servers.is_subset(*busy) {
                return Err(Error::Validation(format!(
                    "busy set {:?} does not cover the servers of class {}",
                    spec.server_labels(*busy),
                    spec.classes()[class].id
                )));
            }
            chain(tree, node, Some(top_busy(tree, node, *busy)))
        }
        ResponseModel::NcEqualRates(weights) => {
            let Some(w) = weights else {
                return Err(Error::Unsupported(
                    "response times with idle servers need the distribution of busy servers seen by arrivals".into(),
                ));
            };
            let m = spec.num_servers();
            let first = spec.service(0);
            if (1..m).any(|s| (spec.service(s) - first).abs() > 1e-12 * first) {
                return Err(Error::Unsupported("response times under non-collaborative service need equal server rates".into()));
            }
            let mut parts = vec![(w.idle_compatible, ResponseDist::zero())];
            for &(rep, p) in &w.top {
                let y = tree.node_of(rep);
                if y != node && !tree.ancestors(node).contains(&y) {
                    return Err(Error::Validation(format!(
                        "class {} is not an ancestor of class {}",
                        spec.classes()[rep].id,
                        spec.classes()[class].id
                    )));
                }
                parts.push((p, chain(tree, node, Some(y))?));
            }
            let queue = ResponseDist::mixture(&parts)?;
            Ok(ResponseDist::exp(first)?.convolve(&queue))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelKind, SystemBuilder};

    fn w_model() -> SystemSpec {
        SystemBuilder::new(ModelKind::Collaborative)
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

    fn six_class_tree() -> SystemSpec {
        let mut b = SystemBuilder::new(ModelKind::Collaborative);
        for (c, l) in [("1", 0.2), ("2", 0.3), ("3", 0.25), ("4", 0.2), ("5", 0.4), ("6", 0.5)] {
            b = b.class(c, l);
        }
        for s in ["1", "2", "3", "4", "5"] {
            b = b.server(s, 1.0);
        }
        b.edge("1", "1")
            .edges("2", &["1", "2"])
            .edge("3", "3")
            .edge("4", "4")
            .edges("5", &["3", "4", "5"])
            .edges("6", &["1", "2", "3", "4", "5"])
            .build()
            .unwrap()
    }

    #[test]
    fn w_model_response_times() {
        let spec = w_model();
        let tree = nested_decompose(&spec).unwrap();
        let t3 = response_time(&spec, &tree, 2, &ResponseModel::Collaborative).unwrap();
        assert!((t3.mean() - 1.0 / 0.9).abs() < 1e-12);
        let t1 = response_time(&spec, &tree, 0, &ResponseModel::Collaborative).unwrap();
        assert!((t1.mean() - (5.0 / 14.0 / 0.9 + 1.0 / 0.7)).abs() < 1e-12);
        let (mu_hat, rho) = effective_rates(&spec, &tree)[2];
        assert!((mu_hat - 1.4).abs() < 1e-12 && (rho - 5.0 / 14.0).abs() < 1e-12);
        assert!((tree.pi_empty() - 0.315).abs() < 1e-12);
    }

    #[test]
    fn six_class_tree_shape() {
        let spec = six_class_tree();
        let tree = nested_decompose(&spec).unwrap();
        assert_eq!(tree.roots().len(), 1);
        let root = &tree.nodes()[tree.roots()[0]];
        assert_eq!(root.classes, BitSet::single(5));
        let kids: Vec<BitSet> = root.children.iter().map(|&c| tree.nodes()[c].servers).collect();
        assert!(kids.contains(&BitSet::from_indices([0, 1])));
        assert!(kids.contains(&BitSet::from_indices([2, 3, 4])));
    }

    #[test]
    fn overlap_is_reported() {
        let spec = SystemBuilder::new(ModelKind::Collaborative)
            .class("1", 0.1)
            .class("2", 0.1)
            .server("1", 1.0)
            .server("2", 1.0)
            .server("3", 1.0)
            .edges("1", &["1", "2"])
            .edges("2", &["2", "3"])
            .build()
            .unwrap();
        match nested_decompose(&spec) {
            Err(Error::NotNested { first, second, .. }) => assert_eq!((first.as_str(), second.as_str()), ("1", "2")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn given_busy_truncates_chain() {
        let spec = six_class_tree();
        let tree = nested_decompose(&spec).unwrap();
        let busy = BitSet::from_indices([0, 1]);
        let d = response_time(&spec, &tree, 0, &ResponseModel::NcGivenBusy(busy)).unwrap();
        assert_eq!(d.components[0].terms.len(), 2);
        assert!(response_time(&spec, &tree, 2, &ResponseModel::NcGivenBusy(busy)).is_err());
        assert!(matches!(
            response_time(&spec, &tree, 0, &ResponseModel::NcEqualRates(None)),
            Err(Error::Unsupported(_))
        ));
    }
}
