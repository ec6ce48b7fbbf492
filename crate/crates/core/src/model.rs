//! System description: job classes, servers, their compatibility graph, and
//! the set functions built on top of it (compatible servers, compatible
//! classes, aggregate rates, stability margins, reductions).

use std::collections::HashMap;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of classes or servers a system may have.
pub const MAX_NODES: usize = 64;

/// Largest class count for which stability is checked by subset enumeration.
pub const STABILITY_CLASS_CAP: usize = 20;

/// A set of class or server indices stored as a bit mask.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BitSet(pub u64);

impl BitSet {
    pub const EMPTY: BitSet = BitSet(0);

    pub fn full(n: usize) -> Self {
        if n >= 64 {
            BitSet(u64::MAX)
        } else {
            BitSet((1u64 << n) - 1)
        }
    }

    pub fn single(i: usize) -> Self {
        BitSet(1u64 << i)
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(it: I) -> Self {
        it.into_iter().fold(BitSet::EMPTY, |s, i| s.with(i))
    }

    pub fn contains(self, i: usize) -> bool {
        i < 64 && self.0 >> i & 1 == 1
    }

    pub fn with(self, i: usize) -> Self {
        BitSet(self.0 | 1u64 << i)
    }

    pub fn without(self, i: usize) -> Self {
        BitSet(self.0 & !(1u64 << i))
    }

    pub fn union(self, o: BitSet) -> Self {
        BitSet(self.0 | o.0)
    }

    pub fn intersection(self, o: BitSet) -> Self {
        BitSet(self.0 & o.0)
    }

    pub fn difference(self, o: BitSet) -> Self {
        BitSet(self.0 & !o.0)
    }

    pub fn is_subset(self, o: BitSet) -> bool {
        self.0 & !o.0 == 0
    }

    pub fn is_disjoint(self, o: BitSet) -> bool {
        self.0 & o.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> BitIter {
        BitIter(self.0)
    }

    /// All subsets of `self`, including the empty set and `self`.
    pub fn subsets(self) -> SubsetIter {
        SubsetIter {
            mask: self.0,
            next: Some(0),
        }
    }
}

impl fmt::Debug for BitSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

pub struct BitIter(u64);

impl Iterator for BitIter {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        if self.0 == 0 {
            return None;
        }
        let i = self.0.trailing_zeros() as usize;
        self.0 &= self.0 - 1;
        Some(i)
    }
}

pub struct SubsetIter {
    mask: u64,
    next: Option<u64>,
}

impl Iterator for SubsetIter {
    type Item = BitSet;
    fn next(&mut self) -> Option<BitSet> {
        let cur = self.next?;
        self.next = if cur == self.mask {
            None
        } else {
            Some((cur.wrapping_sub(self.mask)) & self.mask)
        };
        Some(BitSet(cur))
    }
}

/// A nonnegative rate held both as a float and as an exact rational.
///
/// Floats are converted through their shortest round-trip decimal form, so
/// `0.3` is held exactly as `3/10`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rate {
    value: f64,
    exact: BigRational,
}

impl Rate {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::Validation(format!("rate {value} is not a finite nonnegative number")));
        }
        let exact = parse_rational(&format!("{value}"))
            .ok_or_else(|| Error::Validation(format!("cannot represent rate {value}")))?;
        Ok(Rate { value, exact })
    }

    pub fn from_rational(exact: BigRational) -> Result<Self> {
        if exact < BigRational::zero() {
            return Err(Error::Validation(format!("rate {exact} is negative")));
        }
        let value = exact
            .to_f64()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Validation(format!("rate {exact} out of range")))?;
        Ok(Rate { value, exact })
    }

    /// Parses `"0.3"`, `"1e-3"`, `"3/10"` or `"2"`.
    pub fn parse(text: &str) -> Result<Self> {
        let exact = parse_rational(text.trim())
            .ok_or_else(|| Error::Validation(format!("cannot parse rate {text:?}")))?;
        Self::from_rational(exact)
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn exact(&self) -> &BigRational {
        &self.exact
    }
}

/// Parses a decimal (optionally with exponent) or a fraction `p/q` exactly.
pub fn parse_rational(text: &str) -> Option<BigRational> {
    if let Some((num, den)) = text.split_once('/') {
        let n = parse_rational(num.trim())?;
        let d = parse_rational(den.trim())?;
        if d.is_zero() {
            return None;
        }
        return Some(n / d);
    }
    let (mantissa, exponent) = match text.find(['e', 'E']) {
        Some(pos) => (&text[..pos], text[pos + 1..].parse::<i32>().ok()?),
        None => (text, 0),
    };
    let (negative, mantissa) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let digits: BigInt = format!("{int_part}{frac_part}0").parse::<BigInt>().ok()? / BigInt::from(10);
    let scale = exponent - frac_part.len() as i32;
    let ten = BigInt::from(10);
    let mut r = BigRational::from_integer(digits);
    if scale >= 0 {
        r *= BigRational::from_integer(num_traits::pow(ten, scale as usize));
    } else {
        r /= BigRational::from_integer(num_traits::pow(ten, (-scale) as usize));
    }
    Some(if negative { -r } else { r })
}

/// Which queueing or matching model a system describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    /// Collaborative (cancel-on-completion) FCFS service.
    Collaborative,
    /// Non-collaborative FCFS with assign-longest-idle-server routing.
    NcAlis,
    /// Non-collaborative FCFS with randomized assignment to idle servers.
    NcRais,
    /// Token-based central queue with randomized token assignment.
    TokenRais,
    /// Closed token loss model (jobs finding no idle compatible token are lost).
    ClosedToken,
    /// Double-sided matching where unmatched servers leave (equivalent to `DbmK(0)`).
    Dbm,
    /// Double-sided matching with a server buffer of the given capacity.
    DbmK(usize),
    /// Double-sided matching with abandonments on both sides.
    Dbma,
    /// Discrete-time matching on a general compatibility graph of agent classes.
    Gm,
    /// Discrete-time bipartite matching with paired arrivals.
    Pbm,
}

impl ModelKind {
    pub fn name(self) -> String {
        match self {
            ModelKind::Collaborative => "collaborative".into(),
            ModelKind::NcAlis => "nc_alis".into(),
            ModelKind::NcRais => "nc_rais".into(),
            ModelKind::TokenRais => "token_rais".into(),
            ModelKind::ClosedToken => "closed_token".into(),
            ModelKind::Dbm => "dbm".into(),
            ModelKind::DbmK(k) => format!("dbm_k({k})"),
            ModelKind::Dbma => "dbma".into(),
            ModelKind::Gm => "gm".into(),
            ModelKind::Pbm => "pbm".into(),
        }
    }

    /// Server buffer capacity of the double-sided matching models.
    pub fn server_buffer(self) -> Option<usize> {
        match self {
            ModelKind::Dbm => Some(0),
            ModelKind::DbmK(k) => Some(k),
            _ => None,
        }
    }

    pub fn is_bipartite(self) -> bool {
        self != ModelKind::Gm
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JobClass {
    pub id: String,
    /// Arrival rate (arrival probability per slot for `Gm`).
    pub arrival: Rate,
    pub abandonment: Option<Rate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Server {
    pub id: String,
    /// Service rate (arrival rate of servers in matching models).
    pub rate: Rate,
    pub abandonment: Option<Rate>,
}

/// Processors that serve busy tokens collaboratively in the token models.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayer {
    pub processors: Vec<(String, Rate)>,
    /// For each token (server), the processors able to work on it.
    pub token_processors: Vec<BitSet>,
}

/// A validated system: classes, servers, compatibility and model kind.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemSpec {
    kind: ModelKind,
    classes: Vec<JobClass>,
    servers: Vec<Server>,
    class_servers: Vec<BitSet>,
    server_classes: Vec<BitSet>,
    links: Vec<BitSet>,
    token_layer: Option<TokenLayer>,
}

/// Aggregate rates of a class subset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubsetRates {
    pub arrival: f64,
    pub service: f64,
    pub servers: BitSet,
}

/// Outcome of a stability check.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub stable: bool,
    /// Class subset with the smallest margin.
    pub worst: BitSet,
    /// Service capacity minus arrival rate of `worst` (normalized rates for `Pbm`).
    pub margin: f64,
    /// Largest ratio of arrival rate to service capacity over all class subsets.
    pub max_load: f64,
}

/// Incrementally assembles a [`SystemSpec`].
#[derive(Clone, Debug)]
pub struct SystemBuilder {
    kind: ModelKind,
    classes: Vec<JobClass>,
    servers: Vec<Server>,
    edges: Vec<(String, String)>,
    links: Vec<(String, String)>,
    processors: Vec<(String, Rate)>,
    token_edges: Vec<(String, String)>,
    pending: Option<Error>,
}

impl SystemBuilder {
    pub fn new(kind: ModelKind) -> Self {
        SystemBuilder {
            kind,
            classes: Vec::new(),
            servers: Vec::new(),
            edges: Vec::new(),
            links: Vec::new(),
            processors: Vec::new(),
            token_edges: Vec::new(),
            pending: None,
        }
    }

    fn rate(&mut self, v: f64) -> Rate {
        match Rate::new(v) {
            Ok(r) => r,
            Err(e) => {
                self.pending.get_or_insert(e);
                Rate::new(0.0).unwrap()
            }
        }
    }

    pub fn class(mut self, id: &str, arrival: f64) -> Self {
        let arrival = self.rate(arrival);
        self.classes.push(JobClass { id: id.into(), arrival, abandonment: None });
        self
    }

    pub fn class_rate(mut self, id: &str, arrival: Rate, abandonment: Option<Rate>) -> Self {
        self.classes.push(JobClass { id: id.into(), arrival, abandonment });
        self
    }

    pub fn class_with_abandonment(mut self, id: &str, arrival: f64, abandonment: f64) -> Self {
        let arrival = self.rate(arrival);
        let ab = self.rate(abandonment);
        self.classes.push(JobClass { id: id.into(), arrival, abandonment: Some(ab) });
        self
    }

    pub fn server(mut self, id: &str, rate: f64) -> Self {
        let rate = self.rate(rate);
        self.servers.push(Server { id: id.into(), rate, abandonment: None });
        self
    }

    pub fn server_rate(mut self, id: &str, rate: Rate, abandonment: Option<Rate>) -> Self {
        self.servers.push(Server { id: id.into(), rate, abandonment });
        self
    }

    pub fn server_with_abandonment(mut self, id: &str, rate: f64, abandonment: f64) -> Self {
        let rate = self.rate(rate);
        let ab = self.rate(abandonment);
        self.servers.push(Server { id: id.into(), rate, abandonment: Some(ab) });
        self
    }

    /// Declares class `class` compatible with server `server`.
    pub fn edge(mut self, class: &str, server: &str) -> Self {
        self.edges.push((class.into(), server.into()));
        self
    }

    /// Declares class `class` compatible with every listed server.
    pub fn edges(mut self, class: &str, servers: &[&str]) -> Self {
        for s in servers {
            self.edges.push((class.into(), (*s).into()));
        }
        self
    }

    /// Declares two agent classes compatible (matching on a general graph).
    pub fn link(mut self, a: &str, b: &str) -> Self {
        self.links.push((a.into(), b.into()));
        self
    }

    pub fn processor(mut self, id: &str, rate: f64) -> Self {
        let rate = self.rate(rate);
        self.processors.push((id.into(), rate));
        self
    }

    pub fn processor_rate(mut self, id: &str, rate: Rate) -> Self {
        self.processors.push((id.into(), rate));
        self
    }

    /// Declares that processor `processor` can work on token `token`.
    pub fn token_edge(mut self, token: &str, processor: &str) -> Self {
        self.token_edges.push((token.into(), processor.into()));
        self
    }

    pub fn build(self) -> Result<SystemSpec> {
        if let Some(e) = self.pending {
            return Err(e);
        }
        let kind = self.kind;
        let j = self.classes.len();
        let m = self.servers.len();
        if j == 0 {
            return Err(Error::Validation("system has no classes".into()));
        }
        if j > MAX_NODES || m > MAX_NODES {
            return Err(Error::SizeCap { what: "classes or servers".into(), size: j.max(m), cap: MAX_NODES });
        }
        let class_index = unique_index(self.classes.iter().map(|c| c.id.as_str()), "class")?;
        let server_index = unique_index(self.servers.iter().map(|s| s.id.as_str()), "server")?;

        let mut class_servers = vec![BitSet::EMPTY; j];
        let mut server_classes = vec![BitSet::EMPTY; m];
        for (c, s) in &self.edges {
            let ci = *class_index
                .get(c.as_str())
                .ok_or_else(|| Error::Validation(format!("edge refers to unknown class {c:?}")))?;
            let si = *server_index
                .get(s.as_str())
                .ok_or_else(|| Error::Validation(format!("edge refers to unknown server {s:?}")))?;
            class_servers[ci] = class_servers[ci].with(si);
            server_classes[si] = server_classes[si].with(ci);
        }
        let mut links = vec![BitSet::EMPTY; if kind == ModelKind::Gm { j } else { 0 }];
        for (a, b) in &self.links {
            if kind != ModelKind::Gm {
                return Err(Error::Validation("agent links are only meaningful for the gm kind".into()));
            }
            let ai = *class_index
                .get(a.as_str())
                .ok_or_else(|| Error::Validation(format!("link refers to unknown class {a:?}")))?;
            let bi = *class_index
                .get(b.as_str())
                .ok_or_else(|| Error::Validation(format!("link refers to unknown class {b:?}")))?;
            if ai == bi {
                return Err(Error::Validation(format!("self-compatible agent class {a:?} is not supported")));
            }
            links[ai] = links[ai].with(bi);
            links[bi] = links[bi].with(ai);
        }

        for c in &self.classes {
            if c.arrival.value() <= 0.0 {
                return Err(Error::Validation(format!("class {:?} has nonpositive arrival rate", c.id)));
            }
        }
        for s in &self.servers {
            if s.rate.value() <= 0.0 {
                return Err(Error::Validation(format!("server {:?} has nonpositive rate", s.id)));
            }
        }

        if kind == ModelKind::Gm {
            if m > 0 || !self.edges.is_empty() {
                return Err(Error::Validation("the gm kind takes agent classes and links, not servers".into()));
            }
            let total: f64 = self.classes.iter().map(|c| c.arrival.value()).sum();
            if total > 1.0 + 1e-12 {
                return Err(Error::Validation(format!("gm arrival probabilities sum to {total} > 1")));
            }
            for (i, l) in links.iter().enumerate() {
                if l.is_empty() {
                    return Err(Error::Validation(format!("agent class {:?} has no compatible class", self.classes[i].id)));
                }
            }
        } else {
            if m == 0 {
                return Err(Error::Validation("system has no servers".into()));
            }
            for (i, s) in class_servers.iter().enumerate() {
                if s.is_empty() {
                    return Err(Error::Validation(format!("class {:?} has no compatible server", self.classes[i].id)));
                }
            }
            for (i, c) in server_classes.iter().enumerate() {
                if c.is_empty() {
                    return Err(Error::Validation(format!("server {:?} has no compatible class", self.servers[i].id)));
                }
            }
        }

        if kind == ModelKind::Dbma {
            for c in &self.classes {
                if !c.abandonment.as_ref().is_some_and(|a| a.value() > 0.0) {
                    return Err(Error::Validation(format!("dbma class {:?} needs a positive abandonment rate", c.id)));
                }
            }
            for s in &self.servers {
                if !s.abandonment.as_ref().is_some_and(|a| a.value() > 0.0) {
                    return Err(Error::Validation(format!("dbma server {:?} needs a positive abandonment rate", s.id)));
                }
            }
        } else if kind != ModelKind::Collaborative {
            if self.classes.iter().any(|c| c.abandonment.is_some()) {
                return Err(Error::Validation(format!("class abandonment is not supported for the {kind} kind")));
            }
            if self.servers.iter().any(|s| s.abandonment.is_some()) {
                return Err(Error::Validation(format!("server abandonment is not supported for the {kind} kind")));
            }
        } else if self.servers.iter().any(|s| s.abandonment.is_some()) {
            return Err(Error::Validation("server abandonment is only supported for the dbma kind".into()));
        }

        let token_layer = if self.processors.is_empty() && self.token_edges.is_empty() {
            None
        } else {
            if !matches!(kind, ModelKind::TokenRais | ModelKind::ClosedToken) {
                return Err(Error::Validation("processors are only meaningful for token kinds".into()));
            }
            let proc_index = unique_index(self.processors.iter().map(|p| p.0.as_str()), "processor")?;
            if self.processors.len() > MAX_NODES {
                return Err(Error::SizeCap { what: "processors".into(), size: self.processors.len(), cap: MAX_NODES });
            }
            let mut token_processors = vec![BitSet::EMPTY; m];
            for (t, p) in &self.token_edges {
                let ti = *server_index
                    .get(t.as_str())
                    .ok_or_else(|| Error::Validation(format!("token edge refers to unknown token {t:?}")))?;
                let pi = *proc_index
                    .get(p.as_str())
                    .ok_or_else(|| Error::Validation(format!("token edge refers to unknown processor {p:?}")))?;
                token_processors[ti] = token_processors[ti].with(pi);
            }
            for (i, tp) in token_processors.iter().enumerate() {
                if tp.is_empty() {
                    return Err(Error::Validation(format!("token {:?} has no processor", self.servers[i].id)));
                }
            }
            for (id, r) in &self.processors {
                if r.value() <= 0.0 {
                    return Err(Error::Validation(format!("processor {id:?} has nonpositive rate")));
                }
            }
            Some(TokenLayer { processors: self.processors, token_processors })
        };

        Ok(SystemSpec {
            kind,
            classes: self.classes,
            servers: self.servers,
            class_servers,
            server_classes,
            links,
            token_layer,
        })
    }
}

fn unique_index<'a>(ids: impl Iterator<Item = &'a str>, what: &str) -> Result<HashMap<&'a str, usize>> {
    let mut map = HashMap::new();
    for (i, id) in ids.enumerate() {
        if id.is_empty() {
            return Err(Error::Validation(format!("empty {what} id")));
        }
        if map.insert(id, i).is_some() {
            return Err(Error::Validation(format!("duplicate {what} id {id:?}")));
        }
    }
    Ok(map)
}

impl SystemSpec {
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    /// The same system reinterpreted under another model kind.
    pub fn with_kind(&self, kind: ModelKind) -> Result<SystemSpec> {
        let mut b = SystemBuilder::new(kind);
        for c in &self.classes {
            b = b.class_rate(&c.id, c.arrival.clone(), c.abandonment.clone());
        }
        for s in &self.servers {
            b = b.server_rate(&s.id, s.rate.clone(), s.abandonment.clone());
        }
        for (i, set) in self.class_servers.iter().enumerate() {
            for s in set.iter() {
                b = b.edge(&self.classes[i].id, &self.servers[s].id);
            }
        }
        for (i, set) in self.links.iter().enumerate() {
            for k in set.iter().filter(|&k| k > i) {
                b = b.link(&self.classes[i].id, &self.classes[k].id);
            }
        }
        if let Some(layer) = &self.token_layer {
            for (id, r) in &layer.processors {
                b = b.processor_rate(id, r.clone());
            }
            for (t, set) in layer.token_processors.iter().enumerate() {
                for p in set.iter() {
                    b = b.token_edge(&self.servers[t].id, &layer.processors[p].0);
                }
            }
        }
        b.build()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_servers(&self) -> usize {
        self.servers.len()
    }

    pub fn classes(&self) -> &[JobClass] {
        &self.classes
    }

    pub fn servers(&self) -> &[Server] {
        &self.servers
    }

    pub fn token_layer(&self) -> Option<&TokenLayer> {
        self.token_layer.as_ref()
    }

    pub fn class_index(&self, id: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.id == id)
    }

    pub fn server_index(&self, id: &str) -> Option<usize> {
        self.servers.iter().position(|s| s.id == id)
    }

    pub fn all_classes(&self) -> BitSet {
        BitSet::full(self.classes.len())
    }

    pub fn all_servers(&self) -> BitSet {
        BitSet::full(self.servers.len())
    }

    pub fn arrival(&self, class: usize) -> f64 {
        self.classes[class].arrival.value()
    }

    pub fn service(&self, server: usize) -> f64 {
        self.servers[server].rate.value()
    }

    pub fn class_abandonment(&self, class: usize) -> f64 {
        self.classes[class].abandonment.as_ref().map_or(0.0, Rate::value)
    }

    pub fn server_abandonment(&self, server: usize) -> f64 {
        self.servers[server].abandonment.as_ref().map_or(0.0, Rate::value)
    }

    /// Servers compatible with class `class`.
    pub fn class_servers(&self, class: usize) -> BitSet {
        self.class_servers[class]
    }

    /// Classes compatible with server `server`.
    pub fn server_classes(&self, server: usize) -> BitSet {
        self.server_classes[server]
    }

    /// Agent classes compatible with agent class `class` (matching on a general graph).
    pub fn links(&self, class: usize) -> BitSet {
        self.links.get(class).copied().unwrap_or_default()
    }

    /// Servers compatible with at least one class of `classes`.
    pub fn servers_of(&self, classes: BitSet) -> BitSet {
        classes.iter().fold(BitSet::EMPTY, |s, i| s.union(self.class_servers[i]))
    }

    /// Classes compatible with at least one server of `servers`.
    pub fn classes_of(&self, servers: BitSet) -> BitSet {
        servers.iter().fold(BitSet::EMPTY, |s, j| s.union(self.server_classes[j]))
    }

    /// Classes all of whose compatible servers lie in `servers`.
    pub fn classes_within(&self, servers: BitSet) -> BitSet {
        self.all_classes().difference(self.classes_of(self.all_servers().difference(servers)))
    }

    /// Agent classes compatible with at least one agent of `classes`.
    pub fn linked_to(&self, classes: BitSet) -> BitSet {
        classes.iter().fold(BitSet::EMPTY, |s, i| s.union(self.links(i)))
    }

    pub fn arrival_rate(&self, classes: BitSet) -> f64 {
        classes.iter().map(|i| self.arrival(i)).sum()
    }

    pub fn service_rate(&self, servers: BitSet) -> f64 {
        servers.iter().map(|j| self.service(j)).sum()
    }

    pub fn exact_arrival_rate(&self, classes: BitSet) -> BigRational {
        classes.iter().fold(BigRational::zero(), |acc, i| acc + self.classes[i].arrival.exact())
    }

    pub fn exact_service_rate(&self, servers: BitSet) -> BigRational {
        servers.iter().fold(BigRational::zero(), |acc, j| acc + self.servers[j].rate.exact())
    }

    pub fn total_arrival(&self) -> f64 {
        self.arrival_rate(self.all_classes())
    }

    pub fn total_service(&self) -> f64 {
        self.service_rate(self.all_servers())
    }

    /// Rate at which a set of busy tokens is served: pooled processors when a
    /// token layer is present, otherwise the sum of the token rates.
    pub fn token_service_rate(&self, tokens: BitSet) -> f64 {
        match &self.token_layer {
            Some(layer) => {
                let procs = tokens.iter().fold(BitSet::EMPTY, |s, t| s.union(layer.token_processors[t]));
                procs.iter().map(|p| layer.processors[p].1.value()).sum()
            }
            None => self.service_rate(tokens),
        }
    }

    /// Arrival rate, service capacity and compatible servers of a class subset.
    pub fn subset_rates(&self, classes: BitSet) -> Result<SubsetRates> {
        if !classes.is_subset(self.all_classes()) {
            return Err(Error::Validation(format!("class subset {classes:?} refers to unknown classes")));
        }
        let servers = self.servers_of(classes);
        let service = match self.kind {
            ModelKind::TokenRais | ModelKind::ClosedToken => self.token_service_rate(servers),
            _ => self.service_rate(servers),
        };
        Ok(SubsetRates { arrival: self.arrival_rate(classes), service, servers })
    }

    /// Checks that every nonempty class subset has arrival rate strictly below
    /// the capacity of its compatible servers. For general-graph matching the
    /// check runs over independent sets of agent classes, whose arrival
    /// probability must stay below that of their neighbours.
    pub fn check_stability(&self) -> Result<StabilityReport> {
        let j = self.num_classes();
        match self.kind {
            ModelKind::ClosedToken => {
                return Err(Error::Unsupported("the closed token model is finite and has no stability condition".into()))
            }
            ModelKind::Dbma => {
                return Err(Error::Unsupported("the model with abandonments is stable for all rates".into()))
            }
            _ => {}
        }
        if j > STABILITY_CLASS_CAP {
            return Err(Error::SizeCap { what: "classes for stability enumeration".into(), size: j, cap: STABILITY_CLASS_CAP });
        }
        let pbm = self.kind == ModelKind::Pbm;
        let (lam_total, mu_total) = (self.total_arrival(), self.total_service());
        let mut worst = BitSet::EMPTY;
        let mut margin = f64::INFINITY;
        let mut max_load: f64 = 0.0;
        for a in self.all_classes().subsets().skip(1) {
            if pbm && a == self.all_classes() {
                continue;
            }
            if self.kind == ModelKind::Gm {
                let others = self.linked_to(a);
                if !others.is_disjoint(a) {
                    continue;
                }
                let (arr, cap) = (self.arrival_rate(a), self.arrival_rate(others));
                if cap - arr < margin || (cap - arr == margin && a.0 < worst.0) {
                    margin = cap - arr;
                    worst = a;
                }
                max_load = max_load.max(arr / cap);
                continue;
            }
            let r = self.subset_rates(a)?;
            let (arr, cap) = if pbm {
                (r.arrival / lam_total, r.service / mu_total)
            } else {
                (r.arrival, r.service)
            };
            let m = cap - arr;
            if m < margin || (m == margin && a.0 < worst.0) {
                margin = m;
                worst = a;
            }
            max_load = max_load.max(arr / cap);
        }
        if margin == f64::INFINITY {
            margin = 1.0;
        }
        Ok(StabilityReport { stable: margin > 0.0, worst, margin, max_load })
    }

    /// Returns an instability error naming the worst subset, or the report.
    pub fn require_stable(&self) -> Result<StabilityReport> {
        let report = self.check_stability()?;
        if !report.stable {
            return Err(Error::Unstable { witness: self.class_labels(report.worst), margin: report.margin });
        }
        Ok(report)
    }

    /// Removes the servers in `servers` together with every class compatible
    /// with any of them. Servers left without a compatible class are dropped.
    pub fn reduce_servers(&self, servers: BitSet) -> Result<SystemSpec> {
        let gone = self.classes_of(servers);
        self.restrict(self.all_classes().difference(gone))
    }

    /// Removes the classes in `classes`. Servers left without a compatible
    /// class are dropped.
    pub fn remove_classes(&self, classes: BitSet) -> Result<SystemSpec> {
        self.restrict(self.all_classes().difference(classes))
    }

    /// Keeps only the classes in `keep` and the servers they use.
    pub fn restrict(&self, keep: BitSet) -> Result<SystemSpec> {
        if !self.kind.is_bipartite() {
            return Err(Error::Unsupported("reductions apply to bipartite systems".into()));
        }
        if keep.is_empty() {
            return Err(Error::Validation("reduction leaves no classes".into()));
        }
        let servers = self.servers_of(keep);
        let mut b = SystemBuilder::new(self.kind);
        for i in keep.iter() {
            let c = &self.classes[i];
            b = b.class_rate(&c.id, c.arrival.clone(), c.abandonment.clone());
        }
        for j in servers.iter() {
            let s = &self.servers[j];
            b = b.server_rate(&s.id, s.rate.clone(), s.abandonment.clone());
        }
        for i in keep.iter() {
            for j in self.class_servers[i].iter() {
                b = b.edge(&self.classes[i].id, &self.servers[j].id);
            }
        }
        if let Some(layer) = &self.token_layer {
            for (id, r) in &layer.processors {
                b = b.processor_rate(id, r.clone());
            }
            for j in servers.iter() {
                for p in layer.token_processors[j].iter() {
                    b = b.token_edge(&self.servers[j].id, &layer.processors[p].0);
                }
            }
        }
        b.build()
    }

    /// Merges servers with identical compatible class sets into a single
    /// server whose rate is the sum. Only valid for collaborative service.
    pub fn merge_equivalent_servers(&self) -> Result<SystemSpec> {
        if self.kind != ModelKind::Collaborative {
            return Err(Error::Unsupported("servers can only be merged under collaborative service".into()));
        }
        let mut groups: Vec<(BitSet, Vec<usize>)> = Vec::new();
        for (j, c) in self.server_classes.iter().enumerate() {
            match groups.iter_mut().find(|g| g.0 == *c) {
                Some(g) => g.1.push(j),
                None => groups.push((*c, vec![j])),
            }
        }
        let mut b = SystemBuilder::new(self.kind);
        for c in &self.classes {
            b = b.class_rate(&c.id, c.arrival.clone(), c.abandonment.clone());
        }
        for (classes, members) in &groups {
            let id = members.iter().map(|&j| self.servers[j].id.as_str()).collect::<Vec<_>>().join("+");
            let rate = members.iter().fold(BigRational::zero(), |acc, &j| acc + self.servers[j].rate.exact());
            b = b.server_rate(&id, Rate::from_rational(rate)?, None);
            for i in classes.iter() {
                b = b.edge(&self.classes[i].id, &id);
            }
        }
        b.build()
    }

    pub fn class_labels(&self, classes: BitSet) -> Vec<String> {
        classes.iter().map(|i| self.classes[i].id.clone()).collect()
    }

    pub fn server_labels(&self, servers: BitSet) -> Vec<String> {
        servers.iter().map(|j| self.servers[j].id.clone()).collect()
    }

    pub fn class_set(&self, ids: &[&str]) -> Result<BitSet> {
        ids.iter().try_fold(BitSet::EMPTY, |s, id| {
            self.class_index(id)
                .map(|i| s.with(i))
                .ok_or_else(|| Error::Validation(format!("unknown class {id:?}")))
        })
    }

    pub fn server_set(&self, ids: &[&str]) -> Result<BitSet> {
        ids.iter().try_fold(BitSet::EMPTY, |s, id| {
            self.server_index(id)
                .map(|j| s.with(j))
                .ok_or_else(|| Error::Validation(format!("unknown server {id:?}")))
        })
    }

    pub fn class_ids(&self, ids: &[&str]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| self.class_index(id).ok_or_else(|| Error::Validation(format!("unknown class {id:?}"))))
            .collect()
    }

    pub fn server_ids(&self, ids: &[&str]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| self.server_index(id).ok_or_else(|| Error::Validation(format!("unknown server {id:?}"))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

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

    #[test]
    fn rational_parsing() {
        assert_eq!(parse_rational("0.3").unwrap(), BigRational::new(3.into(), 10.into()));
        assert_eq!(parse_rational("1e-3").unwrap(), BigRational::new(1.into(), 1000.into()));
        assert_eq!(parse_rational("2.5E2").unwrap(), BigRational::from_integer(250.into()));
        assert_eq!(parse_rational("1/3").unwrap(), BigRational::new(1.into(), 3.into()));
        assert_eq!(parse_rational("-.5").unwrap(), BigRational::new((-1).into(), 2.into()));
        assert!(parse_rational("abc").is_none());
        assert!(parse_rational("1/0").is_none());
        assert_eq!(Rate::new(0.1).unwrap().exact(), &BigRational::new(1.into(), 10.into()));
    }

    #[test]
    fn subsets_cover_power_set() {
        let all: Vec<_> = BitSet(0b1011).subsets().collect();
        assert_eq!(all.len(), 8);
        assert!(all.iter().all(|s| s.is_subset(BitSet(0b1011))));
        assert_eq!(BitSet::EMPTY.subsets().count(), 1);
    }

    #[test]
    fn w_model_set_functions() {
        let w = w_model();
        let r = w.subset_rates(BitSet::from_indices([0, 2])).unwrap();
        assert!((r.arrival - 0.8).abs() < 1e-15);
        assert_eq!(r.service, 2.0);
        assert_eq!(w.classes_within(BitSet::single(0)), BitSet::single(0));
        assert_eq!(w.classes_within(w.all_servers()), w.all_classes());
        let report = w.check_stability().unwrap();
        assert!(report.stable);
    }

    #[test]
    fn unstable_witness() {
        let w = SystemBuilder::new(ModelKind::Collaborative)
            .class("1", 1.1)
            .class("2", 0.3)
            .class("3", 0.5)
            .server("1", 1.0)
            .server("2", 1.0)
            .edge("1", "1")
            .edge("2", "2")
            .edges("3", &["1", "2"])
            .build()
            .unwrap();
        let report = w.check_stability().unwrap();
        assert!(!report.stable);
        assert_eq!(report.worst, BitSet::single(0));
        assert!((report.margin + 0.1).abs() < 1e-12);
        match w.require_stable() {
            Err(Error::Unstable { witness, .. }) => assert_eq!(witness, vec!["1".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reduction_removes_touching_classes() {
        let w = w_model();
        let r = w.reduce_servers(BitSet::single(1)).unwrap();
        assert_eq!(r.num_classes(), 1);
        assert_eq!(r.num_servers(), 1);
        assert_eq!(r.classes()[0].id, "1");
        assert_eq!(r.servers()[0].id, "1");
    }

    #[test]
    fn validation_errors() {
        let e = SystemBuilder::new(ModelKind::Collaborative).class("1", 1.0).server("1", 1.0).build();
        assert!(matches!(e, Err(Error::Validation(_))));
        let e = SystemBuilder::new(ModelKind::Collaborative).class("1", 1.0).server("1", 1.0).edge("1", "9").build();
        assert!(matches!(e, Err(Error::Validation(_))));
        let e = SystemBuilder::new(ModelKind::Collaborative)
            .class("1", 1.0)
            .class("1", 1.0)
            .server("1", 1.0)
            .edge("1", "1")
            .build();
        assert!(matches!(e, Err(Error::Validation(_))));
        let e = SystemBuilder::new(ModelKind::Collaborative).class("1", -1.0).server("1", 1.0).edge("1", "1").build();
        assert!(matches!(e, Err(Error::Validation(_))));
    }

    #[test]
    fn merging_identical_servers() {
        let s = SystemBuilder::new(ModelKind::Collaborative)
            .class("1", 0.5)
            .server("a", 1.0)
            .server("b", 2.0)
            .edges("1", &["a", "b"])
            .build()
            .unwrap();
        let m = s.merge_equivalent_servers().unwrap();
        assert_eq!(m.num_servers(), 1);
        assert_eq!(m.servers()[0].id, "a+b");
        assert_eq!(m.service(0), 3.0);
    }
}
