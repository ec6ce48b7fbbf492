//! Configuration documents.

use std::path::PathBuf;

use serde::Deserialize;
use skillq::model::{ModelKind, Rate, SystemBuilder, SystemSpec};
use skillq::sim::{RecordFlags, SimConfig};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub version: u32,
    pub system: SystemBlock,
    #[serde(default)]
    pub analysis: AnalysisBlock,
    #[serde(default)]
    pub simulation: SimulationBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub kind: String,
    /// Server buffer for the `dbm_k` kind.
    pub k: Option<usize>,
    pub classes: Vec<ClassEntry>,
    #[serde(default)]
    pub servers: Vec<ServerEntry>,
    /// Compatible agent class pairs for the `gm` kind.
    #[serde(default)]
    pub links: Vec<[String; 2]>,
    #[serde(default)]
    pub processors: Vec<ProcessorEntry>,
}

/// A rate given as a number or as text such as `"3/10"`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum RateValue {
    Number(f64),
    Text(String),
}

impl RateValue {
    fn rate(&self) -> Result<Rate, CliError> {
        Ok(match self {
            RateValue::Number(v) => Rate::new(*v)?,
            RateValue::Text(t) => Rate::parse(t)?,
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: String,
    pub arrival: RateValue,
    pub abandonment: Option<RateValue>,
    #[serde(default)]
    pub servers: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerEntry {
    pub id: String,
    pub rate: RateValue,
    pub abandonment: Option<RateValue>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessorEntry {
    pub id: String,
    pub rate: RateValue,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Collaborative,
    NcAllBusy,
    NcGivenBusy,
    NcEqualRates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusySource {
    /// Busy-set probabilities from the truncated generator.
    Exact,
    /// Busy-set probabilities estimated by simulation.
    Simulated,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisBlock {
    /// Tolerance for verification checks.
    pub tolerance: f64,
    /// Relative tail allowed when normalizing infinite state spaces.
    pub normalization_tolerance: f64,
    /// Largest relative gap allowed between the generator solution and the product form.
    pub generator_tolerance: f64,
    /// Truncation level for generator solves and balance sweeps.
    pub truncation: usize,
    /// Detailed states to evaluate, written like `(1,3;2)`.
    pub states: Vec<String>,
    /// Per-class count vectors to evaluate.
    pub counts: Vec<Vec<u32>>,
    pub response: ResponseKind,
    /// Busy servers for the `nc_given_busy` response model.
    pub busy: Vec<String>,
    pub busy_weights: BusySource,
    pub quantiles: Vec<f64>,
    /// Times at which response survival functions are evaluated.
    pub points: Vec<f64>,
    /// Path to an exported activation table to use instead of building one.
    pub table: Option<PathBuf>,
    /// Path the `activation` command writes its table to.
    pub export: Option<PathBuf>,
    /// Largest number of state records printed by `simulate`.
    pub max_states: usize,
    /// Whether `validate` also compares a simulation run with the product form.
    pub simulation_check: bool,
    /// Largest total variation distance accepted by that comparison.
    pub tv_tolerance: f64,
}

impl Default for AnalysisBlock {
    fn default() -> Self {
        AnalysisBlock {
            tolerance: 1e-10,
            normalization_tolerance: 1e-10,
            generator_tolerance: 1e-9,
            truncation: 8,
            states: Vec::new(),
            counts: Vec::new(),
            response: ResponseKind::Collaborative,
            busy: Vec::new(),
            busy_weights: BusySource::Exact,
            quantiles: vec![0.5, 0.9, 0.99],
            points: Vec::new(),
            table: None,
            export: None,
            max_states: 50,
            simulation_check: true,
            tv_tolerance: 0.01,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationBlock {
    pub seed: u64,
    /// Defaults to a tenth of the horizon.
    pub warmup: Option<f64>,
    pub horizon: f64,
    pub replications: usize,
    pub sample_stride: usize,
    pub max_samples: usize,
    pub queue_cap: usize,
    pub threads: Option<usize>,
    pub record: RecordFlags,
    /// Writes the events of the first replication to this file.
    pub event_log: Option<PathBuf>,
}

impl Default for SimulationBlock {
    fn default() -> Self {
        let d = SimConfig::default();
        SimulationBlock {
            seed: d.seed,
            warmup: None,
            horizon: d.horizon,
            replications: d.replications,
            sample_stride: d.sample_stride,
            max_samples: d.max_samples,
            queue_cap: d.queue_cap,
            threads: None,
            record: d.record,
            event_log: None,
        }
    }
}

impl SimulationBlock {
    pub fn config(&self, default_threads: usize) -> SimConfig {
        SimConfig {
            seed: self.seed,
            warmup: self.warmup.unwrap_or(self.horizon / 10.0),
            horizon: self.horizon,
            replications: self.replications,
            record: self.record,
            sample_stride: self.sample_stride,
            max_samples: self.max_samples,
            queue_cap: self.queue_cap,
            threads: self.threads.unwrap_or(default_threads),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    /// One JSON object per line.
    Records,
    /// Aligned text columns.
    Table,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub format: Format,
    /// Significant digits in table output.
    pub precision: usize,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { format: Format::Records, precision: 6 }
    }
}

pub fn parse_kind(name: &str, k: Option<usize>) -> Result<ModelKind, CliError> {
    let kind = match name {
        "collaborative" => ModelKind::Collaborative,
        "nc_alis" => ModelKind::NcAlis,
        "nc_rais" => ModelKind::NcRais,
        "token_rais" => ModelKind::TokenRais,
        "closed_token" => ModelKind::ClosedToken,
        "dbm" => ModelKind::Dbm,
        "dbm_k" => ModelKind::DbmK(k.ok_or_else(|| CliError::Config("kind dbm_k needs the buffer size k".into()))?),
        "dbma" => ModelKind::Dbma,
        "gm" => ModelKind::Gm,
        "pbm" => ModelKind::Pbm,
        other => return Err(CliError::Config(format!("unknown system kind {other:?}"))),
    };
    if k.is_some() && name != "dbm_k" {
        return Err(CliError::Config("k is only meaningful for the dbm_k kind".into()));
    }
    Ok(kind)
}

impl ConfigDocument {
    /// Parses a document after applying `key.path=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let doc: ConfigDocument = value.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if doc.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {}, expected {CONFIG_VERSION}",
                doc.version
            )));
        }
        Ok(doc)
    }

    pub fn build_system(&self) -> Result<SystemSpec, CliError> {
        let s = &self.system;
        let kind = parse_kind(&s.kind, s.k)?;
        let mut b = SystemBuilder::new(kind);
        for c in &s.classes {
            let abandonment = c.abandonment.as_ref().map(RateValue::rate).transpose()?;
            b = b.class_rate(&c.id, c.arrival.rate()?, abandonment);
        }
        for v in &s.servers {
            let abandonment = v.abandonment.as_ref().map(RateValue::rate).transpose()?;
            b = b.server_rate(&v.id, v.rate.rate()?, abandonment);
        }
        for c in &s.classes {
            for v in &c.servers {
                b = b.edge(&c.id, v);
            }
        }
        for [x, y] in &s.links {
            b = b.link(x, y);
        }
        for p in &s.processors {
            b = b.processor_rate(&p.id, p.rate.rate()?);
            for t in &p.tokens {
                b = b.token_edge(t, &p.id);
            }
        }
        Ok(b.build()?)
    }
}

fn apply_override(doc: &mut toml::Value, text: &str) -> Result<(), CliError> {
    let (path, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {text:?} is not of the form key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let bad = || CliError::Config(format!("override path {path:?} does not name a config entry"));
    let (last, parents) = keys.split_last().ok_or_else(bad)?;
    let mut cur = doc;
    for key in parents {
        cur = match cur {
            toml::Value::Table(t) => t.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new())),
            toml::Value::Array(a) => key.parse::<usize>().ok().and_then(|i| a.get_mut(i)).ok_or_else(bad)?,
            _ => return Err(bad()),
        };
    }
    match cur {
        toml::Value::Table(t) => {
            t.insert(last.to_string(), value);
        }
        toml::Value::Array(a) => *last.parse::<usize>().ok().and_then(|i| a.get_mut(i)).ok_or_else(bad)? = value,
        _ => return Err(bad()),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const W: &str = r#"
version = 1
[system]
kind = "collaborative"
classes = [
  { id = "1", arrival = 0.3, servers = ["1"] },
  { id = "2", arrival = "3/10", servers = ["2"] },
  { id = "3", arrival = 0.5, servers = ["1", "2"] },
]
servers = [{ id = "1", rate = 1 }, { id = "2", rate = 1.0 }]
"#;

    #[test]
    fn parses_and_builds() {
        let doc = ConfigDocument::parse(W, &[]).unwrap();
        let spec = doc.build_system().unwrap();
        assert_eq!(spec.num_classes(), 3);
        assert_eq!(spec.arrival(1), 0.3);
        assert_eq!(doc.analysis.tolerance, 1e-10);
    }

    #[test]
    fn overrides_reach_tables_and_arrays() {
        let o = vec!["system.classes.0.arrival=1.1".to_string(), "analysis.truncation=4".to_string()];
        let doc = ConfigDocument::parse(W, &o).unwrap();
        assert_eq!(doc.build_system().unwrap().arrival(0), 1.1);
        assert_eq!(doc.analysis.truncation, 4);
        let doc = ConfigDocument::parse(W, &["system.kind=nc_alis".to_string()]).unwrap();
        assert_eq!(doc.system.kind, "nc_alis");
        assert!(ConfigDocument::parse(W, &["system.classes.7.arrival=1".to_string()]).is_err());
    }

    #[test]
    fn unknown_keys_and_versions_rejected() {
        assert!(ConfigDocument::parse(&format!("{W}\n[analysis]\ntolerence = 1e-9\n"), &[]).is_err());
        assert!(ConfigDocument::parse(&W.replace("version = 1", "version = 2"), &[]).is_err());
    }

    #[test]
    fn kind_parameters() {
        assert_eq!(parse_kind("dbm_k", Some(2)).unwrap(), ModelKind::DbmK(2));
        assert!(parse_kind("dbm_k", None).is_err());
        assert!(parse_kind("dbm", Some(2)).is_err());
        assert!(parse_kind("fifo", None).is_err());
    }
}
