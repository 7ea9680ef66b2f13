//! Experiment configuration: a TOML file read as flat dotted keys, with
//! `--set key=value` overrides applied on top.
//!
//! Vector-valued model fields accept a scalar, which is broadcast to every
//! asset (or every pair for correlation bounds).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;
use uvm_core::correlation::pair_count;
use uvm_core::gpr::KernelKind;
use uvm_core::{AlgoParams, ModelSpec, PayoffSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => err(format!("output.format: expected \"csv\" or \"json\", got {other:?}")),
        }
    }
}

/// Fully resolved experiment; the hash of its JSON form tags every output row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub payoff: PayoffSpec,
    pub steps: Vec<usize>,
    pub points: Vec<usize>,
    pub branches: Option<usize>,
    pub seed: u64,
    pub kernel: Option<KernelKind>,
    pub warm_start: bool,
    /// Lattice steps for one-dimensional benchmarks.
    pub bench_steps: usize,
    /// Engine settings for benchmarks that are themselves engine runs.
    pub bench_engine_steps: usize,
    pub bench_engine_points: usize,
    pub output_path: Option<String>,
    pub format: Format,
}

impl ExperimentConfig {
    pub fn algo(&self, steps: usize, points: usize) -> AlgoParams {
        AlgoParams {
            steps,
            points,
            branches: self.branches,
            seed: self.seed,
            kernel: self.kernel,
            warm_start: self.warm_start,
            ..AlgoParams::default()
        }
    }

    /// SHA-256 of the experiment's JSON form; where the output goes is not
    /// part of the experiment.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_path = None;
        c.format = Format::Csv;
        let canonical = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }
}

/// Keys accepted in the config file and in `--set`.
const KNOWN_KEYS: &[&str] = &[
    "mode",
    "model.dim",
    "model.spot",
    "model.rate",
    "model.dividends",
    "model.sigma_min",
    "model.sigma_max",
    "model.rho_min",
    "model.rho_max",
    "model.maturity",
    "payoff.kind",
    "payoff.lo",
    "payoff.hi",
    "payoff.k1",
    "payoff.k2",
    "payoff.strike",
    "payoff.months",
    "algo.steps",
    "algo.points",
    "algo.branches",
    "algo.seed",
    "algo.kernel",
    "algo.warm_start",
    "bench.steps",
    "bench.engine_steps",
    "bench.engine_points",
    "output.path",
    "output.format",
];

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Parses TOML text into a flat key map.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, Value>, ConfigError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError(format!("config is not valid TOML: {}", e.message())))?;
    let mut out = BTreeMap::new();
    flatten("", &Value::Table(table), &mut out);
    Ok(out)
}

/// Parses `key=value`, reading the value as TOML and falling back to a bare string.
pub fn parse_override(item: &str) -> Result<(String, Value), ConfigError> {
    let Some((key, raw)) = item.split_once('=') else {
        return err(format!("--set expects key=value, got {item:?}"));
    };
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key, value))
}

struct Lookup<'a> {
    map: &'a BTreeMap<String, Value>,
}

impl Lookup<'_> {
    fn get(&self, key: &str) -> Option<&Value> {
        self.map.get(key)
    }

    fn float(&self, key: &str, default: Option<f64>) -> Result<f64, ConfigError> {
        match self.get(key) {
            None => default.map_or_else(|| err(format!("{key}: required")), Ok),
            Some(v) => as_float(key, v),
        }
    }

    fn uint(&self, key: &str, default: Option<u64>) -> Result<u64, ConfigError> {
        match self.get(key) {
            None => default.map_or_else(|| err(format!("{key}: required")), Ok),
            Some(v) => as_uint(key, v),
        }
    }

    fn string(&self, key: &str) -> Result<Option<String>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(other) => err(format!("{key}: expected a string, got {other}")),
        }
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(*b),
            Some(other) => err(format!("{key}: expected true or false, got {other}")),
        }
    }

    /// Scalar broadcast to `len`, or a list of exactly `len` numbers.
    fn vector(&self, key: &str, len: usize, default: f64) -> Result<Vec<f64>, ConfigError> {
        match self.get(key) {
            None => Ok(vec![default; len]),
            Some(Value::Array(a)) => {
                if a.len() != len {
                    return err(format!("{key}: expected {len} values, got {}", a.len()));
                }
                a.iter().map(|v| as_float(key, v)).collect()
            }
            Some(v) => Ok(vec![as_float(key, v)?; len]),
        }
    }

    /// Scalar or non-empty list of positive integers.
    fn uint_list(&self, key: &str, default: usize) -> Result<Vec<usize>, ConfigError> {
        let list = match self.get(key) {
            None => vec![default],
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| as_uint(key, v).map(|u| u as usize))
                .collect::<Result<_, _>>()?,
            Some(v) => vec![as_uint(key, v)? as usize],
        };
        if list.is_empty() {
            return err(format!("{key}: list must not be empty"));
        }
        if list.contains(&0) {
            return err(format!("{key}: values must be positive"));
        }
        Ok(list)
    }
}

fn as_float(key: &str, v: &Value) -> Result<f64, ConfigError> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => err(format!("{key}: expected a number, got {other}")),
    }
}

fn as_uint(key: &str, v: &Value) -> Result<u64, ConfigError> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        other => err(format!("{key}: expected a non-negative integer, got {other}")),
    }
}

/// Merges file keys and overrides and resolves them into a validated config.
pub fn resolve(
    file: BTreeMap<String, Value>,
    overrides: Vec<(String, Value)>,
) -> Result<ExperimentConfig, ConfigError> {
    let mut map = file;
    for (k, v) in overrides {
        map.insert(k, v);
    }
    for k in map.keys() {
        if !KNOWN_KEYS.contains(&k.as_str()) {
            return err(format!("{k}: unknown key"));
        }
    }
    let l = Lookup { map: &map };

    let dim = match l.get("model.dim") {
        Some(v) => as_uint("model.dim", v)? as usize,
        None => match l.get("model.spot") {
            Some(Value::Array(a)) => a.len(),
            _ => return err("model.dim: required unless model.spot is a list"),
        },
    };
    if dim == 0 {
        return err("model.dim: must be positive");
    }
    let np = pair_count(dim);
    let model = ModelSpec {
        spot: l.vector("model.spot", dim, 100.0)?,
        rate: l.float("model.rate", Some(0.0))?,
        dividends: l.vector("model.dividends", dim, 0.0)?,
        sigma_min: l.vector("model.sigma_min", dim, 0.1)?,
        sigma_max: l.vector("model.sigma_max", dim, 0.2)?,
        rho_min: l.vector("model.rho_min", np, -0.5)?,
        rho_max: l.vector("model.rho_max", np, 0.5)?,
        maturity: l.float("model.maturity", Some(1.0))?,
    };
    model.validate().map_err(|e| ConfigError(format!("model: {e}")))?;

    let kind = l.string("payoff.kind")?.ok_or_else(|| ConfigError("payoff.kind: required".into()))?;
    let payoff = match kind.as_str() {
        "outperformer" => PayoffSpec::Outperformer,
        "outperformer_spread" => PayoffSpec::OutperformerSpread {
            lo: l.float("payoff.lo", Some(0.9))?,
            hi: l.float("payoff.hi", Some(1.1))?,
        },
        "geo_call_spread" => PayoffSpec::GeoCallSpread {
            k1: l.float("payoff.k1", Some(90.0))?,
            k2: l.float("payoff.k2", Some(110.0))?,
        },
        "geo_outperformer" => PayoffSpec::GeoOutperformer,
        "call_sharpe" => PayoffSpec::CallSharpe {
            strike: l.float("payoff.strike", Some(100.0))?,
            months: l.uint("payoff.months", Some((12.0 * model.maturity).round() as u64))? as usize,
        },
        "call" => PayoffSpec::Call {
            strike: l.float("payoff.strike", Some(100.0))?,
        },
        other => {
            return err(format!(
                "payoff.kind: unknown payoff {other:?} (expected outperformer, outperformer_spread, \
                 geo_call_spread, geo_outperformer, call_sharpe or call)"
            ))
        }
    };
    payoff.validate(&model).map_err(|e| ConfigError(format!("payoff: {e}")))?;

    let kernel = match l.string("algo.kernel")?.as_deref() {
        None => None,
        Some("matern32") => Some(KernelKind::Matern32),
        Some("matern32_ard") => Some(KernelKind::Matern32Ard),
        Some(other) => return err(format!("algo.kernel: expected \"matern32\" or \"matern32_ard\", got {other:?}")),
    };
    let branches = match l.get("algo.branches") {
        None => None,
        Some(v) => Some(as_uint("algo.branches", v)? as usize),
    };
    let format = match l.string("output.format")? {
        None => Format::Csv,
        Some(s) => s.parse()?,
    };
    if let Some(mode) = l.string("mode")? {
        if !["price", "sweep", "bench"].contains(&mode.as_str()) {
            return err(format!("mode: expected price, sweep or bench, got {mode:?}"));
        }
    }

    let cfg = ExperimentConfig {
        model,
        payoff,
        steps: l.uint_list("algo.steps", 16)?,
        points: l.uint_list("algo.points", 125)?,
        branches,
        seed: l.uint("algo.seed", Some(0))?,
        kernel,
        warm_start: l.bool("algo.warm_start", true)?,
        bench_steps: l.uint("bench.steps", Some(2000))? as usize,
        bench_engine_steps: l.uint("bench.engine_steps", Some(128))? as usize,
        bench_engine_points: l.uint("bench.engine_points", Some(1000))? as usize,
        output_path: l.string("output.path")?,
        format,
    };
    for &n in &cfg.steps {
        for &p in &cfg.points {
            check_algo(&cfg, n, p)?;
        }
    }
    Ok(cfg)
}

fn check_algo(cfg: &ExperimentConfig, steps: usize, _points: usize) -> Result<(), ConfigError> {
    if let PayoffSpec::CallSharpe { months, .. } = cfg.payoff {
        if steps % months != 0 {
            return err(format!("algo.steps: {steps} is not a multiple of payoff.months = {months}"));
        }
    } else if let Some(m) = cfg.branches {
        let d = cfg.model.dim();
        let full = if d < 63 { 1u64 << d } else { u64::MAX };
        if m < 2 || m % 2 == 1 || m as u64 > full {
            return err(format!("algo.branches: must be even and between 2 and 2^{d}, got {m}"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> Result<ExperimentConfig, ConfigError> {
        resolve(parse_flat(text).unwrap(), vec![])
    }

    #[test]
    fn scalars_broadcast_and_tables_flatten() {
        let c = cfg("[model]\ndim = 3\nsigma_max = 0.25\n[payoff]\nkind = \"geo_outperformer\"\n").unwrap();
        assert_eq!(c.model.sigma_max, vec![0.25; 3]);
        assert_eq!(c.model.rho_min, vec![-0.5; 3]);
        let d = cfg("model.dim = 3\nmodel.sigma_max = 0.25\npayoff.kind = \"geo_outperformer\"\n").unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn overrides_take_precedence() {
        let file = parse_flat("model.dim = 2\npayoff.kind = \"outperformer\"\nalgo.steps = 16\n").unwrap();
        let c = resolve(
            file,
            vec![
                parse_override("algo.steps=[16, 32]").unwrap(),
                parse_override("model.rho_min = -0.5").unwrap(),
                parse_override("model.rho_max=-0.5").unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(c.steps, vec![16, 32]);
        assert_eq!(c.model.rho_max, vec![-0.5]);
    }

    #[test]
    fn bare_strings_are_accepted_in_overrides() {
        assert_eq!(parse_override("payoff.kind=call").unwrap().1, Value::String("call".into()));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn field_level_errors() {
        let e = cfg("model.dim = 2\npayoff.kind = \"outperformer\"\nmodel.sigma_min = [0.1]\n").unwrap_err();
        assert!(e.0.starts_with("model.sigma_min"), "{e}");
        let e = cfg("model.dim = 2\npayoff.kind = \"nope\"\n").unwrap_err();
        assert!(e.0.starts_with("payoff.kind"), "{e}");
        let e = cfg("model.dim = 2\npayoff.kind = \"outperformer\"\nalgo.typo = 1\n").unwrap_err();
        assert!(e.0.starts_with("algo.typo"), "{e}");
        let e = cfg("model.dim = 1\npayoff.kind = \"call_sharpe\"\nalgo.steps = 18\n").unwrap_err();
        assert!(e.0.starts_with("algo.steps"), "{e}");
    }

    #[test]
    fn hash_tracks_resolved_values() {
        let a = cfg("model.dim = 2\npayoff.kind = \"outperformer\"\n").unwrap();
        let b = cfg("model.dim = 2\npayoff.kind = \"outperformer\"\nmodel.spot = 100\n").unwrap();
        let c = cfg("model.dim = 2\npayoff.kind = \"outperformer\"\nalgo.seed = 1\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
