//! Layered TOML configuration: built-in defaults, then a config file, then
//! `--set key=value` overrides. Every key must already exist in the defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use shepherd_core::harness::{ExperimentConfig, HarnessError};
use shepherd_core::rl::PpoHyper;
use toml::{Table, Value};

use crate::CliError;

/// Name of the resolved configuration written next to every run's outputs.
pub const ECHO_FILE: &str = "config.toml";

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub experiment: ExperimentConfig,
    pub ppo: PpoHyper,
    table: Table,
}

impl Resolved {
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.table).expect("a toml table always serializes")
    }

    pub fn echo(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::write(dir.join(ECHO_FILE), self.to_toml())
    }
}

pub struct Layers<'a> {
    pub file: Option<&'a Path>,
    pub overrides: &'a [String],
    /// Applied after `overrides`; produced from dedicated flags.
    pub flags: Vec<(String, Value)>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn to_table<T: serde::Serialize>(v: &T) -> Table {
    match Value::try_from(v).expect("config types serialize to toml") {
        Value::Table(t) => t,
        _ => unreachable!("structs serialize to tables"),
    }
}

fn defaults(experiment: &ExperimentConfig, ppo: &PpoHyper) -> Table {
    let mut t = to_table(experiment);
    t.insert("ppo".into(), Value::Table(to_table(ppo)));
    t
}

/// Every addressable key, including optional ones that are absent by default.
fn schema(experiment: &ExperimentConfig, ppo: &PpoHyper) -> Table {
    let mut e = experiment.clone();
    e.checkpoints.driving = Some(PathBuf::new());
    e.checkpoints.selection = Some(PathBuf::new());
    defaults(&e, ppo)
}

fn merge(base: &mut Table, overlay: Table, schema: &Table, prefix: &str) -> Result<(), CliError> {
    for (key, value) in overlay {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        let Some(shape) = schema.get(&key) else {
            return Err(config_err(format!("unknown key `{path}`")));
        };
        match (shape, value) {
            (Value::Table(sub_schema), Value::Table(sub)) => {
                let entry = base
                    .entry(key)
                    .or_insert_with(|| Value::Table(Table::new()));
                let Value::Table(entry) = entry else {
                    unreachable!("schema and base agree")
                };
                merge(entry, sub, sub_schema, &path)?;
            }
            (Value::Table(_), _) => {
                return Err(config_err(format!("`{path}` is a section, not a value")))
            }
            (_, Value::Table(_)) => {
                return Err(config_err(format!("`{path}` is a value, not a section")))
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
    Ok(())
}

/// Parses the right-hand side of `--set`. Anything that is not a TOML value
/// is taken as a bare string, so `--set checkpoints.driving=run/driving.ckpt` works.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn nest(path: &str, value: Value) -> Result<Table, CliError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.trim().is_empty()) {
        return Err(config_err(format!("malformed key `{path}`")));
    }
    let mut v = value;
    for part in parts.iter().rev() {
        let mut t = Table::new();
        t.insert(part.trim().to_string(), v);
        v = Value::Table(t);
    }
    match v {
        Value::Table(t) => Ok(t),
        _ => unreachable!(),
    }
}

fn deserialize<'de, T: Deserialize<'de>>(value: Value, section: &str) -> Result<T, CliError> {
    T::deserialize(value).map_err(|e| {
        let msg = e.to_string();
        let msg = msg.trim();
        if section.is_empty() {
            config_err(msg.to_string())
        } else {
            config_err(format!("in `{section}`: {msg}"))
        }
    })
}

pub fn resolve(
    experiment: ExperimentConfig,
    ppo: PpoHyper,
    layers: Layers,
) -> Result<Resolved, CliError> {
    let shape = schema(&experiment, &ppo);
    let mut table = defaults(&experiment, &ppo);
    if let Some(path) = layers.file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let file: Table = toml::from_str(&text)
            .map_err(|e| config_err(format!("cannot parse {}: {e}", path.display())))?;
        merge(&mut table, file, &shape, "")?;
    }
    for item in layers.overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| config_err(format!("override `{item}` is not of the form key=value")))?;
        merge(
            &mut table,
            nest(key.trim(), parse_value(raw.trim()))?,
            &shape,
            "",
        )?;
    }
    for (key, value) in layers.flags {
        merge(&mut table, nest(&key, value)?, &shape, "")?;
    }

    let mut rest = table.clone();
    let ppo_value = rest.remove("ppo").expect("defaults contain ppo");
    let ppo: PpoHyper = deserialize(ppo_value, "ppo")?;
    let experiment: ExperimentConfig = deserialize(Value::Table(rest), "")?;
    experiment.validate().map_err(|e| match e {
        HarnessError::Config(m) => config_err(m),
        other => config_err(other.to_string()),
    })?;
    let ppo = ppo
        .validate()
        .map_err(|e| config_err(format!("ppo: {e}")))?;
    Ok(Resolved {
        experiment,
        ppo,
        table,
    })
}
