//! Flat `key = value` experiment configuration.
//!
//! Every command has a schema listing its keys, their types and defaults. Keys
//! are dotted (`refinery.tau_prime`), `#` starts a comment, lists are
//! space-separated, and a comma-separated value declares a sweep grid (only
//! valid under the `sweep` command, which names its target in `sweep.command`).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sane_core::shallow_net::Activation;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Command {
    GenData,
    Recovery,
    TrainSane,
    AnalyzeJacobian,
    Gap,
    Sweep,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::GenData,
        Command::Recovery,
        Command::TrainSane,
        Command::AnalyzeJacobian,
        Command::Gap,
        Command::Sweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Recovery => "recovery",
            Command::TrainSane => "train-sane",
            Command::AnalyzeJacobian => "analyze-jacobian",
            Command::Gap => "gap",
            Command::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown command `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Real,
    Flag,
    Reals,
    Choice(&'static [&'static str]),
}

impl Kind {
    fn describe(self) -> String {
        match self {
            Kind::Int => "a non-negative integer".into(),
            Kind::Real => "a finite number".into(),
            Kind::Flag => "`true` or `false`".into(),
            Kind::Reals => "a space-separated list of numbers".into(),
            Kind::Choice(options) => format!("one of {}", options.join(", ")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(u64),
    Real(f64),
    Flag(bool),
    Text(String),
    Reals(Vec<f64>),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Real(v) => write!(f, "{v:?}"),
            Value::Flag(v) => write!(f, "{v}"),
            Value::Text(v) => f.write_str(v),
            Value::Reals(vs) => {
                let parts: Vec<String> = vs.iter().map(|v| format!("{v:?}")).collect();
                f.write_str(&parts.join(" "))
            }
        }
    }
}

fn parse_real(raw: &str) -> Option<f64> {
    raw.parse::<f64>().ok().filter(|v| v.is_finite())
}

impl Value {
    fn parse(kind: Kind, raw: &str) -> Option<Value> {
        let raw = raw.trim();
        match kind {
            Kind::Int => raw.parse().ok().map(Value::Int),
            Kind::Real => parse_real(raw).map(Value::Real),
            Kind::Flag => raw.parse().ok().map(Value::Flag),
            Kind::Reals => raw
                .split_whitespace()
                .map(parse_real)
                .collect::<Option<Vec<_>>>()
                .map(Value::Reals),
            Kind::Choice(options) => options.contains(&raw).then(|| Value::Text(raw.to_string())),
        }
    }
}

/// One documented configuration key.
#[derive(Debug, Clone)]
pub struct KeySpec {
    pub key: &'static str,
    pub kind: Kind,
    /// `None` marks a required key.
    pub default: Option<&'static str>,
    pub doc: &'static str,
}

const fn key(key: &'static str, kind: Kind, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec {
        key,
        kind,
        default: Some(default),
        doc,
    }
}

const ACTIVATIONS: &[&str] = &["linear", "tanh", "sigmoid", "softplus"];
const SCHEDULES: &[&str] = &["ramp", "constant"];
const TARGETS: &[&str] = &["gen-data", "recovery", "train-sane", "analyze-jacobian", "gap"];

struct DataDefaults {
    centers: &'static str,
    classes: &'static str,
    n: &'static str,
    epsilon: &'static str,
    delta: &'static str,
}

const THEORY_DATA: DataDefaults = DataDefaults {
    centers: "4",
    classes: "2",
    n: "200",
    epsilon: "0",
    delta: "1.8",
};

const CONTRASTIVE_DATA: DataDefaults = DataDefaults {
    centers: "8",
    classes: "8",
    n: "160",
    epsilon: "0.3",
    delta: "0.2857142857142857",
};

fn data_keys(d: &DataDefaults) -> Vec<KeySpec> {
    vec![
        key("data.centers", Kind::Int, d.centers, "number of cluster centers K"),
        key("data.classes", Kind::Int, d.classes, "number of classes K̄"),
        key("data.dim", Kind::Int, "16", "input dimension d"),
        key("data.n", Kind::Int, d.n, "number of crops n"),
        key("data.epsilon", Kind::Real, d.epsilon, "crop radius ε around each center"),
        key("data.delta", Kind::Real, d.delta, "class value spacing δ"),
        key("data.c_lower", Kind::Real, "0.5", "lower cluster size factor c_l"),
        key("data.c_upper", Kind::Real, "2", "upper cluster size factor c_u"),
    ]
}

fn encoder_keys(similarity_defaults: (&'static str, &'static str, &'static str, &'static str)) -> Vec<KeySpec> {
    let (batch, queue, momentum, lr) = similarity_defaults;
    vec![
        key("encoder.hidden", Kind::Int, "32", "hidden width of the encoder"),
        key("encoder.feature", Kind::Int, "8", "output feature width"),
        key("encoder.activation", Kind::Choice(ACTIVATIONS), "softplus", "hidden activation"),
        key("contrastive.tau", Kind::Real, "0.2", "similarity temperature τ"),
        key(
            "contrastive.paper_sign",
            Kind::Flag,
            "false",
            "negate the similarity as in the printed loss formula",
        ),
        key("contrastive.batch", Kind::Int, batch, "queries per step s"),
        key("contrastive.queue", Kind::Int, queue, "dictionary size b"),
        key("contrastive.momentum", Kind::Real, momentum, "target EMA rate ι"),
        key("contrastive.lr", Kind::Real, lr, "SGD learning rate"),
    ]
}

/// Keys accepted by `command`, in documentation order.
pub fn schema(command: Command) -> Vec<KeySpec> {
    let seed = KeySpec {
        key: "seed",
        kind: Kind::Int,
        default: None,
        doc: "root random seed (required)",
    };
    let mut keys = vec![seed];
    match command {
        Command::GenData => {
            keys.extend(data_keys(&THEORY_DATA));
            keys.push(key("data.rho", Kind::Real, "0", "label corruption level ρ"));
        }
        Command::Recovery => {
            keys.extend(data_keys(&THEORY_DATA));
            keys.extend([
                key("data.rho", Kind::Real, "0.05", "label corruption level ρ"),
                key("net.hidden", Kind::Int, "1024", "hidden width k (even)"),
                key("net.activation", Kind::Choice(ACTIVATIONS), "softplus", "activation φ"),
                key("recovery.eta", Kind::Real, "0.05", "gradient descent step η"),
                key("recovery.iterations", Kind::Int, "3000", "iterations T"),
                key("recovery.fresh_per_center", Kind::Int, "25", "fresh test crops per center"),
                key("alpha.schedule", Kind::Choice(SCHEDULES), "ramp", "refinery weight schedule"),
                key("alpha.max", Kind::Real, "0.95", "ramp ceiling"),
                key("alpha.ramp_len", Kind::Int, "500", "iterations to reach the ceiling"),
                key("alpha.value", Kind::Real, "0", "weight for the constant schedule"),
            ]);
        }
        Command::TrainSane => {
            keys.extend(data_keys(&CONTRASTIVE_DATA));
            keys.extend(encoder_keys(("16", "128", "0.05", "0.5")));
            keys.extend([
                key("train.steps", Kind::Int, "1000", "training iterations T"),
                key("refinery.tau_prime", Kind::Real, "0.8", "sharpening τ'"),
                key("refinery.m1", Kind::Real, "0", "confidence schedule start"),
                key("refinery.m2", Kind::Real, "1", "confidence schedule end"),
                key("refinery.kappa", Kind::Real, "2", "mixup Beta parameter κ"),
                key("refinery.lambda", Kind::Real, "0.5", "mixup loss weight λ"),
            ]);
        }
        Command::AnalyzeJacobian => {
            keys.extend(data_keys(&THEORY_DATA));
            keys.extend([
                key("net.hidden", Kind::Int, "64", "hidden width k (even)"),
                key("net.activation", Kind::Choice(ACTIVATIONS), "softplus", "activation φ"),
                key("covariance.samples", Kind::Int, "100000", "Monte Carlo draws for Σ(C)"),
            ]);
        }
        Command::Gap => {
            keys.extend(data_keys(&CONTRASTIVE_DATA));
            keys.extend(encoder_keys(("20", "60", "0.1", "0.3")));
            keys.extend([
                key("gap.steps", Kind::Int, "500", "training iterations per cell"),
                key("gap.rhos", Kind::Reals, "0 0.1 0.2 0.3 0.4", "ascending noise grid"),
                key("gap.seeds", Kind::Int, "5", "seeds per grid point, counting up from `seed`"),
            ]);
        }
        Command::Sweep => {
            keys.push(KeySpec {
                key: "sweep.command",
                kind: Kind::Choice(TARGETS),
                default: None,
                doc: "command run for every grid cell",
            });
        }
    }
    keys
}

/// A validated configuration with every default filled in.
///
/// Each key maps to one value, or to several for a sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    command: Command,
    entries: BTreeMap<String, Vec<Value>>,
}

fn split_assignment(text: &str) -> Option<(&str, &str)> {
    let (k, v) = text.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then_some((k, v.trim()))
}

/// Parses a `key=value` override as given to `--set`.
pub fn parse_override(text: &str) -> Result<(String, String)> {
    split_assignment(text)
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| LabError::Config(format!("override `{text}` is not of the form key=value")))
}

impl ExperimentConfig {
    /// Parses config text, applies overrides (later ones win), validates against
    /// the command's schema and fills defaults.
    ///
    /// The command comes from `command` or from a `command = ...` line; when
    /// both are present they must agree.
    pub fn parse(text: &str, command: Option<Command>, overrides: &[(String, String)]) -> Result<Self> {
        let mut raw: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = split_assignment(content).ok_or_else(|| {
                LabError::Config(format!("line {}: expected `key = value`, got `{content}`", lineno + 1))
            })?;
            if raw.insert(k.to_string(), v.to_string()).is_some() {
                return Err(LabError::Config(format!("key `{k}` is set more than once")));
            }
        }
        for (k, v) in overrides {
            raw.insert(k.clone(), v.clone());
        }

        let command = match (raw.remove("command"), command) {
            (Some(named), Some(given)) => {
                let named: Command = named.parse()?;
                if named != given {
                    return Err(LabError::Config(format!(
                        "key `command`: file says `{named}` but `{given}` was requested"
                    )));
                }
                given
            }
            (Some(named), None) => named.parse()?,
            (None, Some(given)) => given,
            (None, None) => return Err(LabError::Config("missing required key `command`".into())),
        };

        let mut keys = schema(command);
        if command == Command::Sweep {
            let target = raw
                .get("sweep.command")
                .ok_or_else(|| LabError::Config("missing required key `sweep.command`".into()))?;
            let target: Command = target.parse()?;
            if target == Command::Sweep {
                return Err(LabError::Config("key `sweep.command`: sweeps cannot nest".into()));
            }
            keys.extend(schema(target).into_iter().filter(|k| k.key != "seed"));
        }

        let mut entries = BTreeMap::new();
        for spec in &keys {
            let text = match raw.remove(spec.key) {
                Some(text) => text,
                None => match spec.default {
                    Some(default) => default.to_string(),
                    None => return Err(LabError::Config(format!("missing required key `{}`", spec.key))),
                },
            };
            let parts: Vec<&str> = if command == Command::Sweep && spec.key != "sweep.command" {
                text.split(',').collect()
            } else {
                if text.contains(',') {
                    return Err(LabError::Config(format!(
                        "key `{}`: comma-separated grids need the sweep command",
                        spec.key
                    )));
                }
                vec![text.as_str()]
            };
            let values = parts
                .into_iter()
                .map(|p| {
                    Value::parse(spec.kind, p).ok_or_else(|| {
                        LabError::Config(format!(
                            "key `{}`: expected {}, got `{}`",
                            spec.key,
                            spec.kind.describe(),
                            p.trim()
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            entries.insert(spec.key.to_string(), values);
        }
        if let Some(unknown) = raw.keys().next() {
            return Err(LabError::Config(format!("unknown key `{unknown}` for command {command}")));
        }
        Ok(Self { command, entries })
    }

    pub fn command(&self) -> Command {
        self.command
    }

    /// The command each cell runs: `sweep.command` for sweeps, else the command.
    pub fn target(&self) -> Command {
        match self.entries.get("sweep.command").and_then(|v| v.first()) {
            Some(Value::Text(t)) => t.parse().unwrap_or(self.command),
            _ => self.command,
        }
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<Value>> {
        &self.entries
    }

    fn single(&self, key: &str) -> Result<&Value> {
        match self.entries.get(key).map(Vec::as_slice) {
            Some([v]) => Ok(v),
            Some(_) => Err(LabError::Config(format!("key `{key}` holds a sweep grid"))),
            None => Err(LabError::Config(format!("missing required key `{key}`"))),
        }
    }

    pub fn int(&self, key: &str) -> Result<u64> {
        match self.single(key)? {
            Value::Int(v) => Ok(*v),
            other => Err(LabError::Config(format!("key `{key}`: expected an integer, got `{other}`"))),
        }
    }

    pub fn count(&self, key: &str) -> Result<usize> {
        usize::try_from(self.int(key)?).map_err(|_| LabError::Config(format!("key `{key}`: value too large")))
    }

    pub fn real(&self, key: &str) -> Result<f64> {
        match self.single(key)? {
            Value::Real(v) => Ok(*v),
            other => Err(LabError::Config(format!("key `{key}`: expected a number, got `{other}`"))),
        }
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.single(key)? {
            Value::Flag(v) => Ok(*v),
            other => Err(LabError::Config(format!("key `{key}`: expected a flag, got `{other}`"))),
        }
    }

    pub fn text(&self, key: &str) -> Result<&str> {
        match self.single(key)? {
            Value::Text(v) => Ok(v),
            other => Err(LabError::Config(format!("key `{key}`: expected text, got `{other}`"))),
        }
    }

    pub fn reals(&self, key: &str) -> Result<&[f64]> {
        match self.single(key)? {
            Value::Reals(v) => Ok(v),
            other => Err(LabError::Config(format!("key `{key}`: expected a list, got `{other}`"))),
        }
    }

    pub fn activation(&self, key: &str) -> Result<Activation> {
        self.text(key)?
            .parse()
            .map_err(|_| LabError::Config(format!("key `{key}`: unknown activation")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.int("seed")
    }

    /// Seeds of every cell, in expansion order.
    pub fn seeds(&self) -> Vec<u64> {
        self.entries["seed"]
            .iter()
            .filter_map(|v| match v {
                Value::Int(s) => Some(*s),
                _ => None,
            })
            .collect()
    }

    /// Cartesian product of a sweep grid (last key varies fastest); a plain
    /// config expands to itself.
    pub fn expand(&self) -> Vec<ExperimentConfig> {
        if self.command != Command::Sweep {
            return vec![self.clone()];
        }
        let target = self.target();
        let mut cells = vec![BTreeMap::new()];
        for (k, values) in &self.entries {
            if k == "sweep.command" {
                continue;
            }
            cells = cells
                .into_iter()
                .flat_map(|cell: BTreeMap<String, Vec<Value>>| {
                    values.iter().map(move |v| {
                        let mut c = cell.clone();
                        c.insert(k.clone(), vec![v.clone()]);
                        c
                    })
                })
                .collect();
        }
        cells
            .into_iter()
            .map(|entries| ExperimentConfig {
                command: target,
                entries,
            })
            .collect()
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = format!("command = {}\n", self.command);
        for (k, values) in &self.entries {
            let joined: Vec<String> = values.iter().map(Value::to_string).collect();
            out.push_str(&format!("{k} = {}\n", joined.join(",")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_seed_is_named() {
        let err = ExperimentConfig::parse("", Some(Command::Recovery), &[]).unwrap_err();
        assert!(err.to_string().contains("`seed`"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn defaults_are_filled() {
        let c = ExperimentConfig::parse("seed = 3\n", Some(Command::TrainSane), &[]).unwrap();
        assert_eq!(c.real("contrastive.tau").unwrap(), 0.2);
        assert_eq!(c.real("refinery.tau_prime").unwrap(), 0.8);
        assert_eq!(c.real("refinery.kappa").unwrap(), 2.0);
        assert_eq!(c.real("refinery.lambda").unwrap(), 0.5);
        assert_eq!(c.real("refinery.m1").unwrap(), 0.0);
        assert_eq!(c.real("refinery.m2").unwrap(), 1.0);
        assert!(!c.flag("contrastive.paper_sign").unwrap());
        for spec in schema(Command::TrainSane) {
            assert!(c.entries().contains_key(spec.key), "{}", spec.key);
        }
    }

    #[test]
    fn type_and_unknown_errors() {
        let err = ExperimentConfig::parse("seed = 1\ndata.n = ten", Some(Command::GenData), &[]).unwrap_err();
        assert!(err.to_string().contains("`data.n`"));
        let err = ExperimentConfig::parse("seed = 1\nbogus = 2", Some(Command::GenData), &[]).unwrap_err();
        assert!(err.to_string().contains("`bogus`"));
        let err = ExperimentConfig::parse("seed = 1\nseed = 2", Some(Command::GenData), &[]).unwrap_err();
        assert!(err.to_string().contains("more than once"));
        let err = ExperimentConfig::parse("seed = 1\ndata.n = 1,2", Some(Command::GenData), &[]).unwrap_err();
        assert!(err.to_string().contains("sweep"));
        let err = ExperimentConfig::parse("command = gap\nseed = 1", Some(Command::GenData), &[]).unwrap_err();
        assert!(err.to_string().contains("`command`"));
    }

    #[test]
    fn comments_overrides_and_round_trip() {
        let text = "# comment\nseed = 9 # trailing\nrecovery.eta = 0.125\n";
        let overrides = vec![("data.rho".to_string(), "0.1".to_string())];
        let c = ExperimentConfig::parse(text, Some(Command::Recovery), &overrides).unwrap();
        assert_eq!(c.seed().unwrap(), 9);
        assert_eq!(c.real("data.rho").unwrap(), 0.1);
        let again = ExperimentConfig::parse(&c.to_text(), None, &[]).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_text(), c.to_text());
    }

    #[test]
    fn sweep_expands_grid() {
        let text = "sweep.command = recovery\nseed = 1,2\ndata.rho = 0,0.1,0.2\n";
        let c = ExperimentConfig::parse(text, Some(Command::Sweep), &[]).unwrap();
        assert_eq!(c.target(), Command::Recovery);
        let cells = c.expand();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0].real("data.rho").unwrap(), 0.0);
        assert_eq!(cells[1].seed().unwrap(), 2);
        assert!(cells.iter().all(|c| c.command() == Command::Recovery));
        let again = ExperimentConfig::parse(&c.to_text(), None, &[]).unwrap();
        assert_eq!(again, c);
        let err = ExperimentConfig::parse("seed = 1", Some(Command::Sweep), &[]).unwrap_err();
        assert!(err.to_string().contains("`sweep.command`"));
    }

    #[test]
    fn list_values() {
        let c = ExperimentConfig::parse("seed = 1\ngap.rhos = 0 0.25 0.5", Some(Command::Gap), &[]).unwrap();
        assert_eq!(c.reals("gap.rhos").unwrap(), &[0.0, 0.25, 0.5]);
    }
}
