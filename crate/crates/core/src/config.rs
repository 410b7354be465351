//! Flat `key = value` experiment configuration.
//!
//! Dotted prefixes address sections (`classes.1.population = 30`,
//! `task.learning_rate = 0.05`); `#` starts a comment. An empty file yields
//! the default experiment: 100 clients in a 30/40/30 class split, subsidy set
//! {0.1..0.5}, discount 0.9, alpha 0.15, batch 32, learning rate 1e-3.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::env::{ClientClass, Matrix3, TransitionPair};
use crate::policy::PolicyKind;
use crate::sim::{
    Budget, DataSource, Observability, Schedule, Sharing, SimConfig, SimError, TaskConfig,
};
use crate::whittle::SubsidySet;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config `{path}`: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub sim: SimConfig,
    pub policies: Vec<PolicyKind>,
    /// Dirichlet concentrations; one experiment cell per (policy, tau).
    pub taus: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub workers: usize,
}

pub fn default_classes() -> Vec<ClientClass> {
    vec![
        ClientClass {
            id: 1,
            population: 30,
            capacity_range: (0.7, 1.0),
            bandwidth_hz: 1.0e8,
            channel_gain_mean: 1.0,
            state_coefficients: [1.0, 2.0, 4.0],
            transitions: TransitionPair::resilient(),
        },
        ClientClass {
            id: 2,
            population: 40,
            capacity_range: (0.4, 0.7),
            bandwidth_hz: 5.0e7,
            channel_gain_mean: 1.0,
            state_coefficients: [1.0, 2.0, 4.0],
            transitions: TransitionPair::moderate(),
        },
        ClientClass {
            id: 3,
            population: 30,
            capacity_range: (0.2, 0.4),
            bandwidth_hz: 2.0e7,
            channel_gain_mean: 1.0,
            state_coefficients: [1.0, 2.0, 4.0],
            transitions: TransitionPair::fragile(),
        },
    ]
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            sim: SimConfig {
                classes: default_classes(),
                budget: Budget::Count(10),
                subsidies: SubsidySet::new(vec![0.1, 0.2, 0.3, 0.4, 0.5]).expect("static set"),
                discount: 0.9,
                lambda: 1.0,
                alpha: 0.15,
                eta: Schedule {
                    scale: 1.0,
                    exponent: 0.5,
                },
                gamma: Schedule {
                    scale: 1.0,
                    exponent: 1.0,
                },
                latency_cap: None,
                max_rounds: 500,
                observability: Observability::Oracle,
                sharing: Sharing::PerClass,
                noise_power_w: 1.0e-5,
                transmit_power_w: 0.19953,
                base_secs_per_sample: 1.0e-3,
                task: TaskConfig {
                    n_train: 2000,
                    n_test: 500,
                    dim: 20,
                    n_classes: 10,
                    cluster_spread: 1.0,
                    tau: 1.0,
                    learning_rate: 1.0e-3,
                    batch_size: 32,
                    epochs: 1,
                    source: DataSource::Synthetic,
                },
                task_seed: 42,
            },
            policies: PolicyKind::ALL.to_vec(),
            taus: vec![0.1, 10.0],
            seeds: (0..10).collect(),
            out_dir: PathBuf::from("results"),
            workers: 1,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sim.validate()?;
        if self.policies.is_empty() {
            return Err(bad("policies", "at least one policy required"));
        }
        if self.taus.is_empty() {
            return Err(bad("taus", "at least one tau required"));
        }
        if self.taus.iter().any(|t| !(*t > 0.0)) {
            return Err(bad("taus", "every tau must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(bad("seeds", "at least one seed required"));
        }
        if self.workers == 0 {
            return Err(bad("workers", "worker count must be at least 1"));
        }
        Ok(())
    }
}

fn bad(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        reason: reason.into(),
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentSpec, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_str(&text)
}

pub fn parse_str(text: &str) -> Result<ExperimentSpec, ConfigError> {
    let mut spec = ExperimentSpec::default();
    let mut classes: BTreeMap<u32, ClientClass> =
        default_classes().into_iter().map(|c| (c.id, c)).collect();

    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: lineno + 1,
                text: line.to_string(),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() {
            return Err(bad(key, "empty value"));
        }
        apply_key(&mut spec, &mut classes, key, value)?;
    }

    spec.sim.classes = classes.into_values().filter(|c| c.population > 0).collect();
    spec.validate()?;
    Ok(spec)
}

fn apply_key(
    spec: &mut ExperimentSpec,
    classes: &mut BTreeMap<u32, ClientClass>,
    key: &str,
    value: &str,
) -> Result<(), ConfigError> {
    if let Some(rest) = key.strip_prefix("classes.") {
        return apply_class_key(classes, key, rest, value);
    }
    if let Some(field) = key.strip_prefix("task.") {
        return apply_task_key(&mut spec.sim.task, key, field, value);
    }
    match key {
        "policies" => {
            let mut out = Vec::new();
            for name in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                match PolicyKind::from_name(name) {
                    Some(p) => out.push(p),
                    None => return Err(bad(key, format!("unknown policy name `{name}`"))),
                }
            }
            spec.policies = out;
        }
        "taus" => spec.taus = parse_f64_list(key, value)?,
        "seeds" => spec.seeds = parse_seed_list(key, value)?,
        "out_dir" => spec.out_dir = PathBuf::from(value),
        "workers" => spec.workers = parse_num(key, value)?,
        "budget.count" => spec.sim.budget = Budget::Count(parse_num(key, value)?),
        "budget.fraction" => spec.sim.budget = Budget::Fraction(parse_num(key, value)?),
        "subsidies" => {
            let values = parse_f64_list(key, value)?;
            spec.sim.subsidies = SubsidySet::new(values).map_err(|e| bad(key, e.to_string()))?;
        }
        "discount" => spec.sim.discount = parse_num(key, value)?,
        "lambda" => spec.sim.lambda = parse_num(key, value)?,
        "alpha" => spec.sim.alpha = parse_num(key, value)?,
        "eta.scale" => spec.sim.eta.scale = parse_num(key, value)?,
        "eta.exponent" => spec.sim.eta.exponent = parse_num(key, value)?,
        "gamma.scale" => spec.sim.gamma.scale = parse_num(key, value)?,
        "gamma.exponent" => spec.sim.gamma.exponent = parse_num(key, value)?,
        "latency_cap" => {
            spec.sim.latency_cap = if value.eq_ignore_ascii_case("none") {
                None
            } else {
                Some(parse_num(key, value)?)
            };
        }
        "max_rounds" => spec.sim.max_rounds = parse_num(key, value)?,
        "observability" => {
            spec.sim.observability = match value {
                "oracle" => Observability::Oracle,
                "inferred" => Observability::Inferred,
                other => return Err(bad(key, format!("expected oracle|inferred, got `{other}`"))),
            };
        }
        "sharing" => {
            spec.sim.sharing = match value {
                "class" => Sharing::PerClass,
                "client" => Sharing::PerClient,
                other => return Err(bad(key, format!("expected class|client, got `{other}`"))),
            };
        }
        "noise_power_w" => spec.sim.noise_power_w = parse_num(key, value)?,
        "transmit_power_w" => spec.sim.transmit_power_w = parse_num(key, value)?,
        "base_secs_per_sample" => spec.sim.base_secs_per_sample = parse_num(key, value)?,
        "task_seed" => spec.sim.task_seed = parse_num(key, value)?,
        _ => return Err(ConfigError::UnknownKey(key.to_string())),
    }
    Ok(())
}

fn apply_task_key(
    task: &mut TaskConfig,
    key: &str,
    field: &str,
    value: &str,
) -> Result<(), ConfigError> {
    match field {
        "n_train" => task.n_train = parse_num(key, value)?,
        "n_test" => task.n_test = parse_num(key, value)?,
        "dim" => task.dim = parse_num(key, value)?,
        "n_classes" => task.n_classes = parse_num(key, value)?,
        "cluster_spread" => task.cluster_spread = parse_num(key, value)?,
        "tau" => task.tau = parse_num(key, value)?,
        "learning_rate" => task.learning_rate = parse_num(key, value)?,
        "batch_size" => task.batch_size = parse_num(key, value)?,
        "epochs" => task.epochs = parse_num(key, value)?,
        "csv" => task.source = DataSource::Csv(PathBuf::from(value)),
        "source" => {
            if value == "synthetic" {
                task.source = DataSource::Synthetic;
            } else {
                return Err(bad(
                    key,
                    "only `synthetic` is valid here; use task.csv for files",
                ));
            }
        }
        _ => return Err(ConfigError::UnknownKey(key.to_string())),
    }
    Ok(())
}

fn apply_class_key(
    classes: &mut BTreeMap<u32, ClientClass>,
    key: &str,
    rest: &str,
    value: &str,
) -> Result<(), ConfigError> {
    let Some((id_str, field)) = rest.split_once('.') else {
        return Err(ConfigError::UnknownKey(key.to_string()));
    };
    let id: u32 = id_str
        .parse()
        .map_err(|_| bad(key, format!("`{id_str}` is not a class id")))?;
    let class = classes.entry(id).or_insert_with(|| ClientClass {
        id,
        population: 0,
        capacity_range: (0.5, 1.0),
        bandwidth_hz: 5.0e7,
        channel_gain_mean: 1.0,
        state_coefficients: [1.0, 2.0, 4.0],
        transitions: TransitionPair::moderate(),
    });
    match field {
        "population" => class.population = parse_num(key, value)?,
        "capacity_min" => class.capacity_range.0 = parse_num(key, value)?,
        "capacity_max" => class.capacity_range.1 = parse_num(key, value)?,
        "bandwidth_hz" => class.bandwidth_hz = parse_num(key, value)?,
        "gain_mean" => class.channel_gain_mean = parse_num(key, value)?,
        "coeff_normal" => class.state_coefficients[0] = parse_num(key, value)?,
        "coeff_limited" => class.state_coefficients[1] = parse_num(key, value)?,
        "coeff_busy" => class.state_coefficients[2] = parse_num(key, value)?,
        "transitions" => {
            class.transitions = match value {
                "moderate" => TransitionPair::moderate(),
                "resilient" => TransitionPair::resilient(),
                "fragile" => TransitionPair::fragile(),
                other => {
                    return Err(bad(
                        key,
                        format!("expected moderate|resilient|fragile, got `{other}`"),
                    ))
                }
            };
        }
        _ => {
            if let Some(row) = field.strip_prefix("selected.") {
                set_matrix_row(&mut class.transitions.selected, key, row, value)?;
            } else if let Some(row) = field.strip_prefix("unselected.") {
                set_matrix_row(&mut class.transitions.unselected, key, row, value)?;
            } else {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
        }
    }
    Ok(())
}

fn set_matrix_row(
    matrix: &mut Matrix3,
    key: &str,
    row: &str,
    value: &str,
) -> Result<(), ConfigError> {
    let r: usize = row
        .parse()
        .map_err(|_| bad(key, format!("`{row}` is not a row index")))?;
    if r > 2 {
        return Err(bad(key, "row index must be 0, 1, or 2"));
    }
    let entries = parse_f64_list(key, value)?;
    if entries.len() != 3 {
        return Err(bad(
            key,
            format!("expected 3 entries, got {}", entries.len()),
        ));
    }
    matrix[r] = [entries[0], entries[1], entries[2]];
    Ok(())
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| bad(key, format!("`{value}`: {e}")))
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num::<f64>(key, s))
        .collect()
}

/// Seeds accept a comma list (`1,2,3`) or an inclusive range (`0..19`).
pub fn parse_seeds(value: &str) -> Result<Vec<u64>, ConfigError> {
    parse_seed_list("seeds", value)
}

fn parse_seed_list(key: &str, value: &str) -> Result<Vec<u64>, ConfigError> {
    if let Some((lo, hi)) = value.split_once("..") {
        let lo: u64 = parse_num(key, lo.trim())?;
        let hi: u64 = parse_num(key, hi.trim())?;
        if hi < lo {
            return Err(bad(key, format!("range {lo}..{hi} is empty")));
        }
        return Ok((lo..=hi).collect());
    }
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num::<u64>(key, s))
        .collect()
}
