//! Run configuration: one TOML file covering data, network, schedule,
//! augmentation, standardization and postprocessing. Every key is optional;
//! absent keys take the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentParams, Standardization, SynthParams};
use crate::error::{Error, Result};
use crate::loss_metrics::JaccardVariant;
use crate::nets::{NetworkSpec, Style};
use crate::trainer::{AdamConfig, EvalConfig, Schedule, TrainConfig};

pub const DEFAULT_CROP: usize = 512;
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    /// Fold table; `<output_dir>/folds.csv` when unset.
    pub fold_table: Option<PathBuf>,
    pub seed: u64,
    pub folds: usize,
    pub val_fold: usize,
    /// Center-crop side applied after loading.
    pub crop: usize,
    pub jaccard: JaccardVariant,
    pub network: NetworkSpec,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub augment: AugmentParams,
    pub standardization: Standardization,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    #[serde(flatten)]
    pub params: SynthParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 200,
            params: SynthParams::default(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            fold_table: None,
            seed: 0,
            folds: DEFAULT_FOLDS,
            val_fold: 0,
            crop: DEFAULT_CROP,
            jaccard: JaccardVariant::Aggregate,
            network: NetworkSpec::new(Style::Unet, 8, 3),
            schedule: Schedule {
                batch_size: 4,
                ..Schedule::default()
            },
            adam: AdamConfig::default(),
            augment: AugmentParams::default(),
            standardization: Standardization::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Keys that may appear although the default configuration leaves them unset.
const OPTIONAL_KEYS: &[&str] = &["fold_table", "network.convs_per_stage", "network.blocks_per_stage"];

fn collect_unknown(user: &toml::Table, reference: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in user {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match reference.get(key) {
            Some(toml::Value::Table(r)) => match value {
                toml::Value::Table(u) => collect_unknown(u, r, &path, out),
                _ => out.push(format!("`{path}` must be a table")),
            },
            Some(toml::Value::Array(r)) => {
                if let (toml::Value::Array(items), Some(toml::Value::Table(shape))) = (value, r.first()) {
                    for (i, item) in items.iter().enumerate() {
                        if let toml::Value::Table(t) = item {
                            collect_unknown(t, shape, &format!("{path}[{i}]"), out);
                        }
                    }
                }
            }
            Some(_) => {}
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => out.push(format!("unknown key `{path}`")),
        }
    }
}

/// Drops the keys `collect_unknown` reports.
fn prune_unknown(user: &mut toml::Table, reference: &toml::Table, prefix: &str) {
    user.retain(|key, _| {
        let path = if prefix.is_empty() { key.to_string() } else { format!("{prefix}.{key}") };
        reference.contains_key(key) || OPTIONAL_KEYS.contains(&path.as_str())
    });
    for (key, value) in user.iter_mut() {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (value, reference.get(key)) {
            (toml::Value::Table(u), Some(toml::Value::Table(r))) => prune_unknown(u, r, &path),
            (toml::Value::Array(items), Some(toml::Value::Array(r))) => {
                if let Some(toml::Value::Table(shape)) = r.first() {
                    for item in items {
                        if let toml::Value::Table(t) = item {
                            prune_unknown(t, shape, &path);
                        }
                    }
                }
            }
            _ => {}
        }
    }
}

fn section_errors(user: &toml::Table, reference: &toml::Table, out: &mut Vec<String>) {
    fn check<T: serde::de::DeserializeOwned>(
        name: &str,
        v: &toml::Value,
        validate: impl Fn(&T) -> Result<()>,
        out: &mut Vec<String>,
    ) {
        match v.clone().try_into::<T>() {
            Ok(section) => {
                if let Err(e) = validate(&section) {
                    out.push(format!("`{name}`: {}", message(e)));
                }
            }
            Err(e) => out.push(format!("`{name}`: {}", e.message().trim())),
        }
    }
    for (key, value) in user {
        match key.as_str() {
            "network" => check(key, value, NetworkSpec::validate, out),
            "schedule" => check(key, value, Schedule::validate, out),
            "adam" => check(key, value, AdamConfig::validate, out),
            "augment" => check(key, value, AugmentParams::validate, out),
            "standardization" => check(key, value, |_: &Standardization| Ok(()), out),
            "eval" => check(key, value, EvalConfig::validate, out),
            "synth" => check(key, value, |s: &SynthConfig| s.params.validate(), out),
            _ if !reference.contains_key(key) => {}
            _ => {
                let mut single = toml::Table::new();
                single.insert(key.clone(), value.clone());
                if let Err(e) = toml::Value::Table(single).try_into::<RunConfig>() {
                    out.push(format!("`{key}`: {}", e.message().trim()));
                }
            }
        }
    }
}

fn message(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

impl RunConfig {
    /// Parses TOML text; every unknown or ill-typed key and every out-of-range
    /// value is reported together.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let reference = match toml::Value::try_from(RunConfig::default()) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("the default configuration serializes to a table"),
        };
        let mut problems = Vec::new();
        collect_unknown(&user, &reference, "", &mut problems);
        section_errors(&user, &reference, &mut problems);
        let mut known = user;
        prune_unknown(&mut known, &reference, "");
        match toml::Value::Table(known).try_into::<RunConfig>() {
            Ok(cfg) if problems.is_empty() => {
                cfg.validate()?;
                return Ok(cfg);
            }
            Ok(cfg) => {
                if let Err(e) = cfg.validate() {
                    problems.extend(message(e).split("; ").map(str::to_string));
                }
            }
            Err(e) if problems.is_empty() => problems.push(e.message().trim().to_string()),
            Err(_) => {}
        }
        problems.sort();
        problems.dedup();
        Err(Error::Config(problems.join("; ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Range checks across all sections, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut push = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(message(e));
            }
        };
        push(self.network.validate());
        push(self.schedule.validate());
        push(self.adam.validate());
        push(self.augment.validate());
        push(self.eval.validate());
        push(self.synth.params.validate());
        push(self.network.check_input(self.crop, self.crop).map_err(|e| Error::Config(format!("crop: {e}"))));
        if self.folds < 2 {
            push(Err(Error::Config(format!("folds must be >= 2, got {}", self.folds))));
        }
        if self.val_fold >= self.folds {
            push(Err(Error::Config(format!(
                "val_fold {} must be below folds {}",
                self.val_fold, self.folds
            ))));
        }
        if self.standardization.std.iter().any(|v| !(*v > 0.0)) {
            push(Err(Error::Config("standardization.std entries must be > 0".into())));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn fold_table_path(&self) -> PathBuf {
        self.fold_table
            .clone()
            .unwrap_or_else(|| self.output_dir.join("folds.csv"))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: Schedule {
                seed: self.seed,
                ..self.schedule.clone()
            },
            variant: self.jaccard,
            augment: self.augment,
            standardization: self.standardization,
            adam: self.adam,
            eval: self.eval.clone(),
        }
    }
}
