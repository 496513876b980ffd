//! Experiment configuration files.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! path = "train.jsonl"          # or a [data.synth] table
//! inject_anomalies = 0
//! train_fraction = 0.6
//! anomaly_fraction = 0.1
//!
//! [train]                       # any TrainConfig field except `seed`
//! head = "sphere"
//! mu = 0.5
//!
//! [crossval]                    # optional; entries override [train]
//! grid = [{ mu = 0.1 }, { mu = 0.5 }]
//! ```
//!
//! Unknown keys are rejected by name. The encoder seed is derived from the
//! top-level seed, so `[train]` may not set it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqanomaly::data::{ArProcess, SynthProfile};
use seqanomaly::rng::derive_seed;
use seqanomaly::TrainConfig;

use crate::error::{CliError, Result};

/// Generator settings shared by `synth` and `[data.synth]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub p: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_normal: usize,
    #[serde(default)]
    pub n_anomalous: usize,
    pub normal: ArProcess,
    /// Defaults to the normal process.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomalous: Option<ArProcess>,
}

impl SynthSpec {
    pub fn profile(&self) -> SynthProfile {
        SynthProfile {
            p: self.p,
            min_len: self.min_len,
            max_len: self.max_len,
            normal: self.normal,
            anomalous: self.anomalous.unwrap_or(self.normal),
        }
    }
}

fn default_train_fraction() -> f64 {
    0.6
}

fn default_anomaly_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `.csv` files use the flat id/time layout, anything else is JSONL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    /// Gaussian anomalies added after normalization; unlabeled input items
    /// are then treated as normal.
    #[serde(default)]
    pub inject_anomalies: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_anomaly_fraction")]
    pub anomaly_fraction: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CrossvalSection {
    grid: Vec<toml::Table>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    out: Option<PathBuf>,
    data: DataConfig,
    #[serde(default)]
    train: Option<TrainConfig>,
    #[serde(default)]
    crossval: Option<CrossvalSection>,
}

/// A parsed and resolved experiment; serialized verbatim into the run summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Experiment {
    pub seed: u64,
    pub data: DataConfig,
    /// Training settings with the derived encoder seed filled in.
    pub train: TrainConfig,
    /// Candidate settings for two-fold cross-validation, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crossval_grid: Option<Vec<TrainConfig>>,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Named random streams split from the top-level seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub fold: u64,
}

impl Seeds {
    pub fn new(root: u64) -> Self {
        Self {
            data: derive_seed(root, "data"),
            init: derive_seed(root, "init"),
            fold: derive_seed(root, "fold"),
        }
    }
}

impl Experiment {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, seed_override, base_dir).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, seed_override: Option<u64>, base_dir: PathBuf) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let raw_train = match raw.get("train") {
            Some(toml::Value::Table(t)) => t.clone(),
            _ => toml::Table::new(),
        };
        if raw_train.contains_key("seed") {
            return Err(CliError::Config(
                "`train.seed` is derived from the top-level `seed`; remove it from [train]".into(),
            ));
        }
        match (&file.data.path, &file.data.synth) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config("[data] sets both `path` and `synth`; choose one".into()))
            }
            (None, None) => return Err(CliError::Config("[data] needs either `path` or a `synth` table".into())),
            _ => {}
        }

        let seed = seed_override.unwrap_or(file.seed);
        let init = Seeds::new(seed).init;
        let mut train = file.train.unwrap_or_default();
        train.seed = init;
        train.validate()?;

        let crossval_grid = match file.crossval {
            None => None,
            Some(section) => {
                if section.grid.is_empty() {
                    return Err(CliError::Config("crossval.grid is empty".into()));
                }
                let mut grid = Vec::with_capacity(section.grid.len());
                for (i, entry) in section.grid.into_iter().enumerate() {
                    if entry.contains_key("seed") {
                        return Err(CliError::Config(format!("crossval.grid[{i}] may not set `seed`")));
                    }
                    let mut merged = raw_train.clone();
                    merged.extend(entry);
                    let mut cfg: TrainConfig = toml::Value::Table(merged)
                        .try_into()
                        .map_err(|e| CliError::Config(format!("crossval.grid[{i}]: {e}")))?;
                    cfg.seed = init;
                    cfg.validate()
                        .map_err(|e| CliError::Config(format!("crossval.grid[{i}]: {e}")))?;
                    grid.push(cfg);
                }
                Some(grid)
            }
        };

        Ok(Self {
            seed,
            data: file.data,
            train,
            crossval_grid,
            out: file.out,
            base_dir,
        })
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::new(self.seed)
    }

    /// Dataset path resolved against the config file's directory.
    pub fn data_path(&self) -> Option<PathBuf> {
        self.data.path.as_ref().map(|p| {
            if p.is_absolute() {
                p.clone()
            } else {
                self.base_dir.join(p)
            }
        })
    }
}
