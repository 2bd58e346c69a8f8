//! Experiment configuration: one JSON document, overridable from the command
//! line and the environment.
//!
//! Precedence, lowest first: built-in defaults, the JSON file, `NLOGIC_SEED`,
//! command-line flags.

use std::path::{Path, PathBuf};

use nlogic_core::logic::GenConfig;
use nlogic_core::nln::NlnConfig;
use nlogic_core::rec::synth::SynthConfig;
use nlogic_core::rec::RatingFormat;
use nlogic_core::training::{Metric, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Sim,
    RecPreference,
    RecTopk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Nln,
    Mf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Expression file for the simulated task.
    pub expressions: Option<PathBuf>,
    /// `var,truth` file written by `simgen`, used for clustering diagnostics.
    pub assignment: Option<PathBuf>,
    /// Vocabulary size when it cannot be inferred.
    pub vocab: Option<usize>,
    /// Generate the simulated dataset in memory instead of reading a file.
    pub gen: Option<GenConfig>,
    /// Train/valid/test fractions for the simulated task.
    pub split: (f64, f64, f64),
    pub split_seed: u64,
    pub ratings: Option<PathBuf>,
    pub format: RatingFormat,
    /// Keep only the first N users of the rating file.
    pub max_users: Option<usize>,
    /// Synthetic ratings instead of a file.
    pub synthetic: Option<SynthConfig>,
    pub max_history: usize,
    /// Sampled negatives per leave-one-out case.
    pub candidates: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            expressions: None,
            assignment: None,
            vocab: None,
            gen: None,
            split: (0.8, 0.1, 0.1),
            split_seed: 1,
            ratings: None,
            format: RatingFormat::Ml100k,
            max_users: None,
            synthetic: None,
            max_history: nlogic_core::rec::MAX_HISTORY,
            candidates: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelKind,
    pub data: DataConfig,
    pub nln: NlnConfig,
    /// Factor dimension of the MF baseline.
    pub mf_dim: usize,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    /// Also write the embedding table after every epoch.
    pub embedding_snapshots: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Sim,
            model: ModelKind::Nln,
            data: DataConfig::default(),
            nln: NlnConfig::default(),
            mf_dim: 64,
            train: TrainConfig::default(),
            out_dir: PathBuf::from("out"),
            embedding_snapshots: false,
        }
    }
}

impl ExperimentConfig {
    /// Defaults that differ by task when the JSON leaves them unset.
    pub fn task_defaults(task: Task) -> Self {
        let mut cfg = ExperimentConfig {
            task,
            ..ExperimentConfig::default()
        };
        match task {
            Task::Sim => {}
            Task::RecPreference => {
                cfg.train.eval_metric = Metric::Auc;
                cfg.train.reg_weights.lambda_l = 1e-5;
                cfg.train.reg_weights.lambda_len = 1e-5;
                cfg.train.reg_weights.lambda_theta = 1e-6;
            }
            Task::RecTopk => {
                cfg.train.eval_metric = Metric::Ndcg10;
                cfg.train.reg_weights.lambda_l = 1e-5;
                cfg.train.reg_weights.lambda_len = 1e-5;
                cfg.train.reg_weights.lambda_theta = 1e-6;
            }
        }
        cfg
    }

    /// Reads `path` on top of the task defaults it names.
    pub fn load_with_defaults(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let task = match raw.get("task") {
            Some(t) => serde_json::from_value(t.clone()).map_err(|e| CliError::Config(format!("task: {e}")))?,
            None => Task::Sim,
        };
        let mut base = serde_json::to_value(Self::task_defaults(task)).expect("config serializes");
        merge(&mut base, raw);
        serde_json::from_value(base).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.nln.validate().map_err(CliError::Config)?;
        if self.train.seeds.is_empty() {
            return Err(CliError::Config("seed list is empty".into()));
        }
        if self.task == Task::Sim && self.model == ModelKind::Mf {
            return Err(CliError::Config("the MF baseline only applies to rec tasks".into()));
        }
        if self.mf_dim == 0 {
            return Err(CliError::Config("mf_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Hash of everything that affects results; the output location is excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        nlogic_core::training::config_hash(&c)
    }
}

/// Recursive JSON merge: objects merge key by key, anything else replaces.
fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `1,2,3` or `1-5`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Config(format!("bad seed list `{text}`"));
    if let Some((a, b)) = text.split_once('-') {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect()
}

/// Parses a comma-separated list of numbers.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    let grid: Vec<f64> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("bad grid value `{s}`")))
        })
        .collect::<Result<_, _>>()?;
    if grid.is_empty() {
        return Err(CliError::Config("grid is empty".into()));
    }
    Ok(grid)
}
