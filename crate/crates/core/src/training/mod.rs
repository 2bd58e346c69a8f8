//! Mini-batch training with Adam, early stopping and checkpoints.
//!
//! A [`Session`] drives any [`Objective`]: the objective builds a batch loss on
//! a fresh tape and evaluates splits; the session owns the optimizer, the
//! random streams and the early-stopping bookkeeping.

mod nln;

pub use nln::{pointwise_eval, ranking_eval, NlnPairwise, NlnPointwise, PairExample};

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AdamState, AutodiffError, NodeId, ParamStore, Tape};
use crate::metrics::MetricError;
use crate::regularizers::{RegReport, RegWeights};
use crate::rng::{Rng, RngState, Stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("non-finite loss {value} at epoch {epoch}")]
    NonFinite { epoch: usize, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "accuracy")]
    Accuracy,
    #[serde(rename = "rmse")]
    Rmse,
    #[serde(rename = "auc")]
    Auc,
    #[serde(rename = "ndcg@10")]
    Ndcg10,
}

impl Metric {
    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Rmse)
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Rmse => "rmse",
            Metric::Auc => "auc",
            Metric::Ndcg10 => "ndcg@10",
        }
    }

    /// Whether `a` beats `b` strictly.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "rmse" => Ok(Metric::Rmse),
            "auc" => Ok(Metric::Auc),
            "ndcg@10" | "ndcg" => Ok(Metric::Ndcg10),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub dropout: f64,
    pub reg_weights: RegWeights,
    pub seeds: Vec<u64>,
    pub eval_metric: Metric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 128,
            max_epochs: 100,
            patience: 10,
            dropout: 0.2,
            reg_weights: RegWeights {
                lambda_l: 1e-2,
                lambda_len: 1e-4,
                lambda_theta: 1e-5,
            },
            seeds: vec![1, 2, 3, 4, 5],
            eval_metric: Metric::Accuracy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.patience < 1 {
            return bad("patience must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        self.reg_weights.validate().map_err(TrainError::Config)
    }
}

/// Hex SHA-256 of a value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// `-[y ln p + (1-y) ln(1-p)]` averaged over the rows of `p`.
pub fn cross_entropy(tape: &mut Tape, p: NodeId, labels: &[bool]) -> Result<NodeId, AutodiffError> {
    let per_row = tape.bce(p, labels)?;
    Ok(tape.mean(per_row))
}

/// `-ln σ(p⁺ - p⁻)` averaged over rows.
pub fn pairwise_loss(tape: &mut Tape, p_pos: NodeId, p_neg: NodeId) -> Result<NodeId, AutodiffError> {
    let diff = tape.sub(p_neg, p_pos)?;
    let per_row = tape.softplus(diff);
    Ok(tape.mean(per_row))
}

/// A model whose parameters live in one [`ParamStore`].
pub trait Trainable: Clone + Serialize + DeserializeOwned {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn set_dropout(&mut self, _rate: f64) {}
}

impl Trainable for crate::nln::NlnModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn set_dropout(&mut self, rate: f64) {
        self.cfg.dropout = rate;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Loss and metrics of one split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub loss: f64,
    pub metrics: BTreeMap<Metric, f64>,
}

impl SplitEval {
    pub fn get(&self, m: Metric) -> Option<f64> {
        self.metrics.get(&m).copied()
    }
}

/// The random streams a session consumes while training.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub shuffle: Rng,
    pub dropout: Rng,
    pub reg_dropout: Rng,
    pub negatives: Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        TrainRngs {
            shuffle: Rng::new(seed, Stream::Shuffle),
            dropout: Rng::new(seed, Stream::Dropout),
            reg_dropout: Rng::new(seed, Stream::RegDropout),
            negatives: Rng::new(seed, Stream::NegativeSampling),
        }
    }

    pub fn state(&self) -> [RngState; 4] {
        [
            self.shuffle.state(),
            self.dropout.state(),
            self.reg_dropout.state(),
            self.negatives.state(),
        ]
    }

    pub fn from_state(s: [RngState; 4]) -> Self {
        TrainRngs {
            shuffle: Rng::from_state(s[0]),
            dropout: Rng::from_state(s[1]),
            reg_dropout: Rng::from_state(s[2]),
            negatives: Rng::from_state(s[3]),
        }
    }
}

/// Loss of one mini-batch on a tape.
pub struct BatchLoss {
    pub loss: NodeId,
    /// Examples dropped from the batch (e.g. no negative to sample).
    pub skipped: usize,
}

/// A training task: how to score a batch and how to evaluate a split.
pub trait Objective<M: Trainable> {
    fn train_len(&self) -> usize;

    /// Builds the mean loss (task plus regularizers) over `batch`, indices into
    /// the training set, in training mode.
    fn batch_loss(
        &self,
        model: &M,
        tape: &mut Tape,
        batch: &[usize],
        weights: RegWeights,
        rngs: &mut TrainRngs,
    ) -> Result<BatchLoss, TrainError>;

    /// Evaluation-mode loss and metrics. `None` means the split is not
    /// evaluated separately; the session then reports the running training loss.
    fn evaluate(&self, model: &M, split: Split) -> Result<Option<SplitEval>, TrainError>;

    /// Regularizer diagnostics for the curves file.
    fn diagnostics(&self, model: &M) -> Result<RegReport, TrainError>;

    /// Nonempty-split check, run once before training.
    fn validate(&self) -> Result<(), TrainError> {
        if self.train_len() == 0 {
            return Err(TrainError::Config("empty training split".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub train: SplitEval,
    pub valid: SplitEval,
    pub test: SplitEval,
    pub reg: RegReport,
    pub skipped: usize,
}

impl EpochStats {
    pub fn split(&self, s: Split) -> &SplitEval {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub const CSV_HEADER: &'static str = "epoch,split,loss,metric,r1,r2,r3,r4,r5,r6,r7,r8,r9,r10,length,param";

    /// Three curve rows (train, valid, test) reporting `metric`.
    pub fn csv_rows(&self, metric: Metric) -> Vec<String> {
        let reg: Vec<String> = self.reg.r.iter().map(|r| r.to_string()).collect();
        Split::ALL
            .iter()
            .map(|&s| {
                let e = self.split(s);
                let m = e.get(metric).map(|v| v.to_string()).unwrap_or_default();
                format!(
                    "{},{},{},{},{},{},{}",
                    self.epoch,
                    s.name(),
                    e.loss,
                    m,
                    reg.join(","),
                    self.reg.length,
                    self.reg.param
                )
            })
            .collect()
    }
}

/// Full session state: restoring it continues training bit-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "M: Trainable")]
pub struct Checkpoint<M: Trainable> {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub model: M,
    pub adam: AdamState,
    pub rngs: [RngState; 4],
    pub best_model: M,
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
    pub since_best: usize,
    pub stats: Vec<EpochStats>,
    pub finished: bool,
}

impl<M: Trainable> Checkpoint<M> {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let json = serde_json::to_string(self).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Result of a finished session: the best model and every epoch's stats.
#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub best_epoch: usize,
    pub stats: Vec<EpochStats>,
}

impl<M> TrainOutcome<M> {
    pub fn best(&self) -> &EpochStats {
        &self.stats[self.best_epoch]
    }
}

/// One seed's training run.
pub struct Session<'o, M: Trainable, O: Objective<M>> {
    objective: &'o O,
    cfg: TrainConfig,
    config_hash: String,
    seed: u64,
    model: M,
    adam: AdamState,
    rngs: TrainRngs,
    epoch: usize,
    best_model: M,
    best_epoch: usize,
    best_metric: Option<f64>,
    since_best: usize,
    stats: Vec<EpochStats>,
    finished: bool,
}

impl<'o, M: Trainable, O: Objective<M>> Session<'o, M, O> {
    pub fn new(objective: &'o O, cfg: TrainConfig, mut model: M, seed: u64, config_hash: String) -> Result<Self, TrainError> {
        cfg.validate()?;
        objective.validate()?;
        model.set_dropout(cfg.dropout);
        let adam = AdamState::new(model.store());
        Ok(Session {
            objective,
            cfg,
            config_hash,
            seed,
            best_model: model.clone(),
            model,
            adam,
            rngs: TrainRngs::new(seed),
            epoch: 0,
            best_epoch: 0,
            best_metric: None,
            since_best: 0,
            stats: Vec::new(),
            finished: false,
        })
    }

    /// Continues from `ckpt`, which must have been written under `config_hash`.
    pub fn resume(objective: &'o O, cfg: TrainConfig, ckpt: Checkpoint<M>, config_hash: &str) -> Result<Self, TrainError> {
        cfg.validate()?;
        if ckpt.config_hash != config_hash {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint was written under config {}, current config is {config_hash}",
                ckpt.config_hash
            )));
        }
        Ok(Session {
            objective,
            cfg,
            config_hash: ckpt.config_hash,
            seed: ckpt.seed,
            model: ckpt.model,
            adam: ckpt.adam,
            rngs: TrainRngs::from_state(ckpt.rngs),
            epoch: ckpt.epoch,
            best_model: ckpt.best_model,
            best_epoch: ckpt.best_epoch,
            best_metric: ckpt.best_metric,
            since_best: ckpt.since_best,
            stats: ckpt.stats,
            finished: ckpt.finished,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<M> {
        Checkpoint {
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            epoch: self.epoch,
            model: self.model.clone(),
            adam: self.adam.clone(),
            rngs: self.rngs.state(),
            best_model: self.best_model.clone(),
            best_epoch: self.best_epoch,
            best_metric: self.best_metric,
            since_best: self.since_best,
            stats: self.stats.clone(),
            finished: self.finished,
        }
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn stats(&self) -> &[EpochStats] {
        &self.stats
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    /// Trains one epoch (or, on the first call, evaluates the untrained
    /// model as epoch 0) and returns its stats and whether validation improved.
    pub fn run_epoch(&mut self) -> Result<(&EpochStats, bool), TrainError> {
        if self.finished {
            return Err(TrainError::Config("session already finished".into()));
        }
        let (train_loss, skipped) = if self.stats.is_empty() {
            (None, 0)
        } else {
            self.epoch += 1;
            let (loss, skipped) = self.train_epoch()?;
            (Some(loss), skipped)
        };
        let stats = self.evaluate(train_loss, skipped)?;
        let valid = stats.valid.get(self.cfg.eval_metric).ok_or_else(|| {
            TrainError::Config(format!("objective does not report {} on validation", self.cfg.eval_metric))
        })?;
        let improved = match self.best_metric {
            None => true,
            Some(best) => self.cfg.eval_metric.better(valid, best),
        };
        if improved {
            self.best_metric = Some(valid);
            self.best_epoch = self.epoch;
            self.best_model = self.model.clone();
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.stats.push(stats);
        if self.since_best >= self.cfg.patience || self.epoch >= self.cfg.max_epochs {
            self.finished = true;
        }
        Ok((self.stats.last().expect("just pushed"), improved))
    }

    fn train_epoch(&mut self) -> Result<(f64, usize), TrainError> {
        let n = self.objective.train_len();
        let mut order: Vec<usize> = (0..n).collect();
        self.rngs.shuffle.shuffle(&mut order);
        let (mut total, mut batches, mut skipped) = (0.0, 0usize, 0usize);
        for batch in order.chunks(self.cfg.batch_size) {
            let mut tape = Tape::new();
            let out = self
                .objective
                .batch_loss(&self.model, &mut tape, batch, self.cfg.reg_weights, &mut self.rngs)?;
            skipped += out.skipped;
            let value = tape.scalar(out.loss);
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch: self.epoch,
                    value,
                });
            }
            tape.backward(out.loss)?;
            let grads = tape.param_grads();
            self.adam.step(self.model.store_mut(), &grads, self.cfg.lr);
            total += value;
            batches += 1;
        }
        Ok((total / batches.max(1) as f64, skipped))
    }

    fn evaluate(&self, train_loss: Option<f64>, skipped: usize) -> Result<EpochStats, TrainError> {
        let eval = |s: Split| self.objective.evaluate(&self.model, s);
        let train = match eval(Split::Train)? {
            Some(e) => e,
            None => SplitEval {
                loss: train_loss.unwrap_or(f64::NAN),
                metrics: BTreeMap::new(),
            },
        };
        let valid = eval(Split::Valid)?.ok_or_else(|| TrainError::Config("validation split missing".into()))?;
        let test = eval(Split::Test)?.ok_or_else(|| TrainError::Config("test split missing".into()))?;
        Ok(EpochStats {
            epoch: self.epoch,
            train,
            valid,
            test,
            reg: self.objective.diagnostics(&self.model)?,
            skipped,
        })
    }

    /// Runs to completion. `on_epoch` sees every epoch's stats and whether it
    /// became the new best (the natural point to write a checkpoint).
    pub fn run<F>(mut self, mut on_epoch: F) -> Result<TrainOutcome<M>, TrainError>
    where
        F: FnMut(&Self, &EpochStats, bool) -> Result<(), TrainError>,
    {
        while !self.finished {
            let (stats, improved) = self.run_epoch()?;
            let stats = stats.clone();
            on_epoch(&self, &stats, improved)?;
        }
        Ok(self.into_outcome())
    }

    pub fn into_outcome(self) -> TrainOutcome<M> {
        TrainOutcome {
            model: self.best_model,
            best_epoch: self.best_epoch,
            stats: self.stats,
        }
    }
}

/// Trains to completion without callbacks.
pub fn train<M: Trainable, O: Objective<M>>(
    objective: &O,
    cfg: &TrainConfig,
    model: M,
    seed: u64,
) -> Result<TrainOutcome<M>, TrainError> {
    let hash = config_hash(cfg);
    Session::new(objective, cfg.clone(), model, seed, hash)?.run(|_, _, _| Ok(()))
}

/// Mean and standard error across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl MeanStderr {
    /// Needs at least two values; the error is the sample deviation over `√k`.
    pub fn of(values: &[f64]) -> Result<Self, TrainError> {
        let k = values.len();
        if k < 2 {
            return Err(TrainError::Config(format!("need at least 2 seeds, got {k}")));
        }
        let mean = values.iter().sum::<f64>() / k as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
        Ok(MeanStderr {
            mean,
            stderr: var.sqrt() / (k as f64).sqrt(),
            n: k,
        })
    }
}

impl fmt::Display for MeanStderr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.stderr)
    }
}

/// Runs `experiment` once per seed and aggregates the returned test metrics.
pub fn run_seeds<F>(seeds: &[u64], mut experiment: F) -> Result<BTreeMap<Metric, MeanStderr>, TrainError>
where
    F: FnMut(u64) -> Result<BTreeMap<Metric, f64>, TrainError>,
{
    if seeds.len() < 2 {
        return Err(TrainError::Config(format!("need at least 2 seeds, got {}", seeds.len())));
    }
    let results: Vec<BTreeMap<Metric, f64>> = seeds.iter().map(|&s| experiment(s)).collect::<Result<_, _>>()?;
    aggregate(&results)
}

/// Per-metric mean ± stderr over runs; metrics missing from any run are dropped.
pub fn aggregate(results: &[BTreeMap<Metric, f64>]) -> Result<BTreeMap<Metric, MeanStderr>, TrainError> {
    let mut out = BTreeMap::new();
    let Some(first) = results.first() else {
        return Ok(out);
    };
    for &m in first.keys() {
        let values: Option<Vec<f64>> = results.iter().map(|r| r.get(&m).copied()).collect();
        if let Some(values) = values {
            out.insert(m, MeanStderr::of(&values)?);
        }
    }
    Ok(out)
}
