//! Dataset preparation and multi-seed training runs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use nlogic_core::baseline_mf::{MfModel, MfPairwise, MfPointwise};
use nlogic_core::logic::{generate_dataset, read_expressions, split_dataset, Assignment, LabeledExpr};
use nlogic_core::ndarray::Array2;
use nlogic_core::nln::NlnModel;
use nlogic_core::rec::{load_ratings, synth, Interaction, RecDataset, SplitTag};
use nlogic_core::rng::{Rng, Stream};
use nlogic_core::training::{
    aggregate, Checkpoint, EpochStats, Metric, MeanStderr, NlnPairwise, NlnPointwise, Objective, PairExample,
    Session, SplitEval, Trainable,
};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, ModelKind, Task};
use crate::error::{io_err, CliError};
use crate::output;

/// A model whose variable embeddings can be exported.
pub trait Exportable: Trainable + Send + Sync {
    fn embeddings(&self) -> Option<&Array2<f64>>;
}

impl Exportable for NlnModel {
    fn embeddings(&self) -> Option<&Array2<f64>> {
        Some(self.embedding_table())
    }
}

impl Exportable for MfModel {
    fn embeddings(&self) -> Option<&Array2<f64>> {
        None
    }
}

pub enum Prepared {
    Sim {
        objective: NlnPointwise,
        vocab: usize,
        truth: Option<Assignment>,
    },
    NlnPreference {
        objective: NlnPointwise,
        vocab: usize,
    },
    MfPreference {
        objective: MfPointwise,
        users: usize,
        items: usize,
    },
    NlnTopk {
        objective: NlnPairwise,
        vocab: usize,
    },
    MfTopk {
        objective: MfPairwise,
        users: usize,
        items: usize,
    },
}

fn read_sim(cfg: &ExperimentConfig) -> Result<(Vec<LabeledExpr>, Option<Assignment>, Option<usize>), CliError> {
    let d = &cfg.data;
    if let Some(path) = &d.expressions {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let data = read_expressions(BufReader::new(file)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let truth = match &d.assignment {
            Some(p) => Some(output::read_assignment(p)?),
            None => None,
        };
        return Ok((data, truth, None));
    }
    if let Some(gen) = &d.gen {
        let (truth, data) = generate_dataset(gen).map_err(|e| CliError::Config(e.to_string()))?;
        return Ok((data, Some(truth), Some(gen.n)));
    }
    Err(CliError::Config("sim task needs data.expressions or data.gen".into()))
}

pub fn load_interactions(cfg: &ExperimentConfig) -> Result<Vec<Interaction>, CliError> {
    let d = &cfg.data;
    let all = if let Some(path) = &d.ratings {
        load_ratings(path, d.format)
            .map_err(|e| CliError::Data(e.to_string()))?
            .interactions
    } else if let Some(s) = &d.synthetic {
        synth::generate(s)
    } else {
        return Err(CliError::Config("rec task needs data.ratings or data.synthetic".into()));
    };
    Ok(match d.max_users {
        Some(n) => RecDataset::first_users(&all, n),
        None => all,
    })
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let d = &cfg.data;
    if cfg.task == Task::Sim {
        let (data, truth, gen_vocab) = read_sim(cfg)?;
        let max_var = data.iter().filter_map(|e| e.expr.max_var()).map(|v| v.index() + 1).max().unwrap_or(0);
        let vocab = d
            .vocab
            .or(gen_vocab)
            .or(truth.as_ref().map(|t| t.len()))
            .unwrap_or(max_var);
        if vocab < max_var {
            return Err(CliError::Data(format!("expressions use {max_var} variables but vocab is {vocab}")));
        }
        let (train, valid, test) =
            split_dataset(&data, d.split, d.split_seed).map_err(|e| CliError::Config(e.to_string()))?;
        return Ok(Prepared::Sim {
            objective: NlnPointwise::new(train, valid, test),
            vocab,
            truth,
        });
    }
    let ds = RecDataset::build(&load_interactions(cfg)?, d.max_history);
    eprintln!(
        "ratings: {} users, {} items, {} repeats dropped, {} cold items",
        ds.n_users, ds.n_items, ds.duplicates, ds.cold_items
    );
    let data_err = |e: nlogic_core::rec::RecError| CliError::Data(e.to_string());
    let (users, items) = (ds.n_users as usize, ds.n_items as usize);
    match (cfg.task, cfg.model) {
        (Task::RecPreference, ModelKind::Nln) => {
            let split = |t| ds.labeled(t).map_err(data_err);
            Ok(Prepared::NlnPreference {
                objective: NlnPointwise::new(split(SplitTag::Train)?, split(SplitTag::Valid)?, split(SplitTag::Test)?),
                vocab: items,
            })
        }
        (Task::RecPreference, ModelKind::Mf) => Ok(Prepared::MfPreference {
            objective: MfPointwise {
                train: ds.triples(SplitTag::Train),
                valid: ds.triples(SplitTag::Valid),
                test: ds.triples(SplitTag::Test),
            },
            users,
            items,
        }),
        (Task::RecTopk, model) => {
            // Candidates depend only on the data seed, so NLN and MF rank identical sets.
            let mut rng = Rng::new(d.split_seed, Stream::EvalCandidates);
            let valid = ds.rank_tasks(SplitTag::Valid, d.candidates, &mut rng).map_err(data_err)?;
            let test = ds.rank_tasks(SplitTag::Test, d.candidates, &mut rng).map_err(data_err)?;
            if model == ModelKind::Nln {
                Ok(Prepared::NlnTopk {
                    objective: NlnPairwise {
                        train: PairExample::from_dataset(&ds).map_err(data_err)?,
                        sampler: ds.sampler(),
                        valid,
                        test,
                    },
                    vocab: items,
                })
            } else {
                Ok(Prepared::MfTopk {
                    objective: MfPairwise {
                        train: ds.positives(SplitTag::Train).iter().map(|r| (r.user, r.target)).collect(),
                        sampler: ds.sampler(),
                        valid,
                        test,
                    },
                    users,
                    items,
                })
            }
        }
        (Task::Sim, _) => unreachable!("handled above"),
    }
}

/// Final numbers of one seed.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub test: SplitEval,
    pub epochs: usize,
}

/// Everything a run needs besides the model and objective.
pub struct RunContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub hash: String,
    pub out_dir: PathBuf,
    pub truth: Option<&'a Assignment>,
    pub quiet: bool,
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn curve_lines(stats: &[EpochStats], metric: Metric) -> Vec<String> {
    let mut lines = vec![EpochStats::CSV_HEADER.to_string()];
    lines.extend(stats.iter().flat_map(|s| s.csv_rows(metric)));
    lines
}

fn finish_seed<M: Exportable, O: Objective<M>>(
    ctx: &RunContext<'_>,
    session: Session<'_, M, O>,
    dir: &Path,
) -> Result<SeedResult, CliError> {
    let cfg = ctx.cfg;
    let mut last_ckpt = None;
    let mut session = session;
    let seed = session.checkpoint().seed;
    let header = output::header(&ctx.hash, &[seed]);
    while !session.finished() {
        let (stats, improved) = session.run_epoch()?;
        let stats = stats.clone();
        if !ctx.quiet {
            let m = cfg.train.eval_metric;
            eprintln!(
                "seed {seed} epoch {:>3} train loss {:.4} valid {m} {:.4} test {m} {:.4}{}",
                stats.epoch,
                stats.train.loss,
                stats.valid.get(m).unwrap_or(f64::NAN),
                stats.test.get(m).unwrap_or(f64::NAN),
                if improved { " *" } else { "" }
            );
        }
        output::write_lines(&dir.join("curves.csv"), &header, &curve_lines(session.stats(), cfg.train.eval_metric))?;
        if improved {
            let path = dir.join(format!("ckpt-{}.json", stats.epoch));
            session.checkpoint().save(&path)?;
            // Only the newest improvement is kept on disk.
            if let Some(old) = last_ckpt.replace(path) {
                std::fs::remove_file(&old).map_err(|e| io_err(&old, e))?;
            }
        }
        if cfg.embedding_snapshots {
            if let Some(table) = session.model().embeddings() {
                let path = dir.join(format!("embeddings-{}.csv", stats.epoch));
                output::write_embeddings(&path, &header, table, ctx.truth)?;
            }
        }
    }
    let outcome = session.into_outcome();
    let best = outcome.best().clone();
    Ok(SeedResult {
        seed,
        best_epoch: outcome.best_epoch,
        test: best.test,
        epochs: outcome.stats.len() - 1,
    })
}

fn run_seed<M: Exportable, O: Objective<M>>(
    ctx: &RunContext<'_>,
    objective: &O,
    seed: u64,
    init: &(dyn Fn(u64) -> M + Sync),
) -> Result<SeedResult, CliError> {
    let dir = seed_dir(&ctx.out_dir, seed);
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let session = Session::new(objective, ctx.cfg.train.clone(), init(seed), seed, ctx.hash.clone())?;
    finish_seed(ctx, session, &dir)
}

fn run_all<M: Exportable, O: Objective<M> + Sync>(
    ctx: &RunContext<'_>,
    objective: &O,
    jobs: usize,
    init: &(dyn Fn(u64) -> M + Sync),
) -> Result<Vec<SeedResult>, CliError> {
    let seeds = &ctx.cfg.train.seeds;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    // Results come back in seed order whatever the completion order.
    pool.install(|| seeds.par_iter().map(|&s| run_seed(ctx, objective, s, init)).collect())
}

pub fn run_experiment(ctx: &RunContext<'_>, prepared: &Prepared, jobs: usize) -> Result<Vec<SeedResult>, CliError> {
    let cfg = ctx.cfg;
    let nln = |vocab: usize| move |seed: u64| NlnModel::init(cfg.nln, vocab, &mut Rng::new(seed, Stream::Init));
    let mf = |users: usize, items: usize| {
        move |seed: u64| MfModel::init(users, items, cfg.mf_dim, &mut Rng::new(seed, Stream::Init))
    };
    match prepared {
        Prepared::Sim { objective, vocab, .. } | Prepared::NlnPreference { objective, vocab } => {
            run_all(ctx, objective, jobs, &nln(*vocab))
        }
        Prepared::NlnTopk { objective, vocab } => run_all(ctx, objective, jobs, &nln(*vocab)),
        Prepared::MfPreference { objective, users, items } => run_all(ctx, objective, jobs, &mf(*users, *items)),
        Prepared::MfTopk { objective, users, items } => run_all(ctx, objective, jobs, &mf(*users, *items)),
    }
}

/// Continues one seed from a checkpoint.
pub fn resume(ctx: &RunContext<'_>, prepared: &Prepared, ckpt: &Path) -> Result<SeedResult, CliError> {
    fn go<M: Exportable, O: Objective<M>>(ctx: &RunContext<'_>, objective: &O, ckpt: &Path) -> Result<SeedResult, CliError> {
        let ck: Checkpoint<M> = Checkpoint::load(ckpt)?;
        let dir = seed_dir(&ctx.out_dir, ck.seed);
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let session = Session::resume(objective, ctx.cfg.train.clone(), ck, &ctx.hash)?;
        finish_seed(ctx, session, &dir)
    }
    match prepared {
        Prepared::Sim { objective, .. } | Prepared::NlnPreference { objective, .. } => {
            go::<NlnModel, _>(ctx, objective, ckpt)
        }
        Prepared::NlnTopk { objective, .. } => go::<NlnModel, _>(ctx, objective, ckpt),
        Prepared::MfPreference { objective, .. } => go::<MfModel, _>(ctx, objective, ckpt),
        Prepared::MfTopk { objective, .. } => go::<MfModel, _>(ctx, objective, ckpt),
    }
}

/// `experiment,seed,metric,value,stderr` rows, per seed then aggregated.
pub fn result_lines(experiment: &str, results: &[SeedResult]) -> Result<(Vec<String>, BTreeMap<Metric, MeanStderr>), CliError> {
    let mut lines = Vec::new();
    for r in results {
        for (m, v) in &r.test.metrics {
            lines.push(format!("{experiment},{},{m},{v},", r.seed));
        }
    }
    let summary = if results.len() >= 2 {
        let per_seed: Vec<BTreeMap<Metric, f64>> = results.iter().map(|r| r.test.metrics.clone()).collect();
        aggregate(&per_seed)?
    } else {
        BTreeMap::new()
    };
    for (m, s) in &summary {
        lines.push(format!("{experiment},all,{m},{},{}", s.mean, s.stderr));
    }
    Ok((lines, summary))
}

pub fn experiment_id(cfg: &ExperimentConfig) -> String {
    let task = match cfg.task {
        Task::Sim => "sim",
        Task::RecPreference => "rec-preference",
        Task::RecTopk => "rec-topk",
    };
    let model = match cfg.model {
        ModelKind::Nln => "nln",
        ModelKind::Mf => "mf",
    };
    format!("{task}-{model}-lambda_l={}", cfg.train.reg_weights.lambda_l)
}
