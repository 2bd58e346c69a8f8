//! `nlogic`: data generation, training, sweeps and embedding export.
//!
//! Configuration precedence, lowest first: task defaults, the JSON config,
//! `NLOGIC_SEED`, then command-line flags.

mod config;
mod error;
mod output;
mod run;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nlogic_core::logic::{generate_dataset, write_expressions, GenConfig};
use nlogic_core::metrics::cluster_variables;
use nlogic_core::nln::NlnModel;
use nlogic_core::training::{Checkpoint, Metric};

use config::{parse_grid, parse_seeds, ExperimentConfig, ModelKind};
use error::{io_err, CliError};
use run::{Prepared, RunContext};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "nlogic", version, about = "Neural logic network experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random DNF dataset and its hidden assignment.
    Simgen(SimgenArgs),
    /// Train one configuration over all seeds.
    Train(TrainArgs),
    /// Train a grid of regularizer weights.
    Sweep(SweepArgs),
    /// Write the variable embeddings of a checkpoint as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct SimgenArgs {
    /// Take the generator settings and output paths from `data` of this config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of variables.
    #[arg(long)]
    n: Option<usize>,
    /// Number of expressions.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Clauses per expression, `lo-hi`.
    #[arg(long)]
    clauses: Option<String>,
    /// Literals per clause, `lo-hi`.
    #[arg(long)]
    literals: Option<String>,
    /// Expression file; the assignment goes next to it as `<stem>.assignment.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flags shared by `train` and `sweep`.
#[derive(Args)]
struct CommonArgs {
    /// Experiment JSON; unset fields take the task defaults.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `1-5` or `1,3,7`.
    #[arg(long, env = "NLOGIC_SEED")]
    seeds: Option<String>,
    /// Logic regularizer weight; 0 trains without the logic laws.
    #[arg(long)]
    lambda_l: Option<f64>,
    /// Vector length regularizer weight.
    #[arg(long)]
    lambda_len: Option<f64>,
    /// ℓ2 weight on module parameters.
    #[arg(long)]
    lambda_theta: Option<f64>,
    /// Maximum epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    patience: Option<usize>,
    /// `nln` or `mf` (rec tasks only).
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelKind>,
    /// Seeds trained in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Continue the seed stored in this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// `lambda_l` or `lambda_len`.
    #[arg(long, default_value = "lambda_l")]
    param: String,
    /// Comma-separated values.
    #[arg(long)]
    grid: String,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV path; the clustering report goes next to it as `<stem>.cluster.json`.
    #[arg(long)]
    out: PathBuf,
    /// `var,truth` file; enables the clustering diagnostic.
    #[arg(long)]
    assignment: Option<PathBuf>,
    /// Export the best model instead of the model at the checkpoint epoch.
    #[arg(long)]
    best: bool,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    match s {
        "nln" => Ok(ModelKind::Nln),
        "mf" => Ok(ModelKind::Mf),
        _ => Err(format!("unknown model `{s}` (nln or mf)")),
    }
}

fn parse_range(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Config(format!("bad range `{s}`, expected lo-hi"));
    let (a, b) = s.split_once('-').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn assignment_path(expressions: &Path) -> PathBuf {
    let stem = expressions.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    expressions.with_file_name(format!("{stem}.assignment.csv"))
}

fn simgen(args: SimgenArgs) -> Result<(), CliError> {
    let cfg = match &args.config {
        Some(p) => ExperimentConfig::load_with_defaults(p)?,
        None => ExperimentConfig::default(),
    };
    let mut gen = cfg.data.gen.clone().unwrap_or_else(|| GenConfig::new(1000, 5000, 1));
    if let Some(n) = args.n {
        gen.n = n;
    }
    if let Some(m) = args.m {
        gen.m = m;
    }
    if let Some(s) = args.seed {
        gen.seed = s;
    }
    if let Some(c) = &args.clauses {
        gen.clauses = parse_range(c)?;
    }
    if let Some(l) = &args.literals {
        gen.literals = parse_range(l)?;
    }
    let out = args
        .out
        .or(cfg.data.expressions.clone())
        .ok_or_else(|| CliError::Config("simgen needs --out or data.expressions".into()))?;
    let assign = cfg.data.assignment.clone().unwrap_or_else(|| assignment_path(&out));
    let (truth, data) = generate_dataset(&gen).map_err(|e| CliError::Config(e.to_string()))?;

    let header = output::header(&nlogic_core::training::config_hash(&gen), &[gen.seed]);
    let mut w = output::create(&out, &header)?;
    write_expressions(&mut w, &data).map_err(|e| io_err(&out, e))?;
    std::io::Write::flush(&mut w).map_err(|e| io_err(&out, e))?;
    output::write_assignment(&assign, &header, &truth)?;

    let positives = data.iter().filter(|d| d.label).count();
    println!(
        "wrote {} expressions to {}; label base rate {:.4}",
        data.len(),
        out.display(),
        positives as f64 / data.len() as f64
    );
    Ok(())
}

fn load_config(c: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load_with_defaults(&c.config)?;
    if let Some(s) = &c.seeds {
        cfg.train.seeds = parse_seeds(s)?;
    }
    if let Some(v) = c.lambda_l {
        cfg.train.reg_weights.lambda_l = v;
    }
    if let Some(v) = c.lambda_len {
        cfg.train.reg_weights.lambda_len = v;
    }
    if let Some(v) = c.lambda_theta {
        cfg.train.reg_weights.lambda_theta = v;
    }
    if let Some(v) = c.epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = c.patience {
        cfg.train.patience = v;
    }
    if let Some(m) = c.model {
        cfg.model = m;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn truth_of(prepared: &Prepared) -> Option<&nlogic_core::logic::Assignment> {
    match prepared {
        Prepared::Sim { truth, .. } => truth.as_ref(),
        _ => None,
    }
}

fn save_config(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join("config.json");
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(&path, json).map_err(|e| io_err(&path, e))
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    let prepared = run::prepare(&cfg)?;
    let ctx = RunContext {
        cfg: &cfg,
        hash: cfg.hash(),
        out_dir: cfg.out_dir.clone(),
        truth: truth_of(&prepared),
        quiet: args.common.quiet,
    };
    save_config(&cfg, &ctx.out_dir)?;
    let results = match &args.resume {
        Some(ckpt) => vec![run::resume(&ctx, &prepared, ckpt)?],
        None => run::run_experiment(&ctx, &prepared, args.common.jobs)?,
    };
    let seeds: Vec<u64> = results.iter().map(|r| r.seed).collect();
    let (mut lines, summary) = run::result_lines(&run::experiment_id(&cfg), &results)?;
    lines.insert(0, "experiment,seed,metric,value,stderr".into());
    // A resumed seed reports next to its own curves and leaves the run summary alone.
    let results_path = match (&args.resume, seeds.as_slice()) {
        (Some(_), [s]) => ctx.out_dir.join(format!("seed-{s}")).join("results.csv"),
        _ => ctx.out_dir.join("results.csv"),
    };
    output::write_lines(&results_path, &output::header(&ctx.hash, &seeds), &lines)?;
    for r in &results {
        let m = cfg.train.eval_metric;
        println!(
            "seed {}: best epoch {} of {}, test {m} {:.4}",
            r.seed,
            r.best_epoch,
            r.epochs,
            r.test.get(m).unwrap_or(f64::NAN)
        );
    }
    for (m, s) in &summary {
        println!("{m}: {s}");
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let base = load_config(&args.common)?;
    let grid = parse_grid(&args.grid)?;
    if args.param != "lambda_l" && args.param != "lambda_len" {
        return Err(CliError::Config(format!("cannot sweep `{}` (lambda_l or lambda_len)", args.param)));
    }
    // The data is shared; only the weight changes between grid points.
    let prepared = run::prepare(&base)?;
    let mut rows = Vec::new();
    let mut summary_lines = vec!["param,value,metric,mean,stderr".to_string()];
    for &v in &grid {
        let mut cfg = base.clone();
        match args.param.as_str() {
            "lambda_l" => cfg.train.reg_weights.lambda_l = v,
            _ => cfg.train.reg_weights.lambda_len = v,
        }
        cfg.validate()?;
        let ctx = RunContext {
            cfg: &cfg,
            hash: cfg.hash(),
            out_dir: base.out_dir.join(format!("{}={v}", args.param)),
            truth: truth_of(&prepared),
            quiet: args.common.quiet,
        };
        save_config(&cfg, &ctx.out_dir)?;
        let results = run::run_experiment(&ctx, &prepared, args.common.jobs)?;
        let (_, summary) = run::result_lines("", &results)?;
        for (m, s) in &summary {
            summary_lines.push(format!("{},{v},{m},{},{}", args.param, s.mean, s.stderr));
            println!("{}={v}: {m} {s}", args.param);
        }
        rows.extend(results.into_iter().map(|r| (v, r)));
    }
    // One row per grid point and seed, one column per metric.
    let metrics: BTreeSet<Metric> = rows.iter().flat_map(|(_, r)| r.test.metrics.keys().copied()).collect();
    let names: Vec<&str> = metrics.iter().map(|m| m.name()).collect();
    let mut lines = vec![format!("param,value,seed,{}", names.join(","))];
    for (v, r) in &rows {
        let cells: Vec<String> = metrics
            .iter()
            .map(|m| r.test.get(*m).map(|x| x.to_string()).unwrap_or_default())
            .collect();
        lines.push(format!("{},{v},{},{}", args.param, r.seed, cells.join(",")));
    }
    let header = output::header(&base.hash(), &base.train.seeds);
    output::write_lines(&base.out_dir.join("sweep.csv"), &header, &lines)?;
    output::write_lines(&base.out_dir.join("sweep_summary.csv"), &header, &summary_lines)?;
    Ok(())
}

#[derive(serde::Serialize)]
struct ClusterReport {
    purity: f64,
    sizes: [usize; 2],
    iterations: usize,
}

fn export(args: ExportArgs) -> Result<(), CliError> {
    let ck: Checkpoint<NlnModel> = Checkpoint::load(&args.checkpoint)?;
    let model = if args.best { &ck.best_model } else { &ck.model };
    let truth = match &args.assignment {
        Some(p) => Some(output::read_assignment(p)?),
        None => None,
    };
    let table = model.embedding_table();
    if let Some(t) = &truth {
        if t.len() != table.nrows() {
            return Err(CliError::Data(format!(
                "assignment has {} variables but the model has {}",
                t.len(),
                table.nrows()
            )));
        }
    }
    let header = output::header(&ck.config_hash, &[ck.seed]);
    output::write_embeddings(&args.out, &header, table, truth.as_ref())?;
    println!("wrote {} embeddings of dimension {} to {}", table.nrows(), table.ncols(), args.out.display());
    if let Some(t) = &truth {
        let diag = cluster_variables(table, t, ck.seed).map_err(|e| CliError::Runtime(e.to_string()))?;
        let report = ClusterReport {
            purity: diag.purity,
            sizes: diag.sizes,
            iterations: diag.iterations,
        };
        let path = args.out.with_extension("cluster.json");
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &report).map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("cluster purity {:.4} (sizes {:?})", diag.purity, diag.sizes);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Command::Simgen(a) => simgen(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::ExportEmbeddings(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nlogic: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
