//! Configuration-driven experiment runner behind the `fedmac` binary.
//!
//! Exit codes: 0 success, 1 output failure, 2 configuration or input error,
//! 3 numerical divergence during training.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    concat_batches, dirichlet_partition, gen_synthetic, load_idx, shard_partition, FederatedDataset,
    SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::fedcore::{run_experiment, HyperParams, RunOptions, Strategy};
use crate::metrics::{best_summary, write_history_csv, BestSummary, SCHEMA_VERSION};
use crate::models::{ModelKind, ModelSpec};
use crate::theorylab::{sweep, write_sweep_csv, SweepConfig};

#[derive(Debug, Parser)]
#[command(name = "fedmac", version, about = "Sparse personalized federated learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run federated training experiments.
    Fed(RunArgs),
    /// Run a sparse-recovery phase-transition sweep.
    Theory(RunArgs),
    /// Render run summaries as a markdown table.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the output directory of the config.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Comma-separated seeds overriding the config.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPair {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetConfig {
    Synthetic(SyntheticConfig),
    /// Label shards over the pooled IDX files.
    Shards {
        files: Vec<IdxPair>,
        n_clients: usize,
        labels_per_client: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Dirichlet label partition over the pooled IDX files.
    Dirichlet {
        files: Vec<IdxPair>,
        n_clients: usize,
        alpha: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetConfig {
    pub fn n_clients(&self) -> usize {
        match self {
            DatasetConfig::Synthetic(s) => s.n_clients,
            DatasetConfig::Shards { n_clients, .. } | DatasetConfig::Dirichlet { n_clients, .. } => *n_clients,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden_dim: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub label: Option<String>,
    pub strategy: Strategy,
    /// Hyperparameters overriding the shared `[hyper]` table for this run.
    #[serde(default)]
    pub hyper: toml::Table,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub hyper: toml::Table,
    pub runs: Vec<RunConfig>,
    #[serde(default)]
    pub options: RunOptions,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    pub sweep: SweepConfig,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub output: OutputConfig,
}

/// A fully resolved federated experiment.
#[derive(Debug, Clone)]
pub struct FedPlan {
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub runs: Vec<(String, Strategy, HyperParams)>,
    pub options: RunOptions,
    pub out_dir: PathBuf,
}

fn config_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_config(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| config_err(path, format!("cannot read config: {e}")))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Parses and checks a federated config: every referenced file must exist, seeds
/// and runs must be nonempty, labels unique and hyperparameters well formed.
pub fn load_fed_config(path: &Path) -> Result<FedPlan> {
    let text = read_config(path)?;
    let cfg: FedConfig = toml::from_str(&text).map_err(|e| config_err(path, e.to_string()))?;
    let base = config_dir(path);

    if cfg.seeds.is_empty() {
        return Err(config_err(path, "seeds must be nonempty"));
    }
    if cfg.runs.is_empty() {
        return Err(config_err(path, "at least one [[runs]] entry is required"));
    }
    let mut dataset = cfg.dataset;
    if let DatasetConfig::Shards { files, .. } | DatasetConfig::Dirichlet { files, .. } = &mut dataset {
        if files.is_empty() {
            return Err(config_err(path, "dataset.files must list at least one IDX pair"));
        }
        for f in files.iter_mut() {
            f.images = resolve(&base, &f.images);
            f.labels = resolve(&base, &f.labels);
            for p in [&f.images, &f.labels] {
                if !p.is_file() {
                    return Err(config_err(path, format!("dataset file not found: {}", p.display())));
                }
            }
        }
    }
    if cfg.model.kind == ModelKind::Mlp2 && cfg.model.hidden_dim.is_none() {
        return Err(config_err(path, "model.hidden_dim is required for mlp2"));
    }

    let mut labels = BTreeSet::new();
    let mut runs = Vec::new();
    for (k, run) in cfg.runs.iter().enumerate() {
        let label = run.label.clone().unwrap_or_else(|| run.strategy.name().to_string());
        if !labels.insert(label.clone()) {
            return Err(config_err(path, format!("duplicate run label '{label}'")));
        }
        let mut table = cfg.hyper.clone();
        for (key, v) in &run.hyper {
            table.insert(key.clone(), v.clone());
        }
        let hp: HyperParams = toml::Value::Table(table)
            .try_into()
            .map_err(|e| config_err(path, format!("runs[{k}] ({label}) hyper: {e}")))?;
        hp.validate(dataset.n_clients())
            .map_err(|e| config_err(path, format!("runs[{k}] ({label}): {e}")))?;
        run.strategy
            .validate()
            .map_err(|e| config_err(path, format!("runs[{k}] ({label}): {e}")))?;
        runs.push((label, run.strategy, hp));
    }
    cfg.options
        .eval
        .validate()
        .map_err(|e| config_err(path, format!("options: {e}")))?;
    let out_dir = cfg
        .output
        .dir
        .map(|d| resolve(&base, &d))
        .unwrap_or_else(|| base.join("results"));
    Ok(FedPlan {
        seeds: cfg.seeds,
        dataset,
        model: cfg.model,
        runs,
        options: cfg.options,
        out_dir,
    })
}

pub fn load_theory_config(path: &Path) -> Result<(SweepConfig, Vec<u64>, PathBuf)> {
    let text = read_config(path)?;
    let cfg: TheoryConfig = toml::from_str(&text).map_err(|e| config_err(path, e.to_string()))?;
    cfg.sweep
        .validate()
        .map_err(|e| config_err(path, format!("sweep: {e}")))?;
    let seeds = cfg.seeds.unwrap_or_else(|| vec![cfg.sweep.seed]);
    if seeds.is_empty() {
        return Err(config_err(path, "seeds must be nonempty"));
    }
    let base = config_dir(path);
    let out = cfg
        .output
        .dir
        .map(|d| resolve(&base, &d))
        .unwrap_or_else(|| base.join("results"));
    Ok((cfg.sweep, seeds, out))
}

pub fn build_dataset(cfg: &DatasetConfig) -> Result<FederatedDataset> {
    let pooled = |files: &[IdxPair]| -> Result<_> {
        let parts = files
            .iter()
            .map(|f| load_idx(&f.images, &f.labels))
            .collect::<Result<Vec<_>>>()?;
        concat_batches(&parts)
    };
    match cfg {
        DatasetConfig::Synthetic(s) => gen_synthetic(s),
        DatasetConfig::Shards {
            files,
            n_clients,
            labels_per_client,
            seed,
        } => shard_partition(&pooled(files)?, *n_clients, *labels_per_client, *seed),
        DatasetConfig::Dirichlet {
            files,
            n_clients,
            alpha,
            seed,
        } => dirichlet_partition(&pooled(files)?, *n_clients, *alpha, *seed),
    }
}

pub fn model_spec(cfg: &ModelConfig, data: &FederatedDataset) -> ModelSpec {
    match cfg.kind {
        ModelKind::Mlr => ModelSpec::mlr(data.input_dim, data.num_classes),
        ModelKind::Mlp2 => ModelSpec::mlp2(data.input_dim, cfg.hidden_dim.unwrap_or(0), data.num_classes),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub csv: String,
    pub best: BestSummary,
    pub final_gm_sparsity: f64,
    pub final_pm_sparsity: Option<f64>,
    pub cum_comm_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub strategy: String,
    pub seeds: Vec<SeedSummary>,
    pub gm: Stat,
    pub pm: Option<Stat>,
    pub gm_sparsity: Stat,
    pub pm_sparsity: Option<Stat>,
    pub cum_comm_bits: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedSummary {
    pub schema_version: String,
    pub dataset: String,
    pub runs: Vec<RunSummary>,
}

fn summarize(label: &str, strategy: &Strategy, per_seed: Vec<SeedSummary>) -> RunSummary {
    let col = |f: &dyn Fn(&SeedSummary) -> Option<f64>| -> Option<Stat> {
        let xs: Option<Vec<f64>> = per_seed.iter().map(f).collect();
        xs.map(|v| Stat::of(&v))
    };
    RunSummary {
        label: label.to_string(),
        strategy: strategy.name().to_string(),
        gm: col(&|s| Some(s.best.best_gm)).expect("always present"),
        pm: col(&|s| s.best.best_pm),
        gm_sparsity: col(&|s| Some(s.final_gm_sparsity)).expect("always present"),
        pm_sparsity: col(&|s| s.final_pm_sparsity),
        cum_comm_bits: col(&|s| Some(s.cum_comm_bits as f64)).expect("always present"),
        seeds: per_seed,
    }
}

/// Runs every (run, seed) pair of `plan`, writing one history CSV per pair and a
/// `summary.json`. Returns the summary.
pub fn run_fed_plan(plan: &FedPlan) -> Result<FedSummary> {
    let data = build_dataset(&plan.dataset)?;
    let spec = model_spec(&plan.model, &data);
    std::fs::create_dir_all(&plan.out_dir).map_err(|e| Error::io(&plan.out_dir, e))?;

    let jobs: Vec<(usize, u64)> = (0..plan.runs.len())
        .flat_map(|r| plan.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let results: Vec<SeedSummary> = jobs
        .par_iter()
        .map(|&(r, seed)| {
            let (label, strategy, hp) = &plan.runs[r];
            let history = run_experiment(&data, spec, hp, strategy, seed, &plan.options)?;
            let csv = format!("{label}_seed{seed}.csv");
            write_history_csv(&plan.out_dir.join(&csv), &history)?;
            let last = history.last().expect("history has the initial record");
            Ok(SeedSummary {
                seed,
                csv,
                best: best_summary(&history)?,
                final_gm_sparsity: last.gm_sparsity,
                final_pm_sparsity: last.mean_pm_sparsity,
                cum_comm_bits: last.cum_comm_bits,
            })
        })
        .collect::<Result<_>>()?;

    let n_seeds = plan.seeds.len();
    let runs = plan
        .runs
        .iter()
        .enumerate()
        .map(|(r, (label, strategy, _))| {
            summarize(label, strategy, results[r * n_seeds..(r + 1) * n_seeds].to_vec())
        })
        .collect();
    let summary = FedSummary {
        schema_version: SCHEMA_VERSION.to_string(),
        dataset: data.provenance.clone(),
        runs,
    };
    let path = plan.out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// Runs the sweep once per seed, writing `sweep_seed{seed}.csv` files. Returns the
/// threshold report printed by the CLI.
pub fn run_theory_plan(cfg: &SweepConfig, seeds: &[u64], out_dir: &Path) -> Result<String> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut report = String::new();
    for &seed in seeds {
        let run = SweepConfig {
            seed,
            ..cfg.clone()
        };
        let res = sweep(&run)?;
        write_sweep_csv(&out_dir.join(format!("sweep_seed{seed}.csv")), &res.rows)?;
        for t in &res.thresholds {
            let n = t.n_d.map_or("none".to_string(), |n| n.to_string());
            let _ = writeln!(report, "seed {seed} {} zeta={:e} threshold={n}", t.prior.name(), t.zeta);
        }
    }
    Ok(report)
}

fn fmt_pct(s: &Stat) -> String {
    format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std)
}

/// Markdown table of runs across summary files.
pub fn compare(paths: &[PathBuf]) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::invalid("compare needs at least one summary"));
    }
    let mut out = String::from("| run | GM acc (%) | PM acc (%) | GM nonzero (%) | comm bits |\n");
    out.push_str("|---|---|---|---|---|\n");
    for p in paths {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let version = value.get("schema_version").and_then(|v| v.as_str()).unwrap_or("<missing>");
        if version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "{} has schema {version}, expected {SCHEMA_VERSION}",
                p.display()
            )));
        }
        let summary: FedSummary = serde_json::from_value(value)?;
        for r in &summary.runs {
            let pm = r.pm.as_ref().map_or("–".to_string(), fmt_pct);
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {:.3e} ± {:.1e} |",
                r.label,
                fmt_pct(&r.gm),
                pm,
                fmt_pct(&r.gm_sparsity),
                r.cum_comm_bits.mean,
                r.cum_comm_bits.std
            );
        }
    }
    Ok(out)
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Io { .. } | Error::Csv(_) | Error::Json(_) => 1,
        _ => 2,
    }
}

fn set_threads(n: Option<usize>) {
    if let Some(n) = n {
        // an already initialized pool keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Executes a parsed command line and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result: Result<String> = match cli.command {
        Command::Fed(args) => (|| {
            set_threads(args.threads);
            let mut plan = load_fed_config(&args.config)?;
            if let Some(seeds) = args.seeds {
                if seeds.is_empty() {
                    return Err(config_err(&args.config, "--seeds must be nonempty"));
                }
                plan.seeds = seeds;
            }
            if let Some(dir) = args.out_dir {
                plan.out_dir = dir;
            }
            let summary = run_fed_plan(&plan)?;
            let mut text = String::new();
            for r in &summary.runs {
                let pm = r.pm.as_ref().map_or("–".to_string(), fmt_pct);
                let _ = writeln!(text, "{}: GM {} PM {}", r.label, fmt_pct(&r.gm), pm);
            }
            Ok(text)
        })(),
        Command::Theory(args) => (|| {
            set_threads(args.threads);
            let (cfg, mut seeds, mut out) = load_theory_config(&args.config)?;
            if let Some(s) = args.seeds {
                seeds = s;
            }
            if let Some(dir) = args.out_dir {
                out = dir;
            }
            run_theory_plan(&cfg, &seeds, &out)
        })(),
        Command::Compare { reports } => compare(&reports),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
