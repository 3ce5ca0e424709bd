//! `madl` experiment runner.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use madl::checkpoint::Checkpoint;
use madl::experiment::{self, ExperimentConfig, MeanStd, RunReport};
use madl::io;

#[derive(Parser)]
#[command(name = "madl", version, about = "Multi-annotator deep learning from noisy crowd labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset with simulated annotators and write it as CSV files.
    Simulate(Common),
    /// Train over all repetitions and write a JSON report plus checkpoints.
    Train(Common),
    /// Score a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// One training run per annotation ratio.
    SweepRatio(SweepArgs),
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; reports go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Class dependency and instance dependence, e.g. fxinst or ixnoinst.
    #[arg(long)]
    variant: Option<String>,
    /// on or off.
    #[arg(long)]
    weights: Option<String>,
    /// none, lb or ub.
    #[arg(long)]
    baseline: Option<String>,
    /// onehot or prior.
    #[arg(long)]
    features: Option<String>,
    /// off, standard or lr:wd cells separated by commas.
    #[arg(long)]
    grid: Option<String>,
    /// Overrides annotators.ratio.
    #[arg(long)]
    ratio: Option<f64>,
    /// Additional key=value overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory in the CSV layout.
    #[arg(long)]
    data: PathBuf,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Config used when annotations have to be simulated from labels.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated ratios; defaults to sweep.ratios.
    #[arg(long, value_delimiter = ',')]
    ratios: Vec<f64>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut kv = match &self.config {
            Some(p) => io::read_kv(p)?,
            None => BTreeMap::new(),
        };
        let mut set = |k: &str, v: String| {
            kv.insert(k.to_owned(), v);
        };
        if let Some(s) = self.seed {
            set("run.seed", s.to_string());
        }
        if let Some(v) = &self.variant {
            set("model.variant", v.clone());
        }
        if let Some(v) = &self.weights {
            set("train.weights", v.clone());
        }
        if let Some(v) = &self.baseline {
            set("run.baseline", v.clone());
        }
        if let Some(v) = &self.features {
            set("annotators.features", v.clone());
        }
        if let Some(v) = &self.grid {
            set("train.grid", v.clone());
        }
        if let Some(r) = self.ratio {
            set("annotators.ratio", r.to_string());
        }
        for o in &self.overrides {
            let (k, v) = o.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got '{o}'"))?;
            set(k.trim(), v.trim().to_owned());
        }
        // A variant in the file is applied before explicit class_dependency keys.
        let mut cfg = ExperimentConfig::default();
        if let Some(v) = kv.remove("model.variant") {
            cfg.apply_kv(&BTreeMap::from([("model.variant".to_owned(), v)]))?;
        }
        cfg.apply_kv(&kv)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn threads() -> Result<usize> {
    match std::env::var("MADL_THREADS") {
        Ok(v) => {
            let n: usize = v.parse().with_context(|| format!("MADL_THREADS='{v}' is not a count"))?;
            if n == 0 {
                bail!("MADL_THREADS must be at least 1");
            }
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn emit(out: Option<&Path>, name: &str, json: &str) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            let path = dir.join(name);
            fs::write(&path, json).with_context(|| format!("cannot write {}", path.display()))?;
            eprintln!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn fmt(ms: Option<&MeanStd>) -> String {
    ms.map_or("-".into(), |m| format!("{:.3} ± {:.3}", m.mean, m.std))
}

fn print_summary(label: &str, r: &RunReport) {
    eprintln!(
        "{label}: {} repetition(s) in {:.1}s; GT-ACC {}  AP-ACC {}  ANNOT-ACC {}  MR-ACC {}",
        r.repetitions.len(),
        r.seconds,
        fmt(r.summary.get("gt_acc")),
        fmt(r.summary.get("ap_acc")),
        fmt(r.annotation_accuracy.as_ref()),
        fmt(r.majority_vote_accuracy.as_ref()),
    );
    if let Some(held) = r.heldout_summary.get("ap_acc") {
        eprintln!("  held-out annotators AP-ACC {}", fmt(Some(held)));
    }
}

fn simulate(args: &Common) -> Result<()> {
    let cfg = args.config()?;
    let Some(out) = &args.out else { bail!("simulate needs --out DIR") };
    let data = experiment::prepare(&cfg, cfg.seed)?;
    data.save(out).with_context(|| format!("cannot write dataset to {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.to_kv_string())?;
    eprintln!(
        "wrote {} instances, {} annotators, {} annotations to {}",
        data.dataset.len(),
        data.dataset.annotators(),
        data.dataset.z.count(),
        out.display()
    );
    Ok(())
}

fn train(args: &Common) -> Result<()> {
    let cfg = args.config()?;
    let start = std::time::Instant::now();
    let outputs = experiment::run_all(&cfg, threads()?)?;
    let report = experiment::report(&cfg, &outputs, start.elapsed().as_secs_f64());
    if let Some(out) = &args.out {
        for o in &outputs {
            let dir = out.join(format!("rep-{}", o.report.repetition));
            o.data.save(&dir.join("data"))?;
            o.checkpoint.save(&dir.join("checkpoint.json"))?;
        }
    }
    print_summary("train", &report);
    emit(args.out.as_deref(), "report.json", &serde_json::to_string_pretty(&report)?)
}

fn eval(args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", args.checkpoint.display()))?;
    let cfg = match &args.config {
        Some(p) => ExperimentConfig::from_kv(&io::read_kv(p)?)?,
        None => ExperimentConfig::default(),
    };
    let data = experiment::load_dir(&cfg, &args.data, cfg.seed)?;
    let report = experiment::evaluate_checkpoint(&ck, &data, &args.split)?;
    if let Some(n) = &report.notice {
        eprintln!("notice: {n}");
    }
    emit(args.out.as_deref(), "eval.json", &serde_json::to_string_pretty(&report)?)
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let cfg = args.common.config()?;
    let ratios = if args.ratios.is_empty() { cfg.sweep_ratios.clone() } else { args.ratios.clone() };
    let report = experiment::sweep_ratio(&cfg, &ratios, threads()?)?;
    for row in &report.rows {
        print_summary(&format!("ratio {}", row.ratio), &row.report);
    }
    emit(args.common.out.as_deref(), "sweep.json", &serde_json::to_string_pretty(&report)?)
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::SweepRatio(a) => sweep(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
