use std::error::Error as StdError;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use loffta::bench::{bench_infer, bench_train, MIN_STEPS};
use loffta::model::load_checkpoint;
use loffta::provider::build_cache;
use loffta::reduce::{pool_cache, PoolMode};
use loffta::store::{validate_cache, Cache};
use loffta::trainer::{evaluate, train_with, TrainOptions};
use loffta::{Dtype, SyntheticSpec, TrainConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type CliResult = Result<(), Box<dyn StdError>>;

#[derive(Parser)]
#[command(name = "loffta", version, about = "Cache backbone features once, then train a compact classifier on them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a feature cache from a provider.
    Extract(ExtractArgs),
    /// Spatially pool every record of a cache into a new cache.
    Pool(PoolArgs),
    /// Check a cache's manifest and shards.
    Validate {
        #[arg(long)]
        cache: PathBuf,
    },
    /// Train a classifier on a cache.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Measure throughput and tracked memory.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderKind {
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F16,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F16 => Dtype::F16,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Max,
    Average,
}

impl From<ModeArg> for PoolMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Max => PoolMode::Max,
            ModeArg::Average => PoolMode::Average,
        }
    }
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long, value_enum)]
    provider: ProviderKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    /// Training records per class.
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    val_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    dtype: Option<DtypeArg>,
}

#[derive(Args)]
struct PoolArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "max")]
    mode: ModeArg,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    kernel: u32,
    /// Defaults to the kernel size.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    stride: Option<u32>,
}

/// Flags that override values from `--config`.
#[derive(Args)]
struct ConfigArgs {
    /// JSON file with training config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, Box<dyn StdError>> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
                serde_json::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.max_steps {
            cfg.max_steps = Some(v);
        }
        if let Some(v) = self.peak_lr {
            cfg.peak_lr = v;
        }
        if let Some(v) = &self.init_checkpoint {
            cfg.init_checkpoint = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Time full training steps.
    Train {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(MIN_STEPS as i64..))]
        steps: u32,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        json: bool,
    },
    /// Time forward passes over a split.
    Infer {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
        batch_size: u32,
        #[arg(long)]
        json: bool,
    },
}

fn extract(a: &ExtractArgs) -> CliResult {
    let ProviderKind::Synthetic = a.provider;
    let mut spec = SyntheticSpec::default();
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut spec.classes, a.classes);
    set(&mut spec.train_per_class, a.per_class);
    set(&mut spec.val_per_class, a.val_per_class);
    set(&mut spec.test_per_class, a.test_per_class);
    set(&mut spec.d, a.d);
    set(&mut spec.h, a.h);
    set(&mut spec.w, a.w);
    if let Some(v) = a.gamma {
        spec.gamma = v;
    }
    if let Some(v) = a.sigma {
        spec.sigma = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.dtype {
        spec.dtype = v.into();
    }
    let m = build_cache(&spec, &a.out)?;
    println!("wrote {} ({}x{}x{} {})", a.out.display(), m.h, m.w, m.d, m.dtype);
    for (split, n) in &m.splits {
        println!("  {split}: {n} records");
    }
    Ok(())
}

fn pool(a: &PoolArgs) -> CliResult {
    let kernel = a.kernel as usize;
    let stride = a.stride.map_or(kernel, |s| s as usize);
    let m = pool_cache(&a.input, &a.out, a.mode.into(), kernel, stride)?;
    println!("wrote {} ({}x{}x{})", a.out.display(), m.h, m.w, m.d);
    Ok(())
}

fn validate(cache: &Path) -> CliResult {
    let report = validate_cache(cache);
    for w in &report.warnings {
        println!("warning: {w}");
    }
    for e in &report.errors {
        println!("error: {e}");
    }
    if !report.is_ok() {
        return Err(format!("cache at {} has {} error(s)", cache.display(), report.errors.len()).into());
    }
    println!("{}: ok", cache.display());
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult {
    let cfg = a.config.resolve()?;
    fs::create_dir_all(&a.out).map_err(|e| format!("cannot create {}: {e}", a.out.display()))?;
    let echo = a.out.join("config.json");
    fs::write(&echo, serde_json::to_string_pretty(&cfg)?).map_err(|e| format!("cannot write {}: {e}", echo.display()))?;
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        ..TrainOptions::from_env()
    };
    let outcome = train_with(&a.cache, &cfg, &opts)?;
    for e in outcome.log.entries.iter().filter(|e| e.split != "train") {
        let metric = e.metric.map_or("-".to_string(), |m| format!("{m:.4}"));
        println!("epoch {} step {} {} loss {:.4} metric {metric} lr {:.2e}", e.epoch, e.step, e.split, e.loss, e.lr);
    }
    let best = outcome.best_metric.map_or("-".to_string(), |m| format!("{m:.4}"));
    println!("trained {} steps, best val metric {best}, outputs in {}", outcome.steps, a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> CliResult {
    let cache = Cache::open(&a.cache)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let m = evaluate(&cache, &a.split, &ck.params)?;
    if a.json {
        println!("{}", serde_json::to_string(&m)?);
    } else {
        println!(
            "{}: accuracy {:.4} mean_class_recall {:.4} loss {:.4}",
            a.split, m.accuracy, m.mean_class_recall, m.loss
        );
    }
    Ok(())
}

fn bench(cmd: &BenchCommand) -> CliResult {
    match cmd {
        BenchCommand::Train { cache, steps, config, json } => {
            let cfg = config.resolve()?;
            let cache = Cache::open(cache)?;
            let r = bench_train(&cache, &cfg, *steps as usize, TrainOptions::from_env().workers)?;
            print_report(*json, || serde_json::to_string_pretty(&r), || r.to_table())
        }
        BenchCommand::Infer { cache, checkpoint, split, batch_size, json } => {
            let cache = Cache::open(cache)?;
            let ck = load_checkpoint(checkpoint)?;
            let r = bench_infer(&cache, split, &ck.params, *batch_size as usize)?;
            print_report(*json, || serde_json::to_string_pretty(&r), || r.to_table())
        }
    }
}

fn print_report(
    json: bool,
    as_json: impl FnOnce() -> serde_json::Result<String>,
    table: impl FnOnce() -> String,
) -> CliResult {
    if json {
        println!("{}", as_json()?);
    } else {
        print!("{}", table());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Extract(a) => extract(a),
        Command::Pool(a) => pool(a),
        Command::Validate { cache } => validate(cache),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(b) => bench(b),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
