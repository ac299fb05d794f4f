use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use pcv_core::harness::{
    aggregate, read_log, render_report, run_sweep, DataConfig, DatasetChoice, PropertySpec, ReportFormat,
    SweepConfig, SweepOptions, CONFIG_FILE, LOG_FILE,
};
use pcv_core::model_io::{load_model, save_model, ModelMeta};
use pcv_core::prune::{apply_prune, compute_plan, sparsity_report};
use pcv_core::train::{init_network, train, TrainConfig, TrainResult};
use pcv_core::verify::{verify, VerifyConfig};
use pcv_core::{Network, ResNet4Config};

#[derive(Parser)]
#[command(name = "pcv", version, about = "Train, prune and verify small residual ReLU networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh desk-scale network to the accuracy threshold
    Train(TrainArgs),
    /// Globally prune a model's conv weights by magnitude (no retraining)
    Prune(PruneArgs),
    /// Retrain a pruned model with its masks held fixed
    Finetune(TrainArgs),
    /// Check one local-robustness property
    Verify(VerifyArgs),
    /// Run or resume a seed × ratio × epsilon sweep
    Sweep(SweepArgs),
    /// Render the report of a results directory
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long, default_value = "mnist")]
    dataset: DatasetChoice,
    /// Directory with the four MNIST IDX files
    #[arg(long, env = "PCV_MNIST_DIR", default_value = "data/mnist")]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 10)]
    surrogate_seed: u64,
    #[arg(long, default_value_t = 16)]
    surrogate_size: usize,
}

impl DataArgs {
    fn config(&self) -> DataConfig {
        DataConfig {
            n_train: self.n_train,
            n_test: self.n_test,
            surrogate_seed: self.surrogate_seed,
            surrogate_size: self.surrogate_size,
            ..DataConfig::desk(self.dataset, &self.data_dir)
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Input model (finetune only)
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    seed: u64,
    #[arg(long, default_value_t = 0.97)]
    threshold: f64,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history as JSON lines
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    ratio: f64,
    #[arg(long)]
    out: PathBuf,
    /// Write the pruning plan summary as JSON
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// Property JSON: {"dataset", "index", "epsilon", optional "label"}
    #[arg(long)]
    property: PathBuf,
    #[arg(long, default_value_t = 300.0)]
    timeout_s: f64,
    #[arg(long, default_value_t = 10_000)]
    max_subdomains: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the outcome here as well as to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, env = "PCV_RESULTS_DIR")]
    results: PathBuf,
    /// Start from the stored config of an existing results directory
    #[arg(long)]
    resume: bool,
    /// Base settings before flag overrides: desk or full
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    #[arg(long)]
    n_inputs: Option<usize>,
    #[arg(long)]
    timeout_s: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_subdomains: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Stop after this many new verification records
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, env = "PCV_RESULTS_DIR")]
    results: PathBuf,
    #[arg(long, default_value = "markdown")]
    format: ReportFormat,
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let base = TrainConfig::desk(a.seed);
    TrainConfig {
        accuracy_threshold: a.threshold,
        max_epochs: a.max_epochs.unwrap_or(base.max_epochs),
        lr0: a.lr.unwrap_or(base.lr0),
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        ..base
    }
}

fn finish_training(a: &TrainArgs, arch: Option<ResNet4Config>, ratio: f64, cfg: TrainConfig, res: TrainResult) -> Result<()> {
    let meta = ModelMeta {
        arch,
        train_config: Some(cfg),
        seed: Some(a.seed),
        prune_ratio: ratio,
        accuracy: Some(res.final_accuracy),
        epochs: Some(res.epochs_run),
    };
    save_model(&a.out, &res.network, &meta)?;
    if let Some(h) = &a.history {
        let f = fs::File::create(h).with_context(|| format!("creating {}", h.display()))?;
        res.write_history(std::io::BufWriter::new(f))?;
    }
    print_json(&json!({
        "model": a.out,
        "accuracy": res.final_accuracy,
        "epochs": res.epochs_run,
        "stop_reason": res.stop_reason,
    }))?;
    if !res.reached_threshold() {
        bail!("accuracy {:.4} is below the threshold {}", res.final_accuracy, a.threshold);
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let data = a.data.config();
    let (tr, te) = data.load()?;
    let arch = ResNet4Config::desk(data.image_shape(), data.num_classes());
    let cfg = train_config(a);
    let res = train(init_network(&arch, a.seed)?, &tr, &te, &cfg, false)?;
    finish_training(a, Some(arch), 0.0, cfg, res)
}

fn cmd_finetune(a: &TrainArgs) -> Result<()> {
    let Some(path) = &a.model else {
        bail!("finetune needs --model");
    };
    let (net, header) = load_model(path)?;
    let (tr, te) = a.data.config().load()?;
    let cfg = train_config(a);
    let res = train(net, &tr, &te, &cfg, true)?;
    finish_training(a, header.meta.arch, header.meta.prune_ratio, cfg, res)
}

fn cmd_prune(a: &PruneArgs) -> Result<()> {
    let (net, header) = load_model(&a.model)?;
    let plan = compute_plan(&net, a.ratio)?;
    let pruned = apply_prune(&net, &plan)?;
    let meta = ModelMeta {
        prune_ratio: a.ratio,
        accuracy: None,
        ..header.meta
    };
    save_model(&a.out, &pruned, &meta)?;
    if let Some(p) = &a.plan {
        fs::write(p, plan.to_json()?).with_context(|| format!("writing {}", p.display()))?;
    }
    print_json(&json!({
        "model": a.out,
        "pruned": plan.pruned_count(),
        "prunable": plan.total_prunable,
        "sparsity": sparsity_report(&pruned),
    }))
}

fn cmd_verify(a: &VerifyArgs) -> Result<()> {
    let (net, _) = load_model(&a.model)?;
    let text = fs::read_to_string(&a.property).with_context(|| format!("reading {}", a.property.display()))?;
    let spec = PropertySpec::parse(&text).with_context(|| format!("parsing {}", a.property.display()))?;
    let data = DataArgs {
        dataset: spec.dataset,
        ..a.data.clone()
    }
    .config();
    let (_, test) = data.load()?;
    let prop = spec.resolve(data.choice, &test)?;
    let net: Network<f64> = net.cast();
    let cfg = VerifyConfig {
        timeout_s: Some(a.timeout_s),
        max_subdomains: a.max_subdomains,
        seed: a.seed,
        ..VerifyConfig::default()
    };
    let outcome = verify(&net, &prop, &cfg)?;
    let text = serde_json::to_string_pretty(&outcome)?;
    if let Some(out) = &a.out {
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    println!("{text}");
    Ok(())
}

fn sweep_config(a: &SweepArgs) -> Result<SweepConfig> {
    let stored = a.results.join(CONFIG_FILE);
    let mut cfg = if a.resume {
        SweepConfig::load(&stored)?
    } else {
        let data = a.data.config();
        match a.preset.as_str() {
            "desk" => SweepConfig::desk(data),
            "full" => SweepConfig {
                data: DataConfig {
                    n_train: 60_000,
                    n_test: 10_000,
                    ..data.clone()
                },
                arch: ResNet4Config::desk(data.image_shape(), data.num_classes()),
                ..SweepConfig::full_mnist(&a.data.data_dir)
            },
            other => bail!("unknown preset {other:?} (expected desk or full)"),
        }
    };
    if let Some(v) = &a.seeds {
        cfg.seeds = v.clone();
    }
    if let Some(v) = &a.ratios {
        cfg.ratios = v.clone();
    }
    if let Some(v) = &a.epsilons {
        cfg.epsilons = v.clone();
    }
    if let Some(v) = a.n_inputs {
        cfg.n_inputs = v;
    }
    if let Some(v) = a.timeout_s {
        cfg.timeout_s = v;
    }
    if let Some(v) = a.threshold {
        cfg.accuracy_threshold = v;
    }
    if let Some(v) = a.max_subdomains {
        cfg.verify.max_subdomains = v;
    }
    if let Some(v) = a.max_epochs {
        cfg.train.max_epochs = v;
    }
    Ok(cfg)
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = sweep_config(a)?;
    let opts = SweepOptions {
        jobs: a.jobs,
        stop_after: a.stop_after,
        verbose: a.verbose,
    };
    let s = run_sweep(&cfg, &a.results, &opts)?;
    print_json(&json!({
        "results": a.results,
        "new_models": s.new_models,
        "new_records": s.new_records,
        "skipped_records": s.skipped_records,
        "failed_models": s.failed_models,
        "complete": !s.interrupted,
    }))
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let cfg = SweepConfig::load(&a.results.join(CONFIG_FILE))?;
    let log = read_log(&a.results.join(LOG_FILE))?;
    print!("{}", render_report(&aggregate(&log, &cfg), a.format));
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
