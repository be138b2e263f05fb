//! `idkm`: pretrain, quantize, evaluate, gradient-check and benchmark.
//!
//! Settings come from built-in defaults, then the `--config` TOML file, then
//! command-line flags; later sources win.

mod config;
mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use idkm::bench::{bench_table, ordering_violations, run_grid, MNIST_SCALE_WEIGHTS};
use idkm::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use idkm::grad::BackendKind;
use idkm::gradcheck::{run_gradcheck, GradcheckOptions};
use idkm::nn::Network;
use idkm::report::{accuracy_table, ReportWriter};
use idkm::train::{accuracy, evaluate, pretrain, train, PretrainRecord};

use crate::config::{Overrides, RunConfig};
use crate::error::{from_core, CliError};

#[derive(Parser, Debug)]
#[command(name = "idkm", version, about = "Weight quantization with differentiable soft k-means")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Gradient backend: unrolled, implicit or jfb [default: implicit].
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    /// Codewords per quantized layer [default: 4].
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Sub-vector dimension [default: 1].
    #[arg(long, global = true)]
    d: Option<usize>,
    /// Soft-assignment temperature [default: 5e-4].
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Learning rate [default: 1e-4 when quantizing].
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Training epochs [default: 100 when quantizing].
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Soft k-means iteration cap [default: 30].
    #[arg(long, global = true)]
    max_cluster_iters: Option<usize>,
    /// Soft k-means stopping tolerance [default: 1e-6].
    #[arg(long, global = true)]
    eps: Option<f64>,
    /// Initial step of the averaged adjoint iteration [default: 0.25].
    #[arg(long, global = true)]
    alpha0: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints and reports.
    #[arg(long, global = true, default_value = "idkm-out")]
    out: PathBuf,
    /// Use the jfb gradient for a layer whose implicit solve diverges.
    #[arg(long, global = true)]
    fallback_jfb: bool,
    /// Keep the clustering trace with every backend.
    #[arg(long, global = true)]
    record_trace: bool,
    /// Print a plain-text summary table at the end.
    #[arg(long, global = true)]
    summary: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the float model and save a checkpoint.
    Pretrain,
    /// Quantization-aware training from a pretrained checkpoint.
    Quantize {
        /// Pretrained checkpoint [default: <out>/pretrained.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint, hard-quantized when it carries codebooks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare the gradient backends against each other and finite differences.
    Gradcheck {
        #[arg(long)]
        seeds: Option<usize>,
        /// Drop the inverse from the implicit derivative, to check the harness catches it.
        #[arg(long)]
        inject_bug: bool,
    },
    /// Time the three backends over a grid of (k, d, t).
    Bench {
        /// Fail unless backward time is jfb < implicit < unrolled in every row.
        #[arg(long)]
        assert_order: bool,
        #[arg(long)]
        repeats: Option<usize>,
    },
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            backend: self.backend,
            k: self.k,
            d: self.d,
            tau: self.tau,
            lr: self.lr,
            epochs: self.epochs,
            max_cluster_iters: self.max_cluster_iters,
            eps: self.eps,
            alpha0: self.alpha0,
            seed: self.seed,
            fallback_jfb: self.fallback_jfb,
            record_trace: self.record_trace,
        }
    }

    fn run_config(&self) -> Result<RunConfig, CliError> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

fn report(out: &Path, name: &str, echo: &serde_json::Value) -> Result<ReportWriter, CliError> {
    fs::create_dir_all(out)?;
    ReportWriter::open(out.join(name), echo).map_err(from_core)
}

fn echo<T: serde::Serialize>(command: &str, common: &Common, settings: &T) -> serde_json::Value {
    serde_json::json!({
        "command": command,
        "config_path": common.config,
        "settings": settings,
    })
}

fn cmd_pretrain(common: &Common) -> Result<(), CliError> {
    let rc = common.run_config()?;
    let spec = rc.model()?;
    let net = Network::new(spec.clone()).map_err(from_core)?;
    let cfg = rc.pretrain_config(&common.overrides())?;
    let (train_ds, eval_ds) = rc.datasets()?;
    let echo = echo("pretrain", common, &serde_json::json!({ "pretrain": cfg, "data": rc.data, "model": spec }));
    let mut rep = report(&common.out, "pretrain.jsonl", &echo)?;
    let params = net.init_params::<f64>(cfg.seed);
    let mut write_err = None;
    let (params, history) = pretrain(&net, &cfg, &train_ds, &eval_ds, params, &mut |r: &PretrainRecord| {
        if let Err(e) = rep.write_value(r) {
            write_err.get_or_insert(e);
        }
    })
    .map_err(from_core)?;
    if let Some(e) = write_err {
        return Err(from_core(e));
    }
    let ckpt = Checkpoint::from_f64(spec, &params, &[], echo).map_err(from_core)?;
    let path = common.out.join("pretrained.ckpt");
    save_checkpoint(&path, &ckpt).map_err(from_core)?;
    let top1 = match history.last() {
        Some(r) => r.top1,
        None => accuracy(&net, &params, &eval_ds).map_err(from_core)?,
    };
    println!("pretrained {} parameters, top1 {top1:.4}, saved {}", params.count(), path.display());
    if let Some(floor) = rc.pretrain.min_accuracy {
        if top1 < floor {
            return Err(CliError::Check(format!("final accuracy {top1:.4} below floor {floor}")));
        }
    }
    Ok(())
}

fn cmd_quantize(common: &Common, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let rc = common.run_config()?;
    let cfg = rc.train_config(&common.overrides())?;
    let path = checkpoint
        .map(Path::to_path_buf)
        .or_else(|| rc.quantize.checkpoint.clone())
        .unwrap_or_else(|| common.out.join("pretrained.ckpt"));
    if !path.is_file() {
        return Err(CliError::MissingData(format!("pretrained checkpoint {} not found", path.display())));
    }
    let ckpt = load_checkpoint(&path).map_err(from_core)?;
    if let Some(spec) = &rc.model {
        if *spec != ckpt.architecture {
            return Err(CliError::Config("checkpoint architecture differs from [model]".into()));
        }
    }
    let net = Network::new(ckpt.architecture.clone()).map_err(from_core)?;
    let (train_ds, eval_ds) = rc.datasets()?;
    let echo = echo("quantize", common, &serde_json::json!({ "quantize": cfg, "data": rc.data, "checkpoint": path }));
    let mut rep = report(&common.out, "quantize.jsonl", &echo)?;
    let mut write_err = None;
    let outcome = train(&net, &cfg, &train_ds, &eval_ds, ckpt.params_f64(), &mut |r| {
        if let Err(e) = rep.record(r) {
            write_err.get_or_insert(e);
        }
    })
    .map_err(from_core)?;
    if let Some(e) = write_err {
        return Err(from_core(e));
    }
    let last = outcome.history.last().expect("at least the initial record");
    let out_path = common
        .out
        .join(format!("quantized_{}_k{}_d{}.ckpt", cfg.backend.kind.name(), cfg.k, cfg.d));
    let saved = Checkpoint::from_f64(net.spec().clone(), &outcome.params, &outcome.codebooks, echo).map_err(from_core)?;
    save_checkpoint(&out_path, &saved).map_err(from_core)?;
    println!(
        "{} k={} d={}: top1_hard {:.4}, top1_soft {:.4}, retained_iterates {}, saved {}",
        cfg.backend.kind,
        cfg.k,
        cfg.d,
        last.top1_hard,
        last.top1_soft,
        last.retained_iterates,
        out_path.display()
    );
    if common.summary {
        print!("{}", accuracy_table(std::slice::from_ref(last)));
    }
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path) -> Result<(), CliError> {
    let rc = common.run_config()?;
    if !checkpoint.is_file() {
        return Err(CliError::MissingData(format!("checkpoint {} not found", checkpoint.display())));
    }
    let ckpt = load_checkpoint(checkpoint).map_err(from_core)?;
    let net = Network::new(ckpt.architecture.clone()).map_err(from_core)?;
    let (_, eval_ds) = rc.datasets()?;
    let params = ckpt.params_f64();
    let books = ckpt.codebooks_f64();
    let float = accuracy(&net, &params, &eval_ds).map_err(from_core)?;
    let hard = evaluate(&net, &params, &books, &eval_ds).map_err(from_core)?;
    let echo = echo("eval", common, &serde_json::json!({ "checkpoint": checkpoint, "data": rc.data }));
    let mut rep = report(&common.out, "eval.jsonl", &echo)?;
    let result = serde_json::json!({ "top1_float": float, "top1_hard": hard.top1, "bits_per_weight": hard.bits_per_weight });
    rep.write_value(&result).map_err(from_core)?;
    println!("{result}");
    Ok(())
}

fn cmd_gradcheck(common: &Common, seeds: Option<usize>, inject_bug: bool) -> Result<(), CliError> {
    let rc = common.run_config()?;
    let mut opts = GradcheckOptions {
        inject_bug,
        ..GradcheckOptions::default()
    };
    opts.seeds = seeds.or(rc.gradcheck.seeds).unwrap_or(opts.seeds);
    opts.first_seed = common.seed.or(rc.gradcheck.first_seed).unwrap_or(opts.first_seed);
    if let Some(a) = common.alpha0 {
        opts.adjoint.alpha0 = a;
    }
    let report_value = run_gradcheck(&opts).map_err(from_core)?;
    let mut rep = report(&common.out, "gradcheck.jsonl", &echo("gradcheck", common, &opts))?;
    for c in &report_value.checks {
        rep.write_value(c).map_err(from_core)?;
    }
    print!("{}", report_value.table());
    if report_value.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report_value
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(CliError::Check(failed.join(", ")))
    }
}

fn cmd_bench(common: &Common, assert_order: bool, repeats: Option<usize>) -> Result<(), CliError> {
    let rc = common.run_config()?;
    let b = &rc.bench;
    let ks = common.k.map(|k| vec![k]).or(b.ks.clone()).unwrap_or_else(|| vec![2, 4, 8]);
    let ds = common.d.map(|d| vec![d]).or(b.ds.clone()).unwrap_or_else(|| vec![1, 2]);
    let ts = common
        .max_cluster_iters
        .map(|t| vec![t])
        .or(b.ts.clone())
        .unwrap_or_else(|| vec![5, 30, 100]);
    let weights = b.weights.unwrap_or(MNIST_SCALE_WEIGHTS);
    let repeats = repeats.or(b.repeats).unwrap_or(3);
    let tau = common.tau.or(b.tau).unwrap_or(5e-4);
    let seed = common.seed.or(b.seed).unwrap_or(0);
    if ks.iter().chain(&ds).chain(&ts).any(|&v| v == 0) || weights == 0 {
        return Err(CliError::Config("bench grid values must be >= 1".into()));
    }
    let settings = serde_json::json!({ "ks": ks, "ds": ds, "ts": ts, "weights": weights, "repeats": repeats, "tau": tau, "seed": seed });
    let cells = run_grid(&ks, &ds, &ts, weights, tau, repeats, seed).map_err(from_core)?;
    let mut rep = report(&common.out, "bench.jsonl", &echo("bench", common, &settings))?;
    for c in &cells {
        rep.write_value(c).map_err(from_core)?;
    }
    print!("{}", bench_table(&cells));
    let bad = ordering_violations(&cells);
    for v in &bad {
        eprintln!("ordering: {v}");
    }
    if assert_order && !bad.is_empty() {
        return Err(CliError::Check(format!("{} rows out of order", bad.len())));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain => cmd_pretrain(&cli.common),
        Command::Quantize { checkpoint } => cmd_quantize(&cli.common, checkpoint.as_deref()),
        Command::Eval { checkpoint } => cmd_eval(&cli.common, checkpoint),
        Command::Gradcheck { seeds, inject_bug } => cmd_gradcheck(&cli.common, *seeds, *inject_bug),
        Command::Bench { assert_order, repeats } => cmd_bench(&cli.common, *assert_order, *repeats),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
