//! `geosurge` command line.
//!
//! The config file (or the built-in defaults) is the source of truth. Each
//! subcommand flag is shorthand for one `--set key=value` override, applied
//! after the generic `--set` list.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geosurge_core::config::{parse_override_value, RunConfig};
use geosurge_core::pipeline::{self, PipelineError};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "geosurge", version, about = "Hierarchical geocell geo-localization pipeline")]
#[command(after_help = "Exit codes: 0 success, 1 usage or config error, 2 data or format error, 3 integrity error.")]
struct Cli {
    /// JSON run config overlaid on the built-in defaults [default: none, built-in defaults only]
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `train.lr=0.003`; values parse as JSON, else as strings. Repeatable [default: none]
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Worker thread cap; overrides the `threads` config key [default: all cores]
    #[arg(long, global = true, env = "GEOSURGE_THREADS", value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a clustered synthetic dataset (manifest, blobs and truth CSVs)
    Synth(SynthArgs),
    /// Build the geocell hierarchy from the training split
    Partition(PartitionArgs),
    /// Train the fusion network and geocell embeddings
    Train(TrainArgs),
    /// Predict a location for every record of the query split
    Infer(InferArgs),
    /// Score predictions against ground truth at distance thresholds
    Eval(EvalArgs),
    /// Summarize any file produced or consumed by this tool
    Inspect(InspectArgs),
    /// Print the effective merged config as JSON
    Config,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory (`paths.data_dir`) [default: data]
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    /// Number of location clusters (`synth.n_clusters`) [default: 50]
    #[arg(long)]
    clusters: Option<usize>,
    /// Samples per cluster (`synth.samples_per_cluster`) [default: 200]
    #[arg(long)]
    per_cluster: Option<usize>,
    /// Feature noise std (`synth.noise_sigma`) [default: 0.1]
    #[arg(long)]
    sigma: Option<f64>,
    /// Generator seed (`synth.seed`) [default: 7]
    #[arg(long)]
    seed: Option<u64>,
    /// Split fractions as name=fraction pairs, e.g. `train=0.8,val=0.1,test=0.1` (`split.fractions`) [default: train=0.99,val=0.01]
    #[arg(long, value_name = "LIST")]
    splits: Option<String>,
    /// Split shuffle seed (`split.seed`) [default: 0]
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PartitionArgs {
    /// Input manifest (`paths.manifest`) [default: data/manifest.jsonl]
    #[arg(long, value_name = "FILE")]
    manifest: Option<String>,
    /// Minimum samples per kept cell (`partition.tau_min`) [default: 50]
    #[arg(long)]
    tau_min: Option<usize>,
    /// Comma-separated maximum cell sizes, coarsest first (`partition.tau_max`) [default: 25000,10000,5000,2000,1000,750,500]
    #[arg(long, value_name = "LIST")]
    tau_max: Option<String>,
    /// Store member ids per cell (`partition.with_members`) [default: off]
    #[arg(long)]
    with_members: bool,
    /// Output hierarchy JSON (`paths.hierarchy`) [default: out/hierarchy.json]
    #[arg(long, value_name = "FILE")]
    out: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Input manifest (`paths.manifest`) [default: data/manifest.jsonl]
    #[arg(long, value_name = "FILE")]
    manifest: Option<String>,
    /// Hierarchy JSON (`paths.hierarchy`) [default: out/hierarchy.json]
    #[arg(long, value_name = "FILE")]
    hierarchy: Option<String>,
    /// Output checkpoint (`paths.checkpoint`) [default: out/model.gsck]
    #[arg(long, value_name = "FILE")]
    out: Option<String>,
    /// Per-epoch JSONL log (`paths.train_log`) [default: out/train_log.jsonl]
    #[arg(long, value_name = "FILE")]
    log: Option<String>,
    /// Maximum epochs (`train.epochs_max`) [default: 20]
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate (`train.lr`) [default: 0.0001]
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size (`train.batch_size`) [default: 1024]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initialization and shuffling seed (`train.seed`) [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Float precision, f32 or f64 (`train.precision`) [default: f32]
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Input manifest (`paths.manifest`) [default: data/manifest.jsonl]
    #[arg(long, value_name = "FILE")]
    manifest: Option<String>,
    /// Hierarchy JSON (`paths.hierarchy`) [default: out/hierarchy.json]
    #[arg(long, value_name = "FILE")]
    hierarchy: Option<String>,
    /// Trained checkpoint (`paths.checkpoint`) [default: out/model.gsck]
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<String>,
    /// Manifest split to predict (`split.query`) [default: test]
    #[arg(long)]
    split: Option<String>,
    /// Level integration, softmax or raw_product (`inference.integration`) [default: softmax]
    #[arg(long)]
    integration: Option<String>,
    /// Ranked cells kept per query (`inference.top_k`) [default: 5]
    #[arg(long)]
    top_k: Option<usize>,
    /// Predictions CSV; JSON goes next to it (`paths.predictions`) [default: out/predictions.csv]
    #[arg(long, value_name = "FILE")]
    out: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predictions CSV (`paths.predictions`) [default: out/predictions.csv]
    #[arg(long, value_name = "FILE")]
    predictions: Option<String>,
    /// Ground-truth CSV (`paths.truth`) [default: data/truth_test.csv]
    #[arg(long, value_name = "FILE")]
    truth: Option<String>,
    /// Comma-separated thresholds in km (`eval.thresholds_km`) [default: 1,25,200,750,2500]
    #[arg(long, value_name = "LIST")]
    thresholds: Option<String>,
    /// Report format: text, csv or json (`eval.format`) [default: text]
    #[arg(long)]
    format: Option<String>,
    /// Report file (`paths.report`) [default: stdout]
    #[arg(long, value_name = "FILE")]
    out: Option<String>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Checkpoint, blob file, hierarchy, manifest, predictions, report or CSV
    path: PathBuf,
}

fn usage(msg: impl Into<String>) -> PipelineError {
    PipelineError::Usage(msg.into())
}

fn comma_list(raw: &str, what: &str) -> Result<Value, PipelineError> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map(|x| if x.fract() == 0.0 && x >= 0.0 { json!(x as u64) } else { json!(x) })
                .map_err(|_| usage(format!("{what}: {s:?} is not a number")))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Value::Array)
}

fn split_list(raw: &str) -> Result<Value, PipelineError> {
    raw.split(',')
        .map(|pair| {
            let (name, f) = pair
                .split_once('=')
                .ok_or_else(|| usage(format!("--splits: expected name=fraction, got {pair:?}")))?;
            let f: f64 = f.trim().parse().map_err(|_| usage(format!("--splits: bad fraction {f:?}")))?;
            Ok(json!([name.trim(), f]))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Value::Array)
}

/// Command flags as `(key, value)` overrides.
fn command_overrides(cmd: &Command) -> Result<Vec<(String, Value)>, PipelineError> {
    let mut o: Vec<(String, Value)> = Vec::new();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            o.push((k.to_string(), v));
        }
    };
    let s = |v: &Option<String>| v.as_ref().map(|x| json!(x));
    match cmd {
        Command::Synth(a) => {
            put("paths.data_dir", s(&a.out));
            if let Some(dir) = &a.out {
                put("paths.manifest", Some(json!(format!("{dir}/manifest.jsonl"))));
            }
            put("synth.n_clusters", a.clusters.map(|x| json!(x)));
            put("synth.samples_per_cluster", a.per_cluster.map(|x| json!(x)));
            put("synth.noise_sigma", a.sigma.map(|x| json!(x)));
            put("synth.seed", a.seed.map(|x| json!(x)));
            put("split.fractions", a.splits.as_deref().map(split_list).transpose()?);
            put("split.seed", a.split_seed.map(|x| json!(x)));
        }
        Command::Partition(a) => {
            put("paths.manifest", s(&a.manifest));
            put("partition.tau_min", a.tau_min.map(|x| json!(x)));
            put("partition.tau_max", a.tau_max.as_deref().map(|t| comma_list(t, "--tau-max")).transpose()?);
            put("partition.with_members", a.with_members.then(|| json!(true)));
            put("paths.hierarchy", s(&a.out));
        }
        Command::Train(a) => {
            put("paths.manifest", s(&a.manifest));
            put("paths.hierarchy", s(&a.hierarchy));
            put("paths.checkpoint", s(&a.out));
            put("paths.train_log", s(&a.log));
            put("train.epochs_max", a.epochs.map(|x| json!(x)));
            put("train.lr", a.lr.map(|x| json!(x)));
            put("train.batch_size", a.batch_size.map(|x| json!(x)));
            put("train.seed", a.seed.map(|x| json!(x)));
            put("train.precision", s(&a.precision));
        }
        Command::Infer(a) => {
            put("paths.manifest", s(&a.manifest));
            put("paths.hierarchy", s(&a.hierarchy));
            put("paths.checkpoint", s(&a.checkpoint));
            put("split.query", s(&a.split));
            put("inference.integration", s(&a.integration));
            put("inference.top_k", a.top_k.map(|x| json!(x)));
            put("paths.predictions", s(&a.out));
        }
        Command::Eval(a) => {
            put("paths.predictions", s(&a.predictions));
            put("paths.truth", s(&a.truth));
            put("eval.thresholds_km", a.thresholds.as_deref().map(|t| comma_list(t, "--thresholds")).transpose()?);
            put("eval.format", s(&a.format));
            put("paths.report", s(&a.out));
        }
        Command::Inspect(_) | Command::Config => {}
    }
    Ok(o)
}

fn effective_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut overrides = Vec::new();
    for raw in &cli.set {
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {raw:?}")))?;
        overrides.push((k.trim().to_string(), parse_override_value(v)));
    }
    overrides.extend(command_overrides(&cli.command)?);
    if let Some(n) = cli.threads {
        overrides.push(("threads".into(), json!(n)));
    }
    Ok(RunConfig::load(cli.config.as_deref(), &overrides)?)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    if let Command::Inspect(a) = &cli.command {
        print!("{}", pipeline::inspect(&a.path)?);
        return Ok(());
    }
    let cfg = effective_config(&cli)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Config => print!("{}", cfg.to_pretty_json()),
        Command::Synth(_) => {
            let s = pipeline::run_synth(&cfg)?;
            println!("wrote {} records to {}", s.records, s.dir);
            for (name, n) in s.splits {
                println!("  {name}: {n}");
            }
        }
        Command::Partition(_) => {
            let (h, cov) = pipeline::run_partition(&cfg)?;
            println!("wrote {} ({} levels, tau_min {})", cfg.paths.hierarchy, h.num_levels(), h.tau_min);
            for l in &cov.levels {
                println!(
                    "  tau_max {:>6}: {:>6} cells, members min {} median {} max {}",
                    l.tau_max, l.cells, l.min_members, l.median_members, l.max_members
                );
            }
            println!(
                "  coverage {}/{} ({:.1}%), {} excluded",
                cov.covered_all_levels,
                cov.samples,
                100.0 * cov.coverage_fraction,
                cov.excluded
            );
        }
        Command::Train(_) => {
            let s = pipeline::run_train(&cfg, |r| {
                eprintln!(
                    "epoch {:>3}  lr {:.3e}  train {:.4}  val {:.4}  ({:.1}s)",
                    r.epoch, r.lr, r.train_loss, r.val_loss, r.wall_s
                )
            })?;
            println!(
                "trained on {} examples ({} val, {} excluded), {} parameters",
                s.train_examples, s.val_examples, s.excluded, s.parameters
            );
            println!(
                "best val loss {:.4} at epoch {} of {} (initial {:.4}){}",
                s.fit.best_val_loss,
                s.fit.best_epoch,
                s.fit.epochs_run,
                s.fit.initial_val_loss,
                if s.fit.stopped_early { ", stopped early" } else { "" }
            );
            println!("wrote {} and {}", cfg.paths.checkpoint, cfg.paths.train_log);
        }
        Command::Infer(_) => {
            let s = pipeline::run_infer(&cfg)?;
            println!("wrote {} predictions to {} and {}", s.predictions.len(), s.csv_path, s.json_path);
        }
        Command::Eval(_) => {
            let (_, text) = pipeline::run_eval(&cfg)?;
            if cfg.paths.report.is_empty() {
                print!("{text}");
            } else {
                println!("wrote {}", cfg.paths.report);
            }
        }
        Command::Inspect(_) => unreachable!("handled above"),
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
