mod grid;
mod manifest;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use igt_core::checkpoint::Checkpoint;
use igt_core::config::KvConfig;
use igt_core::data::{Dataset, ElementType};
use igt_core::evaluation::{
    binned_report, entropy_by_payment_time, hourly_report, write_entropy_csv, write_groups_csv,
    BinSpec, HourEntropy, Metrics, MetricsReport,
};
use igt_core::synth::{generate, SynthConfig};
use igt_core::train::{CellResult, Evaluator, TrainConfig, Trainer};
use igt_core::{IgtError, Result};
use manifest::{write_json, RunManifest};
use serde::Serialize;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;
pub const EXIT_CHECKPOINT: u8 = 5;

#[derive(Parser)]
#[command(
    name = "igt",
    version,
    about = "Inductive graph transformer for delivery-time estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic order CSV.
    GenData(GenDataArgs),
    /// Train a model, then evaluate it on the validation and test splits.
    Train(TrainArgs),
    /// Evaluate a checkpoint with optional breakdowns.
    Eval(EvalArgs),
    /// Train and evaluate every (layers, dim) cell of a grid.
    Grid(GridArgs),
}

#[derive(Args, Clone, Debug)]
pub struct Shared {
    /// RNG seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for every output of the command.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    shared: Shared,
    /// Output CSV path; defaults to `<out-dir>/orders.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Training overrides; each wins over the same key in `--config`.
#[derive(Args, Clone, Debug, Default)]
pub struct TrainFlags {
    /// full, etaformer_only or thegcn_only.
    #[arg(long)]
    mode: Option<String>,
    /// Propagation layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Embedding width.
    #[arg(long)]
    dim: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    heads: Option<usize>,
    /// Encoder blocks.
    #[arg(long)]
    depth: Option<usize>,
    /// Feed-forward width multiplier.
    #[arg(long)]
    ffn_mult: Option<usize>,
    /// In-layer aggregation across subgraphs: mean or sum.
    #[arg(long)]
    aggregation: Option<String>,
    /// Orders per batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    /// Epoch cap.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    patience: Option<usize>,
    /// Days held out for validation, before the test days.
    #[arg(long)]
    validation_days: Option<i64>,
    /// Final days held out for testing.
    #[arg(long)]
    test_days: Option<i64>,
}

impl TrainFlags {
    fn apply(&self, kv: &mut KvConfig) {
        macro_rules! put {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { kv.set(stringify!($field), v); })*
            };
        }
        put!(
            mode,
            layers,
            dim,
            heads,
            depth,
            ffn_mult,
            aggregation,
            batch_size,
            lr,
            max_epochs,
            patience,
            validation_days,
            test_days
        );
    }
}

#[derive(Args, Clone, Debug)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    /// Order CSV.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum EvalSplit {
    Validation,
    Test,
}

#[derive(Args, Clone, Debug)]
struct EvalArgs {
    #[command(flatten)]
    shared: Shared,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Order CSV the checkpoint was trained on.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: EvalSplit,
    /// Per payment hour metrics (24 rows).
    #[arg(long)]
    by_hour: bool,
    /// Order-count bins for an element type: retailer, origin, destination
    /// or slot. Repeatable.
    #[arg(long)]
    bins: Vec<String>,
    /// Label entropy per payment hour of the evaluated split.
    #[arg(long)]
    entropy: bool,
}

#[derive(Args, Clone, Debug)]
pub struct GridArgs {
    #[command(flatten)]
    shared: Shared,
    /// Order CSV.
    #[arg(long)]
    data: PathBuf,
    /// Layer counts.
    #[arg(long, value_delimiter = ',', default_values_t = igt_core::train::DEFAULT_GRID_LAYERS)]
    grid_layers: Vec<usize>,
    /// Embedding widths.
    #[arg(long, value_delimiter = ',', default_values_t = igt_core::train::DEFAULT_GRID_DIMS)]
    grid_dims: Vec<usize>,
    /// Worker processes run at once.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    flags: TrainFlags,
}

fn exit_code(e: &IgtError) -> u8 {
    match e {
        IgtError::Config(_) => EXIT_CONFIG,
        IgtError::Data(_) | IgtError::Csv(_) => EXIT_DATA,
        IgtError::Divergence(_) => EXIT_DIVERGENCE,
        IgtError::Checkpoint(_) => EXIT_CHECKPOINT,
        _ => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Grid(a) => grid::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_kv(shared: &Shared) -> Result<KvConfig> {
    match &shared.config {
        Some(p) => KvConfig::load(p),
        None => Ok(KvConfig::default()),
    }
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read_csv(path).map_err(|e| match e {
        IgtError::Io(e) => IgtError::Data(format!("{}: {e}", path.display())),
        other => other,
    })
}

fn out_dir(shared: &Shared) -> Result<PathBuf> {
    std::fs::create_dir_all(&shared.out_dir)?;
    Ok(shared.out_dir.clone())
}

fn config_map(kv: &KvConfig) -> BTreeMap<String, String> {
    kv.keys()
        .map(|k| (k.to_string(), kv.raw(k).unwrap_or_default().to_string()))
        .collect()
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let started = Instant::now();
    let kv = load_kv(&a.shared)?;
    let cfg = SynthConfig::from_kv(&kv)?;
    let seed = a.shared.seed.unwrap_or(0);
    let dir = out_dir(&a.shared)?;
    let out = a.out.clone().unwrap_or_else(|| dir.join("orders.csv"));
    let ds = generate(&cfg, seed)?;
    ds.write_csv(&out)?;
    let mut m = RunManifest::new("gen-data", seed);
    m.config = config_map(&kv);
    if let Some(p) = &a.shared.config {
        m.input(p)?;
    }
    m.output(&out);
    m.notes.insert("orders".into(), ds.len().to_string());
    m.timings
        .insert("total_seconds".into(), started.elapsed().as_secs_f64());
    m.write(&dir)?;
    println!("wrote {} orders to {}", ds.len(), out.display());
    Ok(())
}

/// Merged training config: file, then flags, then `--seed`.
pub fn train_kv(shared: &Shared, flags: &TrainFlags) -> Result<KvConfig> {
    let mut kv = load_kv(shared)?;
    kv.check_keys(TrainConfig::KEYS)?;
    flags.apply(&mut kv);
    if let Some(s) = shared.seed {
        kv.set("seed", s);
    }
    Ok(kv)
}

#[derive(Serialize)]
struct TrainMetrics {
    best_epoch: usize,
    epochs_run: usize,
    stopped_early: bool,
    validation: Metrics,
    test: Metrics,
}

fn write_history(path: &Path, history: &[igt_core::train::EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_mae", "val_mae"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.train_mae.to_string(),
            h.val_mae.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let kv = train_kv(&a.shared, &a.flags)?;
    let cfg = TrainConfig::from_kv(&kv)?;
    let dir = out_dir(&a.shared)?;
    let ds = read_dataset(&a.data)?;
    let mut m = RunManifest::new("train", cfg.seed);
    m.config = config_map(&kv);
    m.input(&a.data)?;
    if let Some(p) = &a.shared.config {
        m.input(p)?;
    }

    let trainer = Trainer::new(&ds, cfg.clone())?;
    if !a.quiet {
        eprintln!(
            "training {} on {} orders ({} batches per epoch)",
            cfg.model.mode,
            trainer.split.train.len(),
            trainer.n_batches()
        );
    }
    let outcome = trainer.fit()?;
    let ckpt_path = dir.join("checkpoint.igt");
    outcome.best.save(&ckpt_path)?;
    m.output(&ckpt_path);
    let history_path = dir.join("history.csv");
    write_history(&history_path, &outcome.history)?;
    m.output(&history_path);
    m.timings
        .insert("seconds_per_epoch".into(), outcome.seconds_per_epoch);
    if let Some(msg) = &outcome.diverged {
        m.notes.insert("diverged".into(), msg.clone());
        m.timings
            .insert("total_seconds".into(), started.elapsed().as_secs_f64());
        m.write(&dir)?;
        return Err(IgtError::Divergence(format!(
            "{msg}; last finite checkpoint (epoch {}) saved to {}",
            outcome.best.epoch,
            ckpt_path.display()
        )));
    }

    let ev = Evaluator::new(&ds, &outcome.best)?;
    let (vo, vp) = ev.validation()?;
    let (to, tp) = ev.test()?;
    let metrics = TrainMetrics {
        best_epoch: outcome.best.epoch,
        epochs_run: outcome.history.len(),
        stopped_early: outcome.stopped_early,
        validation: ev.metrics(&vo, &vp)?,
        test: ev.metrics(&to, &tp)?,
    };
    let metrics_path = dir.join("metrics.json");
    write_json(&metrics_path, &metrics)?;
    m.output(&metrics_path);
    let result = CellResult {
        layers: cfg.model.layers,
        dim: cfg.model.dim,
        val_mae: outcome.best.best_val_mae,
        test: metrics.test.clone(),
        seconds_per_epoch: outcome.seconds_per_epoch,
    };
    let result_path = dir.join("result.json");
    write_json(&result_path, &result)?;
    m.output(&result_path);
    m.timings
        .insert("total_seconds".into(), started.elapsed().as_secs_f64());
    m.write(&dir)?;
    println!(
        "best epoch {}: validation MAE {:.4} h, test MAE {:.4} h, MAPE {:.2}%, MARE {:.2}%",
        metrics.best_epoch,
        metrics.validation.mae,
        metrics.test.mae,
        100.0 * metrics.test.mape,
        100.0 * metrics.test.mare
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    split: EvalSplit,
    overall: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    by_hour: Option<MetricsReport>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    bins: BTreeMap<String, MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    entropy: Option<Vec<HourEntropy>>,
}

fn write_csv_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(BufWriter<File>) -> Result<()>,
{
    f(BufWriter::new(File::create(path)?))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let bins: Vec<ElementType> = a
        .bins
        .iter()
        .map(|s| {
            s.parse()
                .map_err(|e: IgtError| IgtError::Config(e.to_string()))
        })
        .collect::<Result<_>>()?;
    let dir = out_dir(&a.shared)?;
    let ckpt = Checkpoint::load(&a.checkpoint).map_err(|e| match e {
        IgtError::Io(e) => IgtError::Checkpoint(format!("{}: {e}", a.checkpoint.display())),
        other => other,
    })?;
    let ds = read_dataset(&a.data)?;
    let mut m = RunManifest::new("eval", ckpt.config.seed);
    m.input(&a.checkpoint)?;
    m.input(&a.data)?;
    m.config
        .insert("split".into(), format!("{:?}", a.split).to_lowercase());

    let ev = Evaluator::new(&ds, &ckpt)?;
    let (orders, preds) = match a.split {
        EvalSplit::Validation => ev.validation()?,
        EvalSplit::Test => ev.test()?,
    };
    let mut report = EvalReport {
        split: a.split,
        overall: ev.metrics(&orders, &preds)?,
        by_hour: None,
        bins: BTreeMap::new(),
        entropy: None,
    };
    if a.by_hour {
        let r = hourly_report(&ds, &orders, &preds)?;
        let p = dir.join("by_hour.csv");
        write_csv_with(&p, |w| write_groups_csv(&r, w))?;
        m.output(&p);
        report.by_hour = Some(r);
    }
    for kind in bins {
        let r = binned_report(
            &ds,
            ev.split.train.clone(),
            &orders,
            &preds,
            &BinSpec::standard(kind),
        )?;
        let p = dir.join(format!("bins_{kind}.csv"));
        write_csv_with(&p, |w| write_groups_csv(&r, w))?;
        m.output(&p);
        report.bins.insert(kind.to_string(), r);
    }
    if a.entropy {
        let hours: Vec<usize> = orders.iter().map(|&i| ds.orders()[i].hour()).collect();
        let labels: Vec<f64> = orders
            .iter()
            .map(|&i| ds.orders()[i].delivery_hours)
            .collect();
        let rows = entropy_by_payment_time(&hours, &labels)?;
        let p = dir.join("entropy.csv");
        write_csv_with(&p, |w| write_entropy_csv(&rows, w))?;
        m.output(&p);
        report.entropy = Some(rows);
    }
    let report_path = dir.join("report.json");
    write_json(&report_path, &report)?;
    m.output(&report_path);
    m.timings
        .insert("total_seconds".into(), started.elapsed().as_secs_f64());
    m.write(&dir)?;
    println!(
        "{} orders: MAE {:.4} h, MAPE {:.2}%, MARE {:.2}%",
        report.overall.count,
        report.overall.mae,
        100.0 * report.overall.mape,
        100.0 * report.overall.mare
    );
    Ok(())
}
