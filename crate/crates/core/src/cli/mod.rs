//! Command-line front end: data generation, training, evaluation, prediction,
//! gradient checking and plotting.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod config;
pub mod plot;

pub use config::{RunConfig, SEED_ENV};

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_corpus, write_corpus, Corpus, Manifest, Profile, TrackSequence};
use crate::error::Error;
use crate::metrics::{EvalRecord, MetricReport};
use crate::model::{ModelConfig, PedFormer, PredictionBundle};
use crate::tensor::{load_checkpoint, save_checkpoint, OpKind, ParamStore};
use crate::train::{eval_record, evaluate, split_by_track, write_epoch_csv, Dataset, LossSummary, Trainer};
use crate::verify::{run_suite, SuiteOptions};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(name = "pedformer", version, about = "Multi-task pedestrian trajectory, crossing-action and location prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Pie,
    Jaad,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Pie => Profile::Pie,
            ProfileArg::Jaad => Profile::Jaad,
        }
    }
}

/// Which tracks of the corpus to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Default)]
pub enum Split {
    #[default]
    All,
    /// The training tracks under the checkpoint's split seed and fraction.
    Train,
    /// The validation tracks under the checkpoint's split seed and fraction.
    Val,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus: tracks, semantic maps and a manifest.
    GenData {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of tracks (overrides scenario.num_tracks).
        #[arg(long)]
        tracks: Option<usize>,
        /// Generator seed; falls back to the config file, then PEDFORMER_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset profile setting the crossing ratio.
        #[arg(long, value_enum)]
        profile: Option<ProfileArg>,
        /// Run configuration (JSON); its `scenario`, `window` and `grid` sections are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Make crossing pedestrians meet a slow ego-vehicle and others a faster one.
        #[arg(long)]
        speed_dependent: bool,
    },
    /// Train a model and write a checkpoint, an epoch log and the resolved configuration.
    Train {
        /// Run configuration (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of epochs (overrides train.epochs).
        #[arg(long)]
        epochs: Option<usize>,
        /// Mini-batch size (overrides train.batch_size).
        #[arg(long)]
        batch_size: Option<usize>,
        /// Initial learning rate (overrides train.learning_rate).
        #[arg(long)]
        lr: Option<f64>,
        /// Seed for initialization, split and shuffling; falls back to the config file, then PEDFORMER_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        /// Share of track ids held out for validation (overrides train.val_fraction).
        #[arg(long)]
        val_fraction: Option<f64>,
    },
    /// Evaluate a checkpoint, or a prediction dump, and write metrics as JSON and CSV.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Score this prediction dump instead of running the model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Configuration that must agree with the checkpoint's dimensions.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
    },
    /// Write one JSON line per sample with boxes, crossing probability and the five likeliest cells.
    Predict {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Configuration that must agree with the checkpoint's dimensions.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
    },
    /// Compare analytic gradients with central differences on a tiny model.
    Gradcheck {
        /// Run configuration whose `model` is checked; defaults to the built-in tiny model.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Tolerance for the module and end-to-end checks.
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        /// Tolerance for the primitive checks.
        #[arg(long, default_value_t = 1e-5)]
        primitive_tol: f64,
        /// Central-difference step for the module checks.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        /// Seed for parameters and random inputs.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Negate the backward rule of this op kind (for testing the checker).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Draw loss and metric curves from an epoch log as SVG, plus a tidy CSV.
    Plot {
        /// Epoch CSV written by `train`.
        #[arg(long)]
        log: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let usage = match &e {
            Error::Config(_) | Error::Parse { .. } | Error::Format(_) | Error::Json(_) => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        };
        if usage {
            Self::usage(e.to_string())
        } else {
            Self::runtime(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::GenData {
            out,
            tracks,
            seed,
            profile,
            config,
            speed_dependent,
        } => gen_data(&out, tracks, seed, profile, config.as_deref(), speed_dependent),
        Command::Train {
            config,
            data,
            out,
            epochs,
            batch_size,
            lr,
            seed,
            val_fraction,
        } => {
            let mut run = RunConfig::load(config.as_deref(), seed)?;
            if let Some(v) = epochs {
                run.train.epochs = v;
            }
            if let Some(v) = batch_size {
                run.train.batch_size = v;
            }
            if let Some(v) = lr {
                run.train.learning_rate = v;
            }
            if let Some(v) = val_fraction {
                run.train.val_fraction = v;
            }
            train(&run, &data, &out)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            predictions,
            config,
            split,
        } => eval(&checkpoint, &data, &out, predictions.as_deref(), config.as_deref(), split),
        Command::Predict {
            checkpoint,
            data,
            out,
            config,
            split,
        } => predict(&checkpoint, &data, &out, config.as_deref(), split),
        Command::Gradcheck {
            config,
            tol,
            primitive_tol,
            step,
            seed,
            report,
            inject_fault,
        } => gradcheck(config.as_deref(), tol, primitive_tol, step, seed, report.as_deref(), inject_fault.as_deref()),
        Command::Plot { log, out } => {
            require_file(&log, "epoch log")?;
            let series = plot::read_epoch_log(&log)?;
            for name in plot::write_plots(&series, &out)? {
                println!("{}", out.join(name).display());
            }
            Ok(())
        }
    }
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} does not exist or is not a directory", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} does not exist", path.display())))
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| CliError::runtime(e.to_string()))
}

fn gen_data(
    out: &Path,
    tracks: Option<usize>,
    seed: Option<u64>,
    profile: Option<ProfileArg>,
    config: Option<&Path>,
    speed_dependent: bool,
) -> CliResult<()> {
    let mut run = RunConfig::load(config, seed)?;
    if let Some(p) = profile {
        run.profile = p.into();
        run.scenario.crossing_ratio = run.profile.crossing_ratio();
    }
    if let Some(n) = tracks {
        run.scenario.num_tracks = n;
    }
    if speed_dependent {
        run.scenario.speed_dependent_crossing = true;
    }
    let scenario = run.scenario();
    let seed = run.train.seed;
    let generated = generate_synthetic(&scenario, seed)?;
    let mut manifest = Manifest::describe(&generated.tracks, &generated.maps, Some(&scenario), &run.grid);
    manifest.seed = Some(seed);
    manifest.profile = Some(run.profile);
    let corpus = Corpus {
        tracks: generated.tracks,
        maps: generated.maps,
        manifest: Some(manifest),
    };
    write_corpus(out, &corpus).map_err(|e| CliError::runtime(e.to_string()))?;
    let m = corpus.manifest.as_ref().expect("manifest");
    println!(
        "{} tracks ({} crossing, ratio {:.3}), {} samples, {} maps -> {}",
        m.num_tracks,
        m.crossing_tracks,
        m.crossing_ratio,
        m.num_samples,
        m.num_maps,
        out.display()
    );
    Ok(())
}

/// Summary written next to a trained checkpoint.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub parameters: usize,
    pub train_tracks: usize,
    pub val_tracks: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub class_weight_cross: f64,
    pub class_weight_noncross: f64,
    pub best_epoch: Option<usize>,
    pub aborted: Option<String>,
}

fn build_dataset(tracks: &[TrackSequence], corpus: &Corpus, run: &RunConfig) -> CliResult<Dataset> {
    Ok(Dataset::from_tracks(tracks, &corpus.maps, &run.window(), &run.grid, &run.model)?)
}

fn train(run: &RunConfig, data: &Path, out: &Path) -> CliResult<()> {
    run.validate()?;
    require_dir(data, "data directory")?;
    let corpus = load_corpus(data)?;
    let (train_tracks, val_tracks) = split_by_track(&corpus.tracks, run.train.val_fraction, run.train.seed);
    let train_set = build_dataset(&train_tracks, &corpus, run)?;
    let val_set = build_dataset(&val_tracks, &corpus, run)?;
    if train_set.is_empty() {
        return Err(CliError::usage(format!(
            "no training samples: {} tracks yield no {}-frame windows",
            train_tracks.len(),
            run.window().window_len()
        )));
    }
    let base = run.loss_weights();
    let weights = if run.train.auto_class_weights {
        base.clone().with_class_weights(&train_set.samples)
    } else {
        base.clone()
    };
    let (model, store) = PedFormer::build(&run.model, run.train.seed)?;
    log::info!(
        "{} parameters, {} training and {} validation samples",
        store.num_scalars(),
        train_set.len(),
        val_set.len()
    );
    let mut trainer = Trainer::new(&model, store, weights.clone(), run.train.clone())?;
    let outcome = trainer.fit(&train_set, &val_set)?;

    let resolved = RunConfig {
        loss: Some(base),
        ..run.clone()
    };
    let resolved_json = serde_json::to_value(&resolved).map_err(|e| CliError::runtime(e.to_string()))?;
    create_dir(out)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.best, &resolved_json).map_err(|e| CliError::runtime(e.to_string()))?;
    let mut csv = Vec::new();
    write_epoch_csv(&mut csv, &outcome.log)?;
    write_file(&out.join(EPOCH_LOG_FILE), csv)?;
    write_file(&out.join(RESOLVED_CONFIG_FILE), to_json(&resolved)?)?;
    let summary = TrainSummary {
        parameters: trainer.store.num_scalars(),
        train_tracks: train_tracks.len(),
        val_tracks: val_tracks.len(),
        train_samples: train_set.len(),
        val_samples: val_set.len(),
        class_weight_cross: weights.class_weight_cross,
        class_weight_noncross: weights.class_weight_noncross,
        best_epoch: outcome.best_epoch,
        aborted: outcome.aborted.clone(),
    };
    write_file(&out.join(SUMMARY_FILE), to_json(&summary)?)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "{} epochs, final train loss {:.6}, val loss {:.6}, best epoch {:?} -> {}",
            outcome.log.len(),
            last.train.total,
            last.val_loss,
            outcome.best_epoch,
            out.display()
        );
    }
    match outcome.aborted {
        Some(reason) => Err(CliError::runtime(format!("training stopped early: {reason}"))),
        None => Ok(()),
    }
}

/// Differences between two model configurations as `path: checkpoint vs config` lines.
pub fn model_differences(checkpoint: &ModelConfig, requested: &ModelConfig) -> Vec<String> {
    fn walk(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        match (a, b) {
            (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
                for (k, va) in x {
                    let vb = y.get(k).unwrap_or(&serde_json::Value::Null);
                    walk(&format!("{path}.{k}"), va, vb, out);
                }
            }
            _ if a != b => out.push(format!("{path}: checkpoint {a}, config {b}")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(
        "model",
        &serde_json::to_value(checkpoint).expect("serializable"),
        &serde_json::to_value(requested).expect("serializable"),
        &mut out,
    );
    out
}

/// Copies checkpoint tensors into `store` by name, checking every shape.
fn restore(store: &mut ParamStore, saved: &ParamStore) -> CliResult<()> {
    let saved: BTreeMap<&str, &crate::tensor::Parameter> = saved.iter().map(|(_, p)| (p.name.as_str(), p)).collect();
    let mut problems = Vec::new();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let param = store.get_mut(id);
        match saved.get(param.name.as_str()) {
            None => problems.push(format!("tensor {} missing from checkpoint", param.name)),
            Some(s) if s.value.shape() != param.value.shape() => problems.push(format!(
                "tensor {} has shape {:?} in the checkpoint but the model expects {:?}",
                param.name,
                s.value.shape(),
                param.value.shape()
            )),
            Some(s) => param.value = s.value.clone(),
        }
    }
    if saved.len() != store.len() {
        problems.push(format!(
            "checkpoint holds {} tensors, model has {}",
            saved.len(),
            store.len()
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::usage(format!("checkpoint does not fit the model:\n  - {}", problems.join("\n  - "))))
    }
}

/// Model, parameters and run configuration of a checkpoint.
pub fn load_model(checkpoint: &Path, config: Option<&Path>) -> CliResult<(PedFormer, ParamStore, RunConfig)> {
    require_file(checkpoint, "checkpoint")?;
    let saved = load_checkpoint(checkpoint)?;
    let run: RunConfig = serde_json::from_value(saved.config)
        .map_err(|e| CliError::usage(format!("checkpoint configuration is unreadable: {e}")))?;
    if let Some(path) = config {
        let requested = RunConfig::load(Some(path), None)?;
        let diffs = model_differences(&run.model, &requested.model);
        if !diffs.is_empty() {
            return Err(CliError::usage(format!(
                "configuration does not match the checkpoint dimensions:\n  - {}",
                diffs.join("\n  - ")
            )));
        }
    }
    run.validate()?;
    let (model, mut store) = PedFormer::build(&run.model, run.train.seed)?;
    restore(&mut store, &saved.params)?;
    Ok((model, store, run))
}

fn split_dataset(data: &Path, run: &RunConfig, split: Split) -> CliResult<Dataset> {
    require_dir(data, "data directory")?;
    let corpus = load_corpus(data)?;
    let tracks = match split {
        Split::All => corpus.tracks.clone(),
        Split::Train | Split::Val => {
            let (train, val) = split_by_track(&corpus.tracks, run.train.val_fraction, run.train.seed);
            if split == Split::Train {
                train
            } else {
                val
            }
        }
    };
    let dataset = build_dataset(&tracks, &corpus, run)?;
    if dataset.is_empty() {
        return Err(CliError::usage(format!("the {split:?} split of {} has no samples", data.display()).to_lowercase()));
    }
    Ok(dataset)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellProb {
    pub cell: usize,
    pub prob: f64,
}

/// One line of a prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub ped_id: String,
    pub obs_end_frame: usize,
    /// Normalized `(x1, y1, x2, y2)` per future step.
    pub future_boxes: Vec<[f64; 4]>,
    pub crossing_prob: f64,
    /// The five likeliest cells, most likely first.
    pub top5_cells: Vec<CellProb>,
}

/// The `k` largest entries, descending; ties keep the smaller index first.
pub fn top_cells(distribution: &[f64], k: usize) -> Vec<CellProb> {
    let mut idx: Vec<usize> = (0..distribution.len()).collect();
    idx.sort_by(|&a, &b| distribution[b].total_cmp(&distribution[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(k)
        .map(|cell| CellProb {
            cell,
            prob: distribution[cell],
        })
        .collect()
}

fn predict(checkpoint: &Path, data: &Path, out: &Path, config: Option<&Path>, split: Split) -> CliResult<()> {
    let (model, store, run) = load_model(checkpoint, config)?;
    let dataset = split_dataset(data, &run, split)?;
    let evaluation = evaluate(&model, &store, &dataset, &run.loss_weights())?;
    create_dir(out)?;
    let path = out.join(PREDICTIONS_FILE);
    let file = fs::File::create(&path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for (sample, p) in dataset.samples.iter().zip(&evaluation.predictions) {
        let line = PredictionLine {
            ped_id: sample.ped_id.clone(),
            obs_end_frame: sample.obs_end_frame,
            future_boxes: p.future_boxes.clone(),
            crossing_prob: p.crossing_prob,
            top5_cells: top_cells(&p.cell_distribution, 5),
        };
        let text = serde_json::to_string(&line).map_err(|e| CliError::runtime(e.to_string()))?;
        writeln!(w, "{text}").map_err(|e| CliError::runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::runtime(e.to_string()))?;
    println!("{} predictions -> {}", dataset.len(), path.display());
    Ok(())
}

pub fn read_predictions(path: &Path) -> CliResult<Vec<PredictionLine>> {
    require_file(path, "prediction dump")?;
    let file = fs::File::open(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    let mut lines = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::runtime(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        lines.push(serde_json::from_str(&line).map_err(|e| CliError::usage(format!("{}:{}: {e}", path.display(), k + 1)))?);
    }
    Ok(lines)
}

/// Metrics file contents; the loss is present only when the model itself was run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    #[serde(flatten)]
    pub report: MetricReport,
    pub loss: Option<LossSummary>,
}

/// Pixel-space records for `dataset` taken from a prediction dump, in dataset order.
pub fn records_from_dump(dataset: &Dataset, dump: &[PredictionLine]) -> CliResult<Vec<EvalRecord>> {
    let by_key: BTreeMap<(&str, usize), &PredictionLine> =
        dump.iter().map(|p| ((p.ped_id.as_str(), p.obs_end_frame), p)).collect();
    dataset
        .samples
        .iter()
        .map(|s| {
            let p = by_key.get(&(s.ped_id.as_str(), s.obs_end_frame)).ok_or_else(|| {
                CliError::usage(format!("prediction dump has no entry for {} at frame {}", s.ped_id, s.obs_end_frame))
            })?;
            let bundle = PredictionBundle {
                future_boxes: p.future_boxes.clone(),
                crossing_prob: p.crossing_prob,
                cell_distribution: Vec::new(),
            };
            Ok(eval_record(s, &bundle))
        })
        .collect()
}

fn eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    predictions: Option<&Path>,
    config: Option<&Path>,
    split: Split,
) -> CliResult<()> {
    let (model, store, run) = load_model(checkpoint, config)?;
    let dataset = split_dataset(data, &run, split)?;
    let output = match predictions {
        Some(path) => {
            let dump = read_predictions(path)?;
            EvalOutput {
                report: MetricReport::from_records(&records_from_dump(&dataset, &dump)?)?,
                loss: None,
            }
        }
        None => {
            let e = evaluate(&model, &store, &dataset, &run.loss_weights())?;
            EvalOutput {
                report: e.report,
                loss: Some(e.loss),
            }
        }
    };
    create_dir(out)?;
    write_file(&out.join(METRICS_JSON), to_json(&output)?)?;
    write_file(
        &out.join(METRICS_CSV),
        format!("{}\n{}\n", MetricReport::CSV_HEADER, output.report.csv_row()),
    )?;
    let r = &output.report;
    println!(
        "{} samples: ADE {:.3} FDE {:.3} ARB {:.3} FRB {:.3} FIoU {:.3} acc {:.3}",
        r.samples, r.ade, r.fde, r.arb, r.frb, r.fiou, r.accuracy
    );
    Ok(())
}

fn gradcheck(
    config: Option<&Path>,
    tol: f64,
    primitive_tol: f64,
    step: f64,
    seed: Option<u64>,
    report: Option<&Path>,
    fault: Option<&str>,
) -> CliResult<()> {
    let model = match config {
        Some(path) => RunConfig::load(Some(path), None)?.model,
        None => ModelConfig::tiny(),
    };
    model.validate()?;
    let sign_fault = match fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| CliError::usage(format!("unknown op kind {name:?}")))?),
    };
    let seed = match seed {
        Some(s) => s,
        None => match std::env::var(SEED_ENV) {
            Ok(text) => text
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("{SEED_ENV}={text:?} is not an unsigned integer")))?,
            Err(_) => 0,
        },
    };
    let options = SuiteOptions {
        primitive_tolerance: primitive_tol,
        model_tolerance: tol,
        step,
        sign_fault,
        seed,
        ..SuiteOptions::default()
    };
    let started = std::time::Instant::now();
    let result = run_suite(&model, &options)?;
    print!("{}", result.render());
    println!("{:.1} s", started.elapsed().as_secs_f64());
    if let Some(path) = report {
        write_file(path, to_json(&result)?)?;
    }
    if result.passed() {
        println!("gradient check passed");
        Ok(())
    } else {
        Err(CliError::runtime("gradient check failed"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_cells_sorted() {
        let top = top_cells(&[0.1, 0.3, 0.05, 0.3, 0.2, 0.05], 5);
        let cells: Vec<usize> = top.iter().map(|c| c.cell).collect();
        assert_eq!(cells, vec![1, 3, 4, 0, 2]);
        assert!(top.windows(2).all(|w| w[0].prob >= w[1].prob));
    }

    #[test]
    fn differences_name_dimensions() {
        let a = ModelConfig::tiny();
        let mut b = a.clone();
        b.encoder.d_embed = 16;
        b.pred_len = 5;
        let d = model_differences(&a, &b);
        assert_eq!(d.len(), 2, "{d:?}");
        assert!(d.iter().any(|l| l.starts_with("model.encoder.d_embed: checkpoint 8, config 16")));
        assert!(d.iter().any(|l| l.starts_with("model.pred_len")));
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(Error::Config("x".into())).code, 2);
        assert_eq!(CliError::from(Error::NonFinite { op: "tanh" }).code, 1);
        assert_eq!(run(["pedformer", "no-such-command"]), 2);
        assert_eq!(run(["pedformer", "train", "--data", "/nonexistent/x", "--out", "/tmp/unused"]), 2);
    }
}
