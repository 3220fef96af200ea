//! Optimization loop, learning-rate schedule and evaluation.

mod dataset;
mod optim;

pub use dataset::{split_by_track, Dataset};
pub use optim::{clip_global_norm, PlateauSchedule, RmsProp};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::denormalize_box;
use crate::error::{Error, Result};
use crate::metrics::{EvalRecord, MetricReport};
use crate::model::{bundle_from, PedFormer, PredictionBundle};
use crate::objectives::{sample_loss, LossWeights};
use crate::tensor::{ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_reduce_factor: f64,
    pub lr_patience: usize,
    pub lr_threshold: f64,
    pub min_lr: f64,
    pub rho: f64,
    pub epsilon: f64,
    /// Global gradient-norm bound; off when absent.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub val_fraction: f64,
    /// Derive the crossing class weight from the training samples.
    pub auto_class_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 200,
            lr_reduce_factor: 0.2,
            lr_patience: 10,
            lr_threshold: 1e-4,
            min_lr: 1e-7,
            rho: 0.9,
            epsilon: 1e-7,
            clip_norm: None,
            seed: 0,
            val_fraction: 0.15,
            auto_class_weights: true,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push("train.learning_rate must be positive".into());
        }
        if self.batch_size == 0 {
            out.push("train.batch_size must be at least 1".into());
        }
        if !(self.lr_reduce_factor > 0.0 && self.lr_reduce_factor < 1.0) {
            out.push("train.lr_reduce_factor must lie in (0, 1)".into());
        }
        if !(self.rho >= 0.0 && self.rho < 1.0) {
            out.push("train.rho must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            out.push("train.epsilon must be positive".into());
        }
        if !(self.min_lr >= 0.0) {
            out.push("train.min_lr must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            out.push("train.val_fraction must lie in [0, 1)".into());
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            out.push("train.clip_norm must be positive".into());
        }
        out
    }
}

/// Mean loss terms over the samples of one step or epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    pub trajectory: f64,
    pub action: f64,
    pub discrete_location: f64,
}

impl LossSummary {
    fn add(&mut self, other: &LossSummary) {
        self.total += other.total;
        self.trajectory += other.trajectory;
        self.action += other.action;
        self.discrete_location += other.discrete_location;
    }

    fn scaled(mut self, k: f64) -> Self {
        self.total *= k;
        self.trajectory *= k;
        self.action *= k;
        self.discrete_location *= k;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossSummary,
    pub val_loss: f64,
    pub metrics: Option<MetricReport>,
}

pub const EPOCH_CSV_HEADER: &str =
    "epoch,lr,train_loss,traj_loss,act_loss,dl_loss,val_loss,ade,fde,arb,frb,fiou,acc,auc,f1,prec";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let metrics = match &self.metrics {
            Some(m) => m.csv_row(),
            None => ",,,,,,,,".into(),
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train.total,
            self.train.trajectory,
            self.train.action,
            self.train.discrete_location,
            self.val_loss,
            metrics
        )
    }
}

pub fn write_epoch_csv<W: Write>(mut w: W, log: &[EpochLog]) -> Result<()> {
    let io = |e| Error::io("<epoch log>", e);
    writeln!(w, "{EPOCH_CSV_HEADER}").map_err(io)?;
    for e in log {
        writeln!(w, "{}", e.csv_row()).map_err(io)?;
    }
    Ok(())
}

/// Owns the parameters and optimizer state while training one model.
pub struct Trainer<'m> {
    pub model: &'m PedFormer,
    pub store: ParamStore,
    pub weights: LossWeights,
    pub config: TrainConfig,
    pub lr: f64,
    optimizer: RmsProp,
    schedule: PlateauSchedule,
}

/// Result of [`Trainer::fit`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Parameters with the lowest validation loss (the initial ones when no epoch ran).
    pub best: ParamStore,
    pub best_epoch: Option<usize>,
    /// Set when training stopped early on a numerical failure.
    pub aborted: Option<String>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m PedFormer, store: ParamStore, weights: LossWeights, config: TrainConfig) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        weights.validate()?;
        Ok(Self {
            optimizer: RmsProp::new(&store, config.rho, config.epsilon),
            schedule: PlateauSchedule::new(config.lr_reduce_factor, config.lr_patience, config.lr_threshold, config.min_lr),
            lr: config.learning_rate,
            model,
            store,
            weights,
            config,
        })
    }

    /// Mean loss and parameter gradients over `batch`. Samples run on separate tapes in
    /// parallel; their gradients are summed in batch order.
    pub fn gradients(&self, data: &Dataset, batch: &[usize]) -> Result<(LossSummary, Vec<Tensor>)> {
        let scale = 1.0 / batch.len() as f64;
        let per_sample = batch
            .par_iter()
            .map(|&i| {
                let tape = Tape::new();
                let out = self.model.forward(&tape, &self.store, &data.inputs[i])?;
                let loss = sample_loss(&tape, &out, &data.targets[i], &self.weights)?;
                let scaled = tape.scale(loss.total, scale)?;
                let grads = tape.backward(scaled)?.param_grads(&self.store);
                let summary = LossSummary {
                    total: tape.scalar(loss.total),
                    trajectory: tape.scalar(loss.trajectory),
                    action: tape.scalar(loss.action),
                    discrete_location: tape.scalar(loss.discrete_location),
                };
                Ok((summary, grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut summary = LossSummary::default();
        let mut total: Vec<Tensor> = Vec::new();
        for (s, grads) in per_sample {
            summary.add(&s);
            if total.is_empty() {
                total = grads;
            } else {
                for (t, g) in total.iter_mut().zip(&grads) {
                    t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
            }
        }
        Ok((summary.scaled(scale), total))
    }

    /// One optimizer update on `batch`; returns the batch loss before the update.
    pub fn step(&mut self, data: &Dataset, batch: &[usize]) -> Result<LossSummary> {
        let (summary, mut grads) = self.gradients(data, batch)?;
        if !summary.total.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        if let Some(max) = self.config.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        self.optimizer.step(&mut self.store, &grads, self.lr);
        if let Some((_, p)) = self.store.iter().find(|(_, p)| !p.value.is_finite()) {
            return Err(Error::Contract(format!("parameter {} became non-finite", p.name)));
        }
        Ok(summary)
    }

    /// Batches of one epoch in the seeded shuffle order.
    pub fn epoch_batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 2);
        order.shuffle(&mut rng);
        order.chunks(self.config.batch_size).map(|c| c.to_vec()).collect()
    }

    /// Trains for `config.epochs`, validating after every epoch. Without a
    /// validation set the training loss drives the schedule and model selection.
    pub fn fit(&mut self, train: &Dataset, val: &Dataset) -> Result<TrainOutcome> {
        if train.is_empty() && self.config.epochs > 0 {
            return Err(Error::Config("training split is empty".into()));
        }
        let mut outcome = TrainOutcome {
            log: Vec::new(),
            best: self.store.clone(),
            best_epoch: None,
            aborted: None,
        };
        let mut best_loss = f64::INFINITY;
        for epoch in 1..=self.config.epochs {
            let lr = self.lr;
            let mut summary = LossSummary::default();
            let mut failure = None;
            for batch in self.epoch_batches(train.len(), epoch) {
                match self.step(train, &batch) {
                    Ok(s) => summary.add(&s.scaled(batch.len() as f64)),
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
            if let Some(e) = failure {
                log::error!("epoch {epoch}: {e}; keeping the last good parameters");
                outcome.aborted = Some(format!("epoch {epoch}: {e}"));
                break;
            }
            let summary = summary.scaled(1.0 / train.len() as f64);
            let (val_loss, metrics) = if val.is_empty() {
                (summary.total, None)
            } else {
                let eval = evaluate(self.model, &self.store, val, &self.weights)?;
                (eval.loss.total, Some(eval.report))
            };
            if val_loss < best_loss {
                best_loss = val_loss;
                outcome.best = self.store.clone();
                outcome.best_epoch = Some(epoch);
            }
            self.lr = self.schedule.observe(val_loss, self.lr);
            log::info!("epoch {epoch}: lr {lr:e} train {:.6} val {val_loss:.6}", summary.total);
            outcome.log.push(EpochLog {
                epoch,
                lr,
                train: summary,
                val_loss,
                metrics,
            });
        }
        Ok(outcome)
    }
}

/// Predictions, pixel-space records, loss and metrics over a dataset.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub predictions: Vec<PredictionBundle>,
    pub records: Vec<EvalRecord>,
    pub loss: LossSummary,
    pub report: MetricReport,
}

/// Converts a prediction into a pixel-space record for its sample.
pub fn eval_record(sample: &crate::data::Sample, prediction: &PredictionBundle) -> EvalRecord {
    EvalRecord {
        pred_boxes: prediction.future_boxes.iter().map(|b| denormalize_box(b, sample.image_size)).collect(),
        gt_boxes: sample.future_boxes.iter().map(|b| denormalize_box(b, sample.image_size)).collect(),
        crossing_prob: prediction.crossing_prob,
        crossing_label: sample.crossing_label,
    }
}

pub fn evaluate(model: &PedFormer, store: &ParamStore, data: &Dataset, weights: &LossWeights) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let per_sample = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let tape = Tape::new();
            let out = model.forward(&tape, store, &data.inputs[i])?;
            let loss = sample_loss(&tape, &out, &data.targets[i], weights)?;
            let summary = LossSummary {
                total: tape.scalar(loss.total),
                trajectory: tape.scalar(loss.trajectory),
                action: tape.scalar(loss.action),
                discrete_location: tape.scalar(loss.discrete_location),
            };
            Ok((bundle_from(&tape, &out), summary))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss = LossSummary::default();
    let mut predictions = Vec::with_capacity(per_sample.len());
    for (p, s) in per_sample {
        loss.add(&s);
        predictions.push(p);
    }
    let records: Vec<EvalRecord> = data.samples.iter().zip(&predictions).map(|(s, p)| eval_record(s, p)).collect();
    let report = MetricReport::from_records(&records)?;
    Ok(Evaluation {
        predictions,
        records,
        loss: loss.scaled(1.0 / data.len() as f64),
        report,
    })
}
