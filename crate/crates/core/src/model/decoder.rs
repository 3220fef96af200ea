use super::config::{DecoderConfig, DecoderVariant, TrajectoryMode};
use crate::error::Result;
use crate::nn::{Activation, BiLstm, Builder, Linear, Lstm};
use crate::tensor::{ParamStore, Tape, Var};

/// How the shared decoder output is combined with the context before the task decoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    /// `σ(h) ⊙ h`
    Sigmoid,
    /// `h` unchanged.
    PassThrough,
}

/// Raw decoder outputs kept on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutputs {
    /// `τ × 4`
    pub boxes: Var,
    /// `1 × 1`
    pub crossing_prob: Var,
    /// `1 × num_cells`
    pub cell_distribution: Var,
}

pub struct TaskDecoders {
    pub trajectory: Lstm,
    pub action: Lstm,
    pub discrete_location: Lstm,
}

pub struct GatedDecoder {
    pub config: DecoderConfig,
    pub gate: Gate,
    pub shared: Option<BiLstm>,
    pub tasks: Option<TaskDecoders>,
    pub trajectory_head: Linear,
    pub action_head: Linear,
    pub location_head: Linear,
}

/// `σ(h) ⊙ h`.
pub fn self_gate(tape: &Tape, h: Var) -> Result<Var> {
    tape.mul(tape.sigmoid(h)?, h)
}

impl GatedDecoder {
    pub fn new(b: &mut Builder, config: &DecoderConfig, context_dim: usize, num_cells: usize, l2: f64) -> Result<Self> {
        let mut s = b.scope("decoder");
        let h = config.hidden;
        let shared = match config.variant {
            DecoderVariant::TaskBased => None,
            _ => Some(BiLstm::new(&mut s, "shared", context_dim, h, Activation::Softsign, l2)?),
        };
        let task_in = match config.variant {
            DecoderVariant::TaskBased => context_dim,
            DecoderVariant::SharedOnly => 0,
            _ => 2 * h + context_dim,
        };
        let tasks = if config.variant == DecoderVariant::SharedOnly {
            None
        } else {
            Some(TaskDecoders {
                trajectory: Lstm::new(&mut s, "trajectory", task_in, h, Activation::Tanh, l2)?,
                action: Lstm::new(&mut s, "action", task_in, h, Activation::Softsign, l2)?,
                discrete_location: Lstm::new(&mut s, "discrete_location", task_in, h, Activation::Softsign, l2)?,
            })
        };
        let head_in = if tasks.is_some() { h } else { 2 * h };
        Ok(Self {
            config: config.clone(),
            gate: if config.variant == DecoderVariant::GatedHybrid {
                Gate::Sigmoid
            } else {
                Gate::PassThrough
            },
            shared,
            tasks,
            trajectory_head: Linear::new(&mut s, "trajectory_head", head_in, 4, true)?,
            action_head: Linear::new(&mut s, "action_head", head_in, 1, true)?,
            location_head: Linear::new(&mut s, "location_head", head_in, num_cells, true)?,
        })
    }

    pub fn expected_params(config: &DecoderConfig, context_dim: usize, num_cells: usize) -> usize {
        let h = config.hidden;
        let lstm = |input: usize| 4 * h * (input + h + 1);
        let (shared, task_in) = match config.variant {
            DecoderVariant::TaskBased => (0, Some(context_dim)),
            DecoderVariant::SharedOnly => (2 * lstm(context_dim), None),
            _ => (2 * lstm(context_dim), Some(2 * h + context_dim)),
        };
        let tasks = task_in.map_or(0, |i| 3 * lstm(i));
        let head_in = if task_in.is_some() { h } else { 2 * h };
        shared + tasks + (head_in * 4 + 4) + (head_in + 1) + (head_in * num_cells + num_cells)
    }

    /// Decodes the `τ × context_dim` context. `last_box` (`1 × 4`) anchors delta predictions.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, context: Var, last_box: Var) -> Result<DecoderOutputs> {
        let shared = self.shared.as_ref().map(|s| s.run(tape, store, context)).transpose()?;
        let (traj_h, act_h, dl_h) = match (&self.tasks, shared) {
            (None, Some(h_sd)) => (h_sd, h_sd, h_sd),
            (Some(tasks), shared) => {
                let x = match shared {
                    None => context,
                    Some(h_sd) => {
                        let gated = match self.gate {
                            Gate::Sigmoid => self_gate(tape, h_sd)?,
                            Gate::PassThrough => h_sd,
                        };
                        tape.concat(&[gated, context], 1)?
                    }
                };
                (
                    tasks.trajectory.run(tape, store, x, false)?,
                    tasks.action.run(tape, store, x, false)?,
                    tasks.discrete_location.run(tape, store, x, false)?,
                )
            }
            (None, None) => unreachable!("every variant has a shared or task decoder"),
        };
        let steps = tape.shape(context)[0];
        let mut boxes = self.trajectory_head.forward(tape, store, traj_h)?;
        if self.config.trajectory_mode == TrajectoryMode::Delta {
            boxes = tape.add(boxes, tape.repeat_rows(last_box, steps)?)?;
        }
        let crossing_prob = tape.mean_rows(tape.sigmoid(self.action_head.forward(tape, store, act_h)?)?)?;
        let cell_distribution = tape.mean_rows(tape.softmax(self.location_head.forward(tape, store, dl_h)?, 1)?)?;
        Ok(DecoderOutputs {
            boxes,
            crossing_prob,
            cell_distribution,
        })
    }
}
