//! Multi-task training objective.

use serde::{Deserialize, Serialize};

use crate::data::{Profile, Sample};
use crate::error::{Error, Result};
use crate::model::DecoderOutputs;
use crate::tensor::{Tape, Tensor, Var};

/// Probability clamp used inside every logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub trajectory: f64,
    pub action: f64,
    pub discrete_location: f64,
    pub class_weight_cross: f64,
    pub class_weight_noncross: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::for_profile(Profile::Pie)
    }
}

impl LossWeights {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            trajectory: profile.trajectory_weight(),
            action: 1.0,
            discrete_location: 1.0,
            class_weight_cross: 1.0,
            class_weight_noncross: 1.0,
        }
    }

    /// Sets the crossing class weight to `N_noncross / N_cross` of `samples`.
    pub fn with_class_weights(mut self, samples: &[Sample]) -> Self {
        let crossing = samples.iter().filter(|s| s.crossing_label == 1).count();
        (self.class_weight_cross, self.class_weight_noncross) = class_weights(crossing, samples.len() - crossing);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("loss.trajectory", self.trajectory),
            ("loss.action", self.action),
            ("loss.discrete_location", self.discrete_location),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be non-negative"));
            }
        }
        for (name, v) in [
            ("loss.class_weight_cross", self.class_weight_cross),
            ("loss.class_weight_noncross", self.class_weight_noncross),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be positive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// `(w_cross, w_noncross) = (N_noncross / N_cross, 1)`; falls back to `(1, 1)` without both classes.
pub fn class_weights(crossing: usize, noncrossing: usize) -> (f64, f64) {
    if crossing == 0 || noncrossing == 0 {
        (1.0, 1.0)
    } else {
        (noncrossing as f64 / crossing as f64, 1.0)
    }
}

/// Ground truth for one sample in model space.
#[derive(Clone, Debug)]
pub struct Targets {
    /// `τ × 4` normalized boxes.
    pub boxes: Tensor,
    pub crossing: u8,
    pub cell: usize,
}

impl Targets {
    pub fn from_sample(sample: &Sample) -> Result<Self> {
        Ok(Self {
            boxes: Tensor::from_rows(&sample.future_boxes)?,
            crossing: sample.crossing_label,
            cell: sample.final_cell,
        })
    }
}

/// Loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub trajectory: Var,
    pub action: Var,
    pub discrete_location: Var,
}

/// `Σ log cosh(pred − target)`.
pub fn logcosh_loss(tape: &Tape, pred: Var, target: Var) -> Result<Var> {
    tape.sum(tape.log_cosh(tape.sub(pred, target)?)?)
}

/// Class-weighted binary cross-entropy of a `1 × 1` probability.
pub fn bce_action(tape: &Tape, prob: Var, label: u8, weights: &LossWeights) -> Result<Var> {
    let term = if label == 1 {
        tape.scale(tape.ln_clamped(prob, PROB_EPS, 1.0 - PROB_EPS)?, -weights.class_weight_cross)?
    } else {
        let one = tape.constant(Tensor::filled(&tape.shape(prob), 1.0));
        let q = tape.sub(one, prob)?;
        tape.scale(tape.ln_clamped(q, PROB_EPS, 1.0 - PROB_EPS)?, -weights.class_weight_noncross)?
    };
    tape.sum(term)
}

/// `−log p[cell]` of a `1 × N` distribution.
pub fn ce_discrete(tape: &Tape, distribution: Var, cell: usize) -> Result<Var> {
    let n = tape.shape(distribution)[1];
    if cell >= n {
        return Err(Error::Contract(format!("target cell {cell} outside {n} cells")));
    }
    let p = tape.narrow(distribution, 1, cell, 1)?;
    tape.sum(tape.scale(tape.ln_clamped(p, PROB_EPS, 1.0)?, -1.0)?)
}

/// Weighted objective of one sample.
pub fn sample_loss(tape: &Tape, outputs: &DecoderOutputs, targets: &Targets, weights: &LossWeights) -> Result<LossVars> {
    let trajectory = logcosh_loss(tape, outputs.boxes, tape.constant(targets.boxes.clone()))?;
    let action = bce_action(tape, outputs.crossing_prob, targets.crossing, weights)?;
    let discrete_location = ce_discrete(tape, outputs.cell_distribution, targets.cell)?;
    let total = tape.add(
        tape.add(tape.scale(trajectory, weights.trajectory)?, tape.scale(action, weights.action)?)?,
        tape.scale(discrete_location, weights.discrete_location)?,
    )?;
    Ok(LossVars {
        total,
        trajectory,
        action,
        discrete_location,
    })
}

/// Mean of per-sample objectives over a batch recorded on one tape.
pub fn batch_loss(tape: &Tape, batch: &[(DecoderOutputs, Targets)], weights: &LossWeights) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let terms = batch
        .iter()
        .map(|(o, t)| sample_loss(tape, o, t, weights).map(|l| l.total))
        .collect::<Result<Vec<_>>>()?;
    tape.scale(tape.sum(tape.concat(&terms, 0)?)?, 1.0 / batch.len() as f64)
}

/// Plain-value forms of the loss terms.
pub mod values {
    use super::PROB_EPS;

    pub fn logcosh(pred: &[[f64; 4]], target: &[[f64; 4]]) -> f64 {
        pred.iter()
            .zip(target)
            .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| crate::tensor::log_cosh(a - b)))
            .sum()
    }

    pub fn bce(prob: f64, label: u8, w_cross: f64, w_noncross: f64) -> f64 {
        let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
        if label == 1 {
            -w_cross * p.ln()
        } else {
            -w_noncross * (1.0 - p).ln()
        }
    }

    pub fn cross_entropy(distribution: &[f64], cell: usize) -> f64 {
        -distribution[cell].clamp(PROB_EPS, 1.0).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn weights(l: f64, a: f64, dl: f64) -> LossWeights {
        LossWeights {
            trajectory: l,
            action: a,
            discrete_location: dl,
            class_weight_cross: 3.0,
            class_weight_noncross: 1.0,
        }
    }

    #[test]
    fn logcosh_values() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 4]));
        assert_eq!(tape.scalar(logcosh_loss(&tape, z, z).unwrap()), 0.0);
        let one = tape.constant(Tensor::row(&[1.0]));
        let zero = tape.constant(Tensor::row(&[0.0]));
        assert!((tape.scalar(logcosh_loss(&tape, one, zero).unwrap()) - 0.433_780_830_483_027).abs() < 1e-12);
        let big = tape.constant(Tensor::row(&[50.0]));
        let v = tape.scalar(logcosh_loss(&tape, big, zero).unwrap());
        assert!((v - (50.0 - std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn bce_values() {
        let w = weights(1.0, 1.0, 1.0);
        let unit = LossWeights { class_weight_cross: 1.0, ..w.clone() };
        let tape = Tape::new();
        let half = tape.constant(Tensor::matrix(1, 1, vec![0.5]).unwrap());
        for label in [0, 1] {
            let v = tape.scalar(bce_action(&tape, half, label, &unit).unwrap());
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
        let near = tape.constant(Tensor::matrix(1, 1, vec![1.0 - 1e-12]).unwrap());
        assert!(tape.scalar(bce_action(&tape, near, 1, &w).unwrap()) < 1e-6);
        assert_eq!(class_weights(995, 3980 - 995), (3.0, 1.0));
        let v = tape.scalar(bce_action(&tape, half, 1, &w).unwrap());
        assert!((v - 3.0 * std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(values::bce(0.5, 1, 3.0, 1.0), v);
    }

    #[test]
    fn ce_values() {
        let tape = Tape::new();
        let uniform = tape.constant(Tensor::filled(&[1, 576], 1.0 / 576.0));
        assert!((tape.scalar(ce_discrete(&tape, uniform, 17).unwrap()) - 576f64.ln()).abs() < 1e-12);
        let mut hot = vec![0.0; 576];
        hot[3] = 1.0;
        let hot = tape.constant(Tensor::row(&hot));
        assert!(tape.scalar(ce_discrete(&tape, hot, 3).unwrap()).abs() < 1e-7);
        assert!((tape.scalar(ce_discrete(&tape, hot, 4).unwrap()) - 1e7f64.ln()).abs() < 1e-9);
        assert!(matches!(ce_discrete(&tape, hot, 576), Err(Error::Contract(_))));
    }

    fn random_outputs(tape: &Tape, rng: &mut ChaCha8Rng) -> (DecoderOutputs, Targets, Vec<[f64; 4]>, f64, Vec<f64>) {
        let boxes: Vec<[f64; 4]> = (0..3).map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0))).collect();
        let prob = rng.gen_range(0.05..0.95);
        let mut dist: Vec<f64> = (0..5).map(|_| rng.gen_range(0.1..1.0)).collect();
        let z: f64 = dist.iter().sum();
        dist.iter_mut().for_each(|p| *p /= z);
        let target: Vec<[f64; 4]> = (0..3).map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0))).collect();
        let outputs = DecoderOutputs {
            boxes: tape.constant(Tensor::from_rows(&boxes).unwrap()),
            crossing_prob: tape.constant(Tensor::matrix(1, 1, vec![prob]).unwrap()),
            cell_distribution: tape.constant(Tensor::row(&dist)),
        };
        let label = rng.gen_range(0..2u8);
        let cell = rng.gen_range(0..5);
        let targets = Targets { boxes: Tensor::from_rows(&target).unwrap(), crossing: label, cell };
        (outputs, targets, boxes, prob, dist)
    }

    #[test]
    fn total_matches_hand_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::new();
        let w = weights(0.6, 1.0, 1.0);
        let mut batch = Vec::new();
        let mut expected = 0.0;
        for _ in 0..2 {
            let (o, t, boxes, prob, dist) = random_outputs(&tape, &mut rng);
            let target: Vec<[f64; 4]> = (0..3).map(|r| std::array::from_fn(|k| t.boxes.at(r, k))).collect();
            expected += 0.6 * values::logcosh(&boxes, &target)
                + values::bce(prob, t.crossing, 3.0, 1.0)
                + values::cross_entropy(&dist, t.cell);
            batch.push((o, t));
        }
        let got = tape.scalar(batch_loss(&tape, &batch, &w).unwrap());
        assert!((got - expected / 2.0).abs() < 1e-12);
        assert_eq!(tape.scalar(batch_loss(&tape, &batch, &weights(0.0, 0.0, 0.0)).unwrap()), 0.0);
        let traj_only = tape.scalar(batch_loss(&tape, &batch, &weights(0.6, 0.0, 0.0)).unwrap());
        let traj: f64 = batch
            .iter()
            .map(|(o, t)| tape.scalar(logcosh_loss(&tape, o.boxes, tape.constant(t.boxes.clone())).unwrap()))
            .sum();
        assert!((traj_only - 0.6 * traj / 2.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_wrt_predictions() {
        let mut store = ParamStore::new();
        let boxes = store.add("boxes", Tensor::from_rows(&[[0.2, 0.3, 0.4, 0.6], [0.25, 0.3, 0.45, 0.62]]).unwrap(), 0.0).unwrap();
        let logit = store.add("logit", Tensor::matrix(1, 1, vec![0.3]).unwrap(), 0.0).unwrap();
        let cells = store.add("cells", Tensor::row(&[0.1, -0.4, 0.7, 0.2]), 0.0).unwrap();
        let target = Tensor::from_rows(&[[0.1, 0.3, 0.3, 0.5], [0.3, 0.2, 0.5, 0.7]]).unwrap();
        for label in [0u8, 1] {
            let report = grad_check(
                &store,
                |tape, s| {
                    let outputs = DecoderOutputs {
                        boxes: tape.param(s, boxes),
                        crossing_prob: tape.sigmoid(tape.param(s, logit))?,
                        cell_distribution: tape.softmax(tape.param(s, cells), 1)?,
                    };
                    let t = Targets { boxes: target.clone(), crossing: label, cell: 2 };
                    batch_loss(tape, &[(outputs, t)], &weights(0.6, 1.0, 1.0))
                },
                GradCheckOptions { step: 1e-5, tolerance: 1e-5, max_entries: None },
            )
            .unwrap();
            assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
        }
    }
}
