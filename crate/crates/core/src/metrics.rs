//! Evaluation metrics in pixel space.

use serde::{Deserialize, Serialize};

use crate::data::PixelBox;
use crate::error::{Error, Result};

pub fn box_center(b: &PixelBox) -> (f64, f64) {
    ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0)
}

fn center_distance(a: &PixelBox, b: &PixelBox) -> f64 {
    let (ax, ay) = box_center(a);
    let (bx, by) = box_center(b);
    (ax - bx).hypot(ay - by)
}

fn box_rmse(a: &PixelBox, b: &PixelBox) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 4.0).sqrt()
}

/// Mean and final center displacement of one trajectory.
pub fn ade_fde(pred: &[PixelBox], gt: &[PixelBox]) -> (f64, f64) {
    let d: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| center_distance(p, g)).collect();
    (d.iter().sum::<f64>() / d.len() as f64, d[d.len() - 1])
}

/// Mean and final per-step RMSE of the box coordinates.
pub fn arb_frb(pred: &[PixelBox], gt: &[PixelBox]) -> (f64, f64) {
    let d: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| box_rmse(p, g)).collect();
    (d.iter().sum::<f64>() / d.len() as f64, d[d.len() - 1])
}

pub fn box_area(b: &PixelBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection over union; `None` when the ground-truth box has no area.
pub fn fiou(pred: &PixelBox, gt: &PixelBox) -> Option<f64> {
    let gt_area = box_area(gt);
    if !(gt_area > 0.0) {
        return None;
    }
    let iw = (pred[2].min(gt[2]) - pred[0].max(gt[0])).max(0.0);
    let ih = (pred[3].min(gt[3]) - pred[1].max(gt[1])).max(0.0);
    let inter = iw * ih;
    let union = box_area(pred) + gt_area - inter;
    Some((inter / union).clamp(0.0, 1.0))
}

/// Area under the ROC curve from the rank statistic; ties get half credit.
/// `None` unless both classes are present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub f1: f64,
    pub precision: f64,
}

pub fn classification_metrics(probs: &[f64], labels: &[u8], threshold: f64) -> Classification {
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in probs.iter().zip(labels) {
        match (p >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Classification {
        accuracy: ratio(tp + tn, probs.len()),
        auc: auc(probs, labels),
        f1,
        precision,
    }
}

/// One evaluated sample in pixel space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pred_boxes: Vec<PixelBox>,
    pub gt_boxes: Vec<PixelBox>,
    pub crossing_prob: f64,
    pub crossing_label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ade: f64,
    pub fde: f64,
    pub arb: f64,
    pub frb: f64,
    pub fiou: f64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub f1: f64,
    pub precision: f64,
    pub samples: usize,
    /// Samples left out of FIoU because their final ground-truth box is degenerate.
    pub fiou_skipped: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "ade,fde,arb,frb,fiou,acc,auc,f1,prec";

    pub fn from_records(records: &[EvalRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Config("evaluation split is empty".into()));
        }
        let n = records.len() as f64;
        let (mut ade, mut fde, mut arb, mut frb, mut iou) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut iou_count = 0usize;
        for r in records {
            if r.pred_boxes.is_empty() || r.pred_boxes.len() != r.gt_boxes.len() {
                return Err(Error::Contract(format!(
                    "prediction has {} steps, ground truth {}",
                    r.pred_boxes.len(),
                    r.gt_boxes.len()
                )));
            }
            let (a, f) = ade_fde(&r.pred_boxes, &r.gt_boxes);
            let (ar, fr) = arb_frb(&r.pred_boxes, &r.gt_boxes);
            ade += a;
            fde += f;
            arb += ar;
            frb += fr;
            let last = r.gt_boxes.len() - 1;
            if let Some(v) = fiou(&r.pred_boxes[last], &r.gt_boxes[last]) {
                iou += v;
                iou_count += 1;
            }
        }
        let probs: Vec<f64> = records.iter().map(|r| r.crossing_prob).collect();
        let labels: Vec<u8> = records.iter().map(|r| r.crossing_label).collect();
        let c = classification_metrics(&probs, &labels, 0.5);
        Ok(Self {
            ade: ade / n,
            fde: fde / n,
            arb: arb / n,
            frb: frb / n,
            fiou: if iou_count == 0 { 0.0 } else { iou / iou_count as f64 },
            accuracy: c.accuracy,
            auc: c.auc,
            f1: c.f1,
            precision: c.precision,
            samples: records.len(),
            fiou_skipped: records.len() - iou_count,
        })
    }

    /// CSV row matching [`MetricReport::CSV_HEADER`]; an undefined AUC is left empty.
    pub fn csv_row(&self) -> String {
        let auc = self.auc.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.ade, self.fde, self.arb, self.frb, self.fiou, self.accuracy, auc, self.f1, self.precision
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn boxes_strategy(len: usize) -> impl Strategy<Value = Vec<PixelBox>> {
        prop::collection::vec(
            (0.0..1800.0f64, 0.0..1000.0f64, 1.0..120.0f64, 1.0..80.0f64).prop_map(|(x, y, w, h)| [x, y, x + w, y + h]),
            len,
        )
    }

    #[test]
    fn three_four_five_offset() {
        let gt: Vec<PixelBox> = (0..4).map(|k| [10.0 * k as f64, 5.0, 10.0 * k as f64 + 20.0, 45.0]).collect();
        let pred: Vec<PixelBox> = gt.iter().map(|b| [b[0] + 3.0, b[1] + 4.0, b[2] + 3.0, b[3] + 4.0]).collect();
        assert_eq!(ade_fde(&pred, &gt), (5.0, 5.0));
        assert_eq!(ade_fde(&gt, &gt), (0.0, 0.0));
        let plus2: Vec<PixelBox> = gt.iter().map(|b| b.map(|v| v + 2.0)).collect();
        assert_eq!(arb_frb(&plus2, &gt), (2.0, 2.0));
    }

    #[test]
    fn iou_cases() {
        assert_eq!(fiou(&[0.0, 0.0, 2.0, 2.0], &[0.0, 0.0, 2.0, 2.0]), Some(1.0));
        assert_eq!(fiou(&[0.0, 0.0, 1.0, 1.0], &[5.0, 5.0, 6.0, 6.0]), Some(0.0));
        assert_eq!(fiou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]), Some(1.0 / 7.0));
        assert_eq!(fiou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 1.0, 3.0]), None);
    }

    #[test]
    fn classification_cases() {
        let c = classification_metrics(&[0.9, 0.1], &[1, 0], 0.5);
        assert_eq!((c.accuracy, c.precision, c.f1, c.auc), (1.0, 1.0, 1.0, Some(1.0)));
        assert_eq!(auc(&[0.3, 0.2], &[1, 1]), None);
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]), Some(0.5));
        let c = classification_metrics(&[0.2, 0.3], &[1, 0], 0.5);
        assert_eq!((c.precision, c.f1), (0.0, 0.0));
    }

    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    total += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        total / pairs
    }

    #[test]
    fn six_sample_auc_matches_pairwise() {
        let scores = [0.8, 0.4, 0.4, 0.7, 0.1, 0.4];
        let labels = [1, 0, 1, 0, 0, 1];
        assert_eq!(auc(&scores, &labels).unwrap(), pairwise_auc(&scores, &labels));
    }

    #[test]
    fn empty_report_errors() {
        assert!(MetricReport::from_records(&[]).is_err());
    }

    proptest! {
        #[test]
        fn single_step_ade_equals_fde(p in boxes_strategy(1), g in boxes_strategy(1)) {
            let (a, f) = ade_fde(&p, &g);
            prop_assert_eq!(a, f);
            let (ar, fr) = arb_frb(&p, &g);
            prop_assert_eq!(ar, fr);
        }

        #[test]
        fn iou_symmetric_and_scale_covariant(p in boxes_strategy(1), g in boxes_strategy(1), s in 0.1..10.0f64) {
            let a = fiou(&p[0], &g[0]).unwrap();
            prop_assert!((a - fiou(&g[0], &p[0]).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
            let scaled = fiou(&p[0].map(|v| v * s), &g[0].map(|v| v * s)).unwrap();
            prop_assert!((a - scaled).abs() < 1e-9);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            scores in prop::collection::vec(0.0..1.0f64, 2..30),
            seed in any::<u64>(),
        ) {
            let labels: Vec<u8> = (0..scores.len()).map(|k| ((seed >> (k % 64)) & 1) as u8).collect();
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auc(&scores, &labels), auc(&transformed, &labels));
        }
    }
}
