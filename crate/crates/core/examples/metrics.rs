//! Trajectory and crossing metrics on hand-made predictions.

use pedformer::metrics::{ade_fde, arb_frb, classification_metrics, fiou, EvalRecord, MetricReport};

fn main() -> pedformer::Result<()> {
    let gt = vec![[0.0, 0.0, 2.0, 2.0], [10.0, 10.0, 12.0, 12.0]];
    let pred = vec![[3.0, 4.0, 5.0, 6.0], [11.0, 11.0, 13.0, 13.0]];
    let (ade, fde) = ade_fde(&pred, &gt);
    let (arb, frb) = arb_frb(&pred, &gt);
    println!("ADE {ade:.4}  FDE {fde:.4}  ARB {arb:.4}  FRB {frb:.4}");
    println!("FIoU of (0,0,2,2) vs (1,1,3,3): {:?}", fiou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]));

    let probs = [0.9, 0.2, 0.65, 0.4, 0.1];
    let labels = [1, 0, 1, 1, 0];
    let c = classification_metrics(&probs, &labels, 0.5);
    println!("accuracy {:.2}  auc {:?}  f1 {:.3}  precision {:.2}", c.accuracy, c.auc, c.f1, c.precision);

    let records: Vec<EvalRecord> = probs
        .iter()
        .zip(labels)
        .map(|(&p, l)| EvalRecord {
            pred_boxes: pred.clone(),
            gt_boxes: gt.clone(),
            crossing_prob: p,
            crossing_label: l,
        })
        .collect();
    let report = MetricReport::from_records(&records)?;
    println!("{}\n{}", MetricReport::CSV_HEADER, report.csv_row());
    Ok(())
}
