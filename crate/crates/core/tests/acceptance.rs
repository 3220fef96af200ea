//! Acceptance checks, one line per criterion. Criterion 7 is reported but never fails the run.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use pedformer::data::{generate_synthetic, GridSpec, ScenarioConfig, WindowSpec};
use pedformer::metrics::{ade_fde, arb_frb, auc, fiou};
use pedformer::model::{self_gate, DecoderOutputs, ModelConfig, PedFormer, SaimMode};
use pedformer::objectives::{batch_loss, values, LossWeights, Targets};
use pedformer::tensor::{log_cosh, write_checkpoint, OpKind, Tape, Tensor};
use pedformer::train::{split_by_track, Dataset, TrainConfig, Trainer};
use pedformer::verify::{run_suite, synthetic_batch, SuiteOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradient_suite() -> Check {
    let started = Instant::now();
    let report = run_suite(&ModelConfig::tiny(), &SuiteOptions::default()).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let model_names = ["cross_modal_encoder", "scene_interaction", "gated_decoder", "end_to_end_loss"];
    let worst = |model: bool| {
        report
            .checks
            .iter()
            .filter(|c| model_names.contains(&c.name.as_str()) == model)
            .fold(0.0_f64, |m, c| m.max(c.max_rel_error))
    };
    let failing: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    ensure(failing.is_empty(), format!("failing checks: {failing:?}"))?;
    ensure(secs < 120.0, format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} checks; primitives max rel err {:.1e} (tol 1e-5), modules and loss {:.1e} (tol 1e-3); {secs:.1} s",
        report.checks.len(),
        worst(false),
        worst(true),
    ))
}

fn single_batch_overfit() -> Check {
    let started = Instant::now();
    let window = WindowSpec {
        obs_len: 8,
        pred_len: 8,
        ..WindowSpec::default()
    };
    let scenario = ScenarioConfig {
        num_tracks: 12,
        map_size: [24, 48],
        crossing_ratio: 0.5,
        window,
        ..ScenarioConfig::default()
    };
    let corpus = generate_synthetic(&scenario, 3).map_err(|e| e.to_string())?;
    let config = ModelConfig::compact(8, 8);
    let all = Dataset::from_tracks(&corpus.tracks, &corpus.maps, &window, &GridSpec::default(), &config)
        .map_err(|e| e.to_string())?;
    let data = all.subset(&all.balanced_indices(4));
    ensure(data.len() == 8, format!("only {} samples", data.len()))?;
    let (model, store) = PedFormer::build(&config, 0).map_err(|e| e.to_string())?;
    let weights = LossWeights::default().with_class_weights(&data.samples);
    let train = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&model, store, weights.clone(), train).map_err(|e| e.to_string())?;
    let batch: Vec<usize> = (0..8).collect();
    let mut first = None;
    for _ in 0..300 {
        let loss = trainer.step(&data, &batch).map_err(|e| e.to_string())?;
        first.get_or_insert(loss.trajectory);
    }
    let eval = pedformer::train::evaluate(&model, &trainer.store, &data, &weights).map_err(|e| e.to_string())?;
    let ratio = eval.loss.trajectory / first.expect("ran");
    let secs = started.elapsed().as_secs_f64();
    let summary = format!(
        "width 64, pred 8, 300 steps: trajectory loss at {:.2}% of step 0, crossing accuracy {}, {secs:.1} s",
        100.0 * ratio,
        eval.report.accuracy
    );
    ensure(ratio <= 0.01 && eval.report.accuracy == 1.0 && secs < 300.0, summary.clone())?;
    Ok(summary)
}

fn oracle_ade_fde(pred: &[[f64; 4]], gt: &[[f64; 4]]) -> (f64, f64) {
    let mut total = 0.0;
    let mut last = 0.0;
    for t in 0..pred.len() {
        let dx = (pred[t][0] + pred[t][2]) / 2.0 - (gt[t][0] + gt[t][2]) / 2.0;
        let dy = (pred[t][1] + pred[t][3]) / 2.0 - (gt[t][1] + gt[t][3]) / 2.0;
        last = (dx * dx + dy * dy).sqrt();
        total += last;
    }
    (total / pred.len() as f64, last)
}

fn oracle_arb_frb(pred: &[[f64; 4]], gt: &[[f64; 4]]) -> (f64, f64) {
    let mut total = 0.0;
    let mut last = 0.0;
    for t in 0..pred.len() {
        let mut sq = 0.0;
        for k in 0..4 {
            sq += (pred[t][k] - gt[t][k]) * (pred[t][k] - gt[t][k]);
        }
        last = (sq / 4.0).sqrt();
        total += last;
    }
    (total / pred.len() as f64, last)
}

/// IoU of integer boxes by counting unit pixels.
fn oracle_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let inside = |r: &[f64; 4], x: f64, y: f64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..48 {
        for x in 0..48 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (ia, ib) = (inside(a, px, py), inside(b, px, py));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

fn oracle_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    credit += 1.0;
                } else if scores[i] == scores[j] {
                    credit += 0.5;
                }
            }
        }
    }
    credit / pairs
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let random_box = |rng: &mut ChaCha8Rng| {
        let (x, y) = (rng.gen_range(0.0..1800.0), rng.gen_range(0.0..1000.0));
        [x, y, x + rng.gen_range(1.0..120.0), y + rng.gen_range(1.0..80.0)]
    };
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=30);
        let pred: Vec<[f64; 4]> = (0..n).map(|_| random_box(&mut rng)).collect();
        let gt: Vec<[f64; 4]> = (0..n).map(|_| random_box(&mut rng)).collect();
        let (a, f) = ade_fde(&pred, &gt);
        let (oa, of) = oracle_ade_fde(&pred, &gt);
        let (r, fr) = arb_frb(&pred, &gt);
        let (or, ofr) = oracle_arb_frb(&pred, &gt);
        for (x, y) in [(a, oa), (f, of), (r, or), (fr, ofr)] {
            worst = worst.max((x - y).abs());
        }
    }
    for _ in 0..100 {
        let mut int_box = || {
            let (x, y) = (rng.gen_range(0..40) as f64, rng.gen_range(0..40) as f64);
            [x, y, x + rng.gen_range(1..9) as f64, y + rng.gen_range(1..9) as f64]
        };
        let (a, b) = (int_box(), int_box());
        worst = worst.max((fiou(&a, &b).expect("positive area") - oracle_iou(&a, &b)).abs());
    }
    for _ in 0..100 {
        let n = rng.gen_range(2..60);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
        worst = worst.max((auc(&scores, &labels).expect("both classes") - oracle_auc(&scores, &labels)).abs());
    }
    ensure(worst <= 1e-9, format!("largest deviation {worst:e}"))?;
    let (ade, _) = ade_fde(&[[3.0, 4.0, 5.0, 6.0]], &[[0.0, 0.0, 2.0, 2.0]]);
    ensure(ade == 5.0, format!("3-4-5 case gave {ade}"))?;
    let iou = fiou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]).expect("area");
    ensure(iou == 1.0 / 7.0, format!("(0,0,2,2)/(1,1,3,3) gave {iou}"))?;
    Ok(format!("300 random instances within {worst:.1e} of brute force; ADE 5 and FIoU 1/7 exact"))
}

fn structural_invariants() -> Check {
    let mut softmax_worst = 0.0_f64;
    let mut dl_worst = 0.0_f64;
    let mut rows = 0usize;
    let configs = [ModelConfig::tiny(), ModelConfig::compact(8, 8)];
    for pass in 0..1000 {
        let mut config = configs[pass % 2].clone();
        if pass % 4 == 1 {
            config.saim.mode = SaimMode::NoGlobalAttention;
        }
        let (model, store) = PedFormer::build(&config, pass as u64).map_err(|e| e.to_string())?;
        let (inputs, _) = synthetic_batch(&config, 1, 10_000 + pass as u64).remove(0);
        let tape = Tape::new();
        let out = model.forward(&tape, &store, &inputs).map_err(|e| e.to_string())?;
        for t in tape.values_of_kind(OpKind::Softmax) {
            for r in 0..t.shape()[0] {
                softmax_worst = softmax_worst.max((t.row_slice(r).iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
        }
        dl_worst = dl_worst.max((tape.value(out.cell_distribution).data().iter().sum::<f64>() - 1.0).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut gate_violations = 0usize;
    let mut gated = 0usize;
    for _ in 0..200 {
        let scale = 10f64.powi(rng.gen_range(-3..4));
        let h: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let tape = Tape::new();
        let g = tape.value(self_gate(&tape, tape.constant(Tensor::row(&h))).map_err(|e| e.to_string())?);
        for (gi, hi) in g.data().iter().zip(&h) {
            gated += 1;
            gate_violations += usize::from(gi.abs() > hi.abs());
        }
    }
    ensure(softmax_worst <= 1e-10, format!("softmax row off by {softmax_worst:e}"))?;
    ensure(dl_worst <= 1e-9, format!("location distribution off by {dl_worst:e}"))?;
    ensure(gate_violations == 0, format!("{gate_violations} gate violations"))?;
    Ok(format!(
        "1000 forward passes, {rows} softmax rows within {softmax_worst:.1e}; location sums within {dl_worst:.1e}; gate bound on {gated} values"
    ))
}

fn grid_fidelity() -> Check {
    let grid = GridSpec::default();
    let recovered = (0..grid.num_cells())
        .filter(|&c| {
            let (x, y) = grid.cell_center(c);
            grid.cell_of_point(x, y) == c
        })
        .count();
    let corner = grid.cell_of_point(1890.0, 1050.0);
    // enumeration oracle: the first cell whose square contains the point
    let oracle = (0..grid.rows * grid.cols)
        .find(|&c| {
            let (r, k) = (c / grid.cols, c % grid.cols);
            let (x0, y0) = ((k * grid.cell_px) as f64, (r * grid.cell_px) as f64);
            (x0..x0 + grid.cell_px as f64).contains(&1890.0) && (y0..y0 + grid.cell_px as f64).contains(&1050.0)
        })
        .expect("covered");
    ensure(recovered == 576 && grid.num_cells() == 576, format!("{recovered}/{} centers recovered", grid.num_cells()))?;
    ensure(corner == 575 && oracle == 575, format!("corner maps to {corner}, oracle {oracle}"))?;
    Ok("576/576 centers recovered; (1890, 1050) -> 575".into())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn variant_trend() -> Check {
    let started = Instant::now();
    let window = WindowSpec {
        obs_len: 8,
        pred_len: 8,
        ..WindowSpec::default()
    };
    let mut full = Vec::new();
    let mut off = Vec::new();
    for seed in 0..5u64 {
        let scenario = ScenarioConfig {
            num_tracks: 40,
            map_size: [24, 48],
            track_len: [60, 80],
            speed_dependent_crossing: true,
            crossing_ratio: 0.5,
            window,
            ..ScenarioConfig::default()
        };
        let corpus = generate_synthetic(&scenario, 100 + seed).map_err(|e| e.to_string())?;
        let (train_tracks, val_tracks) = split_by_track(&corpus.tracks, 0.15, seed);
        for (mode, sink) in [(SaimMode::Full, &mut full), (SaimMode::Off, &mut off)] {
            let mut config = ModelConfig::compact(8, 8);
            config.saim.mode = mode;
            let grid = GridSpec::default();
            let train = Dataset::from_tracks(&train_tracks, &corpus.maps, &window, &grid, &config).map_err(|e| e.to_string())?;
            let val = Dataset::from_tracks(&val_tracks, &corpus.maps, &window, &grid, &config).map_err(|e| e.to_string())?;
            let (model, store) = PedFormer::build(&config, seed).map_err(|e| e.to_string())?;
            let weights = LossWeights::default().with_class_weights(&train.samples);
            let tc = TrainConfig {
                learning_rate: 1e-3,
                batch_size: 16,
                epochs: 12,
                seed,
                ..TrainConfig::default()
            };
            let mut trainer = Trainer::new(&model, store, weights, tc).map_err(|e| e.to_string())?;
            let outcome = trainer.fit(&train, &val).map_err(|e| e.to_string())?;
            let best = outcome.best_epoch.ok_or("no epoch completed")?;
            let ade = outcome.log[best - 1].metrics.as_ref().ok_or("no validation metrics")?.ade;
            sink.push(ade);
        }
    }
    let (mf, mo) = (median(full.clone()), median(off.clone()));
    let summary = format!(
        "median validation ADE over 5 seeds: full {mf:.2} px vs scene module off {mo:.2} px (per seed {full:.1?} / {off:.1?}); {:.0} s",
        started.elapsed().as_secs_f64()
    );
    if mf <= mo {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn determinism() -> Check {
    let window = WindowSpec {
        obs_len: 4,
        pred_len: 3,
        ..WindowSpec::default()
    };
    let scenario = ScenarioConfig {
        num_tracks: 4,
        map_size: [24, 24],
        track_len: [60, 70],
        window,
        ..ScenarioConfig::default()
    };
    let mut config = ModelConfig::tiny();
    config.num_cells = 576;
    let run = || -> Result<(u64, Vec<u8>), String> {
        let corpus = generate_synthetic(&scenario, 8).map_err(|e| e.to_string())?;
        let (train_tracks, val_tracks) = split_by_track(&corpus.tracks, 0.25, 8);
        let grid = GridSpec::default();
        let train = Dataset::from_tracks(&train_tracks, &corpus.maps, &window, &grid, &config).map_err(|e| e.to_string())?;
        let val = Dataset::from_tracks(&val_tracks, &corpus.maps, &window, &grid, &config).map_err(|e| e.to_string())?;
        let (model, store) = PedFormer::build(&config, 8).map_err(|e| e.to_string())?;
        let weights = LossWeights::default().with_class_weights(&train.samples);
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 8,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&model, store, weights, tc).map_err(|e| e.to_string())?;
        let outcome = trainer.fit(&train, &val).map_err(|e| e.to_string())?;
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &trainer.store, &serde_json::to_value(&config).expect("config")).map_err(|e| e.to_string())?;
        Ok((outcome.log[0].train.total.to_bits(), bytes))
    };
    let (l1, c1) = run()?;
    let (l2, c2) = run()?;
    ensure(l1 == l2, format!("epoch-1 loss {} vs {}", f64::from_bits(l1), f64::from_bits(l2)))?;
    ensure(c1 == c2, "checkpoints differ")?;
    Ok(format!("epoch-1 loss {} identical to the bit; checkpoints identical ({} bytes)", f64::from_bits(l1), c1.len()))
}

fn loss_constants() -> Check {
    let lc = log_cosh(1.0);
    let lc_box = values::logcosh(&[[1.0, 0.0, 0.0, 0.0]], &[[0.0; 4]]);
    let bce = values::bce(0.5, 1, 1.0, 1.0);
    let bce0 = values::bce(0.5, 0, 1.0, 1.0);
    let uniform = vec![1.0 / 576.0; 576];
    let ce = values::cross_entropy(&uniform, 123);
    ensure(format!("{lc:.6}") == "0.433781", format!("log cosh 1 = {lc}"))?;
    ensure((lc - 0.433_780_830_483_027).abs() <= 1e-9 && (lc_box - lc).abs() <= 1e-9, format!("log cosh {lc}"))?;
    ensure((bce - 2f64.ln()).abs() <= 1e-9 && (bce0 - 2f64.ln()).abs() <= 1e-9, format!("BCE {bce} {bce0}"))?;
    ensure((ce - 576f64.ln()).abs() <= 1e-9, format!("CE {ce}"))?;

    // the same constants through the differentiable objective
    let tape = Tape::new();
    let outputs = DecoderOutputs {
        boxes: tape.constant(Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).expect("shape")),
        crossing_prob: tape.constant(Tensor::new(vec![1, 1], vec![0.5]).expect("shape")),
        cell_distribution: tape.constant(Tensor::new(vec![1, 576], uniform).expect("shape")),
    };
    let targets = Targets {
        boxes: Tensor::zeros(&[1, 4]),
        crossing: 1,
        cell: 7,
    };
    let weights = LossWeights {
        trajectory: 1.0,
        ..LossWeights::default()
    };
    let total = tape.scalar(batch_loss(&tape, &[(outputs, targets)], &weights).map_err(|e| e.to_string())?);
    let expected = lc + 2f64.ln() + 576f64.ln();
    ensure((total - expected).abs() <= 1e-9, format!("objective {total} vs {expected}"))?;
    Ok(format!("log cosh 1 = {lc:.12}, BCE(0.5) = ln 2, uniform CE = ln 576 = {ce:.12}"))
}

fn main() {
    let criteria: Vec<(u32, &str, bool, fn() -> Check)> = vec![
        (2, "gradient suite", true, gradient_suite),
        (3, "single-batch overfit", true, single_batch_overfit),
        (4, "metric oracles", true, metric_oracles),
        (5, "structural invariants", true, structural_invariants),
        (6, "grid fidelity", true, grid_fidelity),
        (7, "variant trend", false, variant_trend),
        (8, "determinism", true, determinism),
        (9, "loss constants", true, loss_constants),
    ];
    let only: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    println!("criterion 1 (published benchmark numbers): SKIP, needs the real datasets; covered by criteria 2-9");
    let mut blocking_failures = 0;
    for (id, name, blocking, check) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let status = match (&result, blocking) {
            (Ok(_), _) => "PASS",
            (Err(_), true) => {
                blocking_failures += 1;
                "FAIL"
            }
            (Err(_), false) => "FAIL (non-blocking)",
        };
        let detail = match result {
            Ok(s) | Err(s) => s,
        };
        println!("criterion {id} ({name}): {status}: {detail}");
    }
    if blocking_failures > 0 {
        println!("{blocking_failures} blocking criteria failed");
        std::process::exit(1);
    }
}
