//! Fit eight synthetic samples until the model memorizes them.
//!
//! Usage: `cargo run --release --example overfit [learning_rate] [steps]`

use pedformer::data::{generate_synthetic, GridSpec, ScenarioConfig, WindowSpec};
use pedformer::model::{ModelConfig, PedFormer};
use pedformer::objectives::LossWeights;
use pedformer::train::{evaluate, Dataset, TrainConfig, Trainer};

fn main() -> pedformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let lr: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);

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
    let corpus = generate_synthetic(&scenario, 3)?;
    let config = ModelConfig::compact(8, 8);
    let all = Dataset::from_tracks(&corpus.tracks, &corpus.maps, &window, &GridSpec::default(), &config)?;
    let data = all.subset(&all.balanced_indices(4));

    let (model, store) = PedFormer::build(&config, 0)?;
    println!("{} parameters, {} samples ({} crossing)", store.num_scalars(), data.len(), data.crossing_count());
    let weights = LossWeights::default().with_class_weights(&data.samples);
    let train = TrainConfig {
        learning_rate: lr,
        batch_size: data.len(),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&model, store, weights.clone(), train)?;
    let batch: Vec<usize> = (0..data.len()).collect();
    let started = std::time::Instant::now();
    let mut first = None;
    for step in 0..steps {
        let loss = trainer.step(&data, &batch)?;
        let first = *first.get_or_insert(loss.trajectory);
        if step % 50 == 0 {
            println!(
                "step {step:>3}: total {:.5}  trajectory {:.6} ({:.2}% of start)  action {:.5}",
                loss.total,
                loss.trajectory,
                100.0 * loss.trajectory / first,
                loss.action
            );
        }
    }
    let eval = evaluate(&model, &trainer.store, &data, &weights)?;
    println!(
        "after {steps} steps: trajectory {:.6} ({:.2}% of start), crossing accuracy {}, ADE {:.2} px, {:.1} s",
        eval.loss.trajectory,
        100.0 * eval.loss.trajectory / first.unwrap_or(f64::NAN),
        eval.report.accuracy,
        eval.report.ade,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
