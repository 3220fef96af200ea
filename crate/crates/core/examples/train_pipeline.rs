//! Generate a corpus, split it by pedestrian, train a compact model and evaluate it.
//!
//! Usage: `cargo run --release --example train_pipeline [epochs]`

use pedformer::data::{generate_synthetic, GridSpec, ScenarioConfig, WindowSpec};
use pedformer::model::{ModelConfig, PedFormer};
use pedformer::objectives::LossWeights;
use pedformer::train::{evaluate, split_by_track, write_epoch_csv, Dataset, TrainConfig, Trainer};

fn main() -> pedformer::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let window = WindowSpec {
        obs_len: 8,
        pred_len: 8,
        ..WindowSpec::default()
    };
    let scenario = ScenarioConfig {
        num_tracks: 30,
        map_size: [24, 48],
        track_len: [60, 90],
        window,
        ..ScenarioConfig::default()
    };
    let corpus = generate_synthetic(&scenario, 21)?;
    let (train_tracks, val_tracks) = split_by_track(&corpus.tracks, 0.15, 21);
    let config = ModelConfig::compact(8, 8);
    let grid = GridSpec::default();
    let train = Dataset::from_tracks(&train_tracks, &corpus.maps, &window, &grid, &config)?;
    let val = Dataset::from_tracks(&val_tracks, &corpus.maps, &window, &grid, &config)?;
    println!(
        "{} training samples from {} tracks, {} validation samples from {} tracks",
        train.len(),
        train_tracks.len(),
        val.len(),
        val_tracks.len()
    );

    let (model, store) = PedFormer::build(&config, 21)?;
    let weights = LossWeights::default().with_class_weights(&train.samples);
    let train_config = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        epochs,
        seed: 21,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&model, store, weights.clone(), train_config)?;
    let outcome = trainer.fit(&train, &val)?;
    let mut csv = Vec::new();
    write_epoch_csv(&mut csv, &outcome.log)?;
    print!("{}", String::from_utf8_lossy(&csv));

    let eval = evaluate(&model, &outcome.best, &val, &weights)?;
    let r = &eval.report;
    println!(
        "best epoch {:?}: ADE {:.1} FDE {:.1} ARB {:.1} FRB {:.1} FIoU {:.3} accuracy {:.3} AUC {:?}",
        outcome.best_epoch, r.ade, r.fde, r.arb, r.frb, r.fiou, r.accuracy, r.auc
    );
    Ok(())
}
