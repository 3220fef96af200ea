//! Cross-modal attention over location, velocity, grid-cell and ego-motion streams.

use pedformer::model::{CrossModalEncoder, EncoderConfig, EncoderVariant, ModelConfig};
use pedformer::nn::Builder;
use pedformer::tensor::{OpKind, ParamStore, Tape};
use pedformer::verify::synthetic_batch;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pedformer::Result<()> {
    let config = ModelConfig::compact(15, 30);
    let inputs = &synthetic_batch(&config, 1, 5)[0].0;

    for variant in [EncoderVariant::CrossModal, EncoderVariant::SharedTransformer, EncoderVariant::ModalityTransformers] {
        let enc_config = EncoderConfig {
            variant,
            ..config.encoder.clone()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let encoder = CrossModalEncoder::new(&mut Builder::new(&mut store, &mut rng), &enc_config, config.num_cells)?;

        let tape = Tape::new();
        let streams = encoder.streams(&tape, &store, inputs)?;
        let out = encoder.encode(&tape, &store, inputs)?;
        let worst = tape
            .values_of_kind(OpKind::Softmax)
            .iter()
            .flat_map(|t| (0..t.shape()[0]).map(move |r| (t.row_slice(r).iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max);
        println!(
            "{variant:?}: {} streams of {:?}, {} cross-modal units, fused width {}, output {:?}, {} parameters, max |row sum - 1| {worst:.1e}",
            streams.len(),
            tape.shape(streams[0]),
            encoder.num_units(),
            enc_config.fused_width(),
            tape.shape(out),
            store.num_scalars(),
        );
    }
    Ok(())
}
