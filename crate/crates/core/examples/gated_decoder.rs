//! Decoder variants side by side: parameter census and output shapes.

use pedformer::model::{self_gate, DecoderConfig, DecoderVariant, ModelConfig, PedFormer};
use pedformer::tensor::{Tape, Tensor};
use pedformer::verify::synthetic_batch;

fn main() -> pedformer::Result<()> {
    let tape = Tape::new();
    let h = tape.constant(Tensor::row(&[-3.0, -0.5, 0.0, 0.5, 3.0]));
    println!("self-gate sigmoid(h)*h on {:?}: {:?}", tape.value(h).data(), tape.value(self_gate(&tape, h)?).data());

    let base = ModelConfig::compact(8, 8);
    let inputs = &synthetic_batch(&base, 1, 3)[0].0;
    for variant in [DecoderVariant::TaskBased, DecoderVariant::SharedOnly, DecoderVariant::Hybrid, DecoderVariant::GatedHybrid] {
        let config = ModelConfig {
            decoder: DecoderConfig {
                variant,
                ..base.decoder.clone()
            },
            ..base.clone()
        };
        let (model, store) = PedFormer::build(&config, 0)?;
        let p = model.predict(&store, inputs)?;
        println!(
            "{variant:?}: {} parameters (formula {}), {} boxes, crossing prob {:.3}, cell distribution sums to {:.12}",
            store.num_scalars(),
            PedFormer::expected_params(&config),
            p.future_boxes.len(),
            p.crossing_prob,
            p.cell_distribution.iter().sum::<f64>()
        );
    }
    Ok(())
}
