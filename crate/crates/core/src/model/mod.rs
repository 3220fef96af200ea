//! The full predictor: cross-modal encoder, scene interaction module and
//! gated hybrid decoder, wired according to a [`ModelConfig`].

mod config;
mod decoder;
mod encoder;
mod inputs;
mod saim;

pub use config::{
    DecoderConfig, DecoderVariant, EncoderConfig, EncoderVariant, InputScale, Modality, ModelConfig, Pooling, SaimConfig,
    SaimMode, TrajectoryMode,
};
pub use decoder::{self_gate, DecoderOutputs, Gate, GatedDecoder, TaskDecoders};
pub use encoder::CrossModalEncoder;
pub use inputs::{patchify, SampleInputs};
pub use saim::{DynamicsEncoder, Saim};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::Builder;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Predictions for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    /// Normalized boxes, `τ` rows.
    pub future_boxes: Vec<[f64; 4]>,
    pub crossing_prob: f64,
    pub cell_distribution: Vec<f64>,
}

pub struct PedFormer {
    pub config: ModelConfig,
    pub encoder: CrossModalEncoder,
    pub saim: Option<Saim>,
    pub decoder: GatedDecoder,
}

impl PedFormer {
    /// Creates the model and its freshly initialized parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let model = Self::with_builder(&mut b, config)?;
        Ok((model, store))
    }

    /// Builds the module structure into an existing builder.
    pub fn with_builder(b: &mut Builder, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoder = CrossModalEncoder::new(b, &config.encoder, config.num_cells)?;
        let saim = match config.saim.mode {
            SaimMode::Off => None,
            _ => Some(Saim::new(b, &config.saim, config.encoder.d_embed, config.l2_recurrent)?),
        };
        let decoder = GatedDecoder::new(b, &config.decoder, config.context_dim(), config.num_cells, config.l2_recurrent)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            saim,
            decoder,
        })
    }

    /// Closed-form parameter count of a configuration.
    pub fn expected_params(config: &ModelConfig) -> usize {
        CrossModalEncoder::expected_params(&config.encoder, config.num_cells)
            + Saim::expected_params(&config.saim, config.encoder.d_embed)
            + GatedDecoder::expected_params(&config.decoder, config.context_dim(), config.num_cells)
    }

    /// The decoder context Ψ: `τ × context_dim`.
    pub fn context(&self, tape: &Tape, store: &ParamStore, inputs: &SampleInputs) -> Result<Var> {
        let mut summary = vec![self.encoder.encode(tape, store, inputs)?];
        if let Some(saim) = &self.saim {
            summary.push(saim.encode(tape, store, inputs)?);
        }
        let tau = inputs.ego_future.rows();
        let summary = tape.repeat_rows(tape.concat(&summary, 1)?, tau)?;
        tape.concat(&[summary, tape.constant(inputs.ego_future.clone())], 1)
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, inputs: &SampleInputs) -> Result<DecoderOutputs> {
        let context = self.context(tape, store, inputs)?;
        let o = inputs.location.rows();
        let last_box = tape.constant(Tensor::row(inputs.location.row_slice(o - 1)));
        self.decoder.forward(tape, store, context, last_box)
    }

    pub fn predict(&self, store: &ParamStore, inputs: &SampleInputs) -> Result<PredictionBundle> {
        let tape = Tape::new();
        let out = self.forward(&tape, store, inputs)?;
        Ok(bundle_from(&tape, &out))
    }
}

pub fn bundle_from(tape: &Tape, out: &DecoderOutputs) -> PredictionBundle {
    let boxes = tape.value(out.boxes);
    PredictionBundle {
        future_boxes: (0..boxes.rows())
            .map(|r| {
                let s = boxes.row_slice(r);
                [s[0], s[1], s[2], s[3]]
            })
            .collect(),
        crossing_prob: tape.scalar(out.crossing_prob),
        cell_distribution: tape.value(out.cell_distribution).into_data(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_census_per_variant() {
        let base = ModelConfig::tiny();
        let mut counts = Vec::new();
        for saim in [SaimMode::Full, SaimMode::NoMotion, SaimMode::NoGlobalAttention, SaimMode::Off] {
            for decoder in [DecoderVariant::GatedHybrid, DecoderVariant::TaskBased, DecoderVariant::SharedOnly] {
                for encoder in [EncoderVariant::CrossModal, EncoderVariant::SharedTransformer] {
                    let mut c = base.clone();
                    c.saim.mode = saim;
                    c.decoder.variant = decoder;
                    c.encoder.variant = encoder;
                    let (_, store) = PedFormer::build(&c, 0).unwrap();
                    assert_eq!(store.num_scalars(), PedFormer::expected_params(&c));
                    counts.push(store.num_scalars());
                }
            }
        }
        counts.sort();
        counts.dedup();
        assert_eq!(counts.len(), 24);
    }

    #[test]
    fn saim_off_shrinks_context() {
        let mut c = ModelConfig::default();
        let full = c.context_dim();
        c.saim.mode = SaimMode::Off;
        assert_eq!(full - c.context_dim(), 128);
    }

    #[test]
    fn build_is_seeded() {
        let c = ModelConfig::tiny();
        let (_, a) = PedFormer::build(&c, 3).unwrap();
        let (_, b) = PedFormer::build(&c, 3).unwrap();
        let (_, d) = PedFormer::build(&c, 4).unwrap();
        let values = |s: &ParamStore| s.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect::<Vec<_>>();
        assert_eq!(values(&a), values(&b));
        assert_ne!(values(&a), values(&d));
    }
}
