use super::config::{EncoderConfig, EncoderVariant, Modality, Pooling};
use super::inputs::SampleInputs;
use crate::error::{Error, Result};
use crate::nn::{positional_encoding, Builder, Embedding, Linear, MultiHeadAttention, TransformerEncoder};
use crate::tensor::{ParamStore, Tape, Var};

enum StreamEmbed {
    Linear(Linear),
    Table(Embedding),
}

/// Encodes the observed non-scene modalities into ψ_cm.
pub struct CrossModalEncoder {
    pub config: EncoderConfig,
    embeds: Vec<(Modality, StreamEmbed)>,
    /// `(query modality, key/value modality, unit)` for every ordered pair.
    units: Vec<(usize, usize, MultiHeadAttention)>,
    projection: Option<Linear>,
    transformers: Vec<TransformerEncoder>,
}

impl CrossModalEncoder {
    pub fn new(b: &mut Builder, config: &EncoderConfig, num_cells: usize) -> Result<Self> {
        let mut s = b.scope("encoder");
        let d = config.d_embed;
        let mut embeds = Vec::new();
        for &m in &config.modalities {
            let name = format!("embed_{}", m.name());
            let e = match m {
                Modality::Location | Modality::Velocity => StreamEmbed::Linear(Linear::new(&mut s, &name, 4, d, true)?),
                Modality::EgoMotion => StreamEmbed::Linear(Linear::new(&mut s, &name, 3, d, true)?),
                Modality::DiscreteLocation => StreamEmbed::Table(Embedding::new(&mut s, &name, num_cells, d)?),
            };
            embeds.push((m, e));
        }
        let n = config.modalities.len();
        let mut units = Vec::new();
        if config.variant == EncoderVariant::CrossModal {
            for j in 0..n {
                for m in 0..n {
                    if j == m {
                        continue;
                    }
                    let name = format!("unit_{}_{}", config.modalities[j].name(), config.modalities[m].name());
                    let unit =
                        MultiHeadAttention::new(&mut s, &name, config.stream_width(), d, config.num_heads, config.scaled_attention)?;
                    units.push((j, m, unit));
                }
            }
        }
        let width = config.transformer_width();
        let mut transformers = Vec::new();
        let projection = match config.variant {
            EncoderVariant::ModalityTransformers => {
                for &m in &config.modalities {
                    transformers.push(TransformerEncoder::new(
                        &mut s,
                        &format!("transformer_{}", m.name()),
                        width,
                        config.num_heads,
                        config.ffn_hidden,
                        config.num_layers,
                        config.scaled_attention,
                    )?);
                }
                config
                    .model_width
                    .map(|w| Linear::new(&mut s, "projection", config.fused_width(), w, true))
                    .transpose()?
            }
            _ => {
                let p = config
                    .model_width
                    .map(|w| Linear::new(&mut s, "projection", config.fused_width(), w, true))
                    .transpose()?;
                transformers.push(TransformerEncoder::new(
                    &mut s,
                    "transformer",
                    width,
                    config.num_heads,
                    config.ffn_hidden,
                    config.num_layers,
                    config.scaled_attention,
                )?);
                p
            }
        };
        Ok(Self {
            config: config.clone(),
            embeds,
            units,
            projection,
            transformers,
        })
    }

    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    /// Closed-form parameter count.
    pub fn expected_params(config: &EncoderConfig, num_cells: usize) -> usize {
        let d = config.d_embed;
        let embeds: usize = config
            .modalities
            .iter()
            .map(|m| match m {
                Modality::Location | Modality::Velocity => 4 * d + d,
                Modality::EgoMotion => 3 * d + d,
                Modality::DiscreteLocation => num_cells * d,
            })
            .sum();
        let n = config.modalities.len();
        let units = if config.variant == EncoderVariant::CrossModal {
            n * (n - 1) * (3 * config.stream_width() * d + d * d)
        } else {
            0
        };
        let projection = config.model_width.map_or(0, |w| config.fused_width() * w + w);
        let w = config.transformer_width();
        let layer = 4 * w * w + (w * config.ffn_hidden + config.ffn_hidden) + (config.ffn_hidden * w + w) + 4 * w;
        let count = if config.variant == EncoderVariant::ModalityTransformers { n } else { 1 };
        embeds + units + projection + count * config.num_layers * layer
    }

    /// Embedded streams, each `o × 2·d_embed` with its positional encoding.
    pub fn streams(&self, tape: &Tape, store: &ParamStore, inputs: &SampleInputs) -> Result<Vec<Var>> {
        let o = inputs.location.rows();
        let pe = tape.constant(positional_encoding(o, self.config.d_embed));
        self.embeds
            .iter()
            .map(|(m, e)| {
                let x = match (m, e) {
                    (Modality::Location, StreamEmbed::Linear(l)) => l.forward(tape, store, tape.constant(inputs.location.clone()))?,
                    (Modality::Velocity, StreamEmbed::Linear(l)) => l.forward(tape, store, tape.constant(inputs.velocity.clone()))?,
                    (Modality::EgoMotion, StreamEmbed::Linear(l)) => l.forward(tape, store, tape.constant(inputs.ego_obs.clone()))?,
                    (Modality::DiscreteLocation, StreamEmbed::Table(t)) => t.forward(tape, store, &inputs.cells)?,
                    _ => unreachable!("embedding kind fixed at construction"),
                };
                tape.concat(&[x, pe], 1)
            })
            .collect()
    }

    /// Runs every cross-modal unit and concatenates the outputs per step.
    pub fn cross_attend_all(&self, tape: &Tape, store: &ParamStore, streams: &[Var]) -> Result<Var> {
        if streams.len() != self.config.modalities.len() {
            return Err(Error::Contract(format!(
                "expected {} streams, got {}",
                self.config.modalities.len(),
                streams.len()
            )));
        }
        let len = tape.shape(streams[0])[0];
        if let Some(bad) = streams.iter().find(|&&s| tape.shape(s)[0] != len) {
            return Err(Error::Contract(format!(
                "stream lengths differ: {len} and {}",
                tape.shape(*bad)[0]
            )));
        }
        let outs = self
            .units
            .iter()
            .map(|(j, m, unit)| unit.forward(tape, store, streams[*j], streams[*m], streams[*m]))
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&outs, 1)
    }

    /// Encodes a sample into a `1 × output_dim` row.
    pub fn encode(&self, tape: &Tape, store: &ParamStore, inputs: &SampleInputs) -> Result<Var> {
        let streams = self.streams(tape, store, inputs)?;
        self.encode_streams(tape, store, &streams)
    }

    pub fn encode_streams(&self, tape: &Tape, store: &ParamStore, streams: &[Var]) -> Result<Var> {
        let o = tape.shape(streams[0])[0];
        let pe = || tape.constant(positional_encoding(o, self.config.d_embed));
        let sequence = match self.config.variant {
            EncoderVariant::CrossModal => {
                let fused = self.cross_attend_all(tape, store, streams)?;
                let fused = tape.concat(&[fused, pe()], 1)?;
                let fused = self.project(tape, store, fused)?;
                self.transformers[0].forward(tape, store, fused)?
            }
            EncoderVariant::SharedTransformer => {
                let mut parts = streams.to_vec();
                parts.push(pe());
                let fused = self.project(tape, store, tape.concat(&parts, 1)?)?;
                self.transformers[0].forward(tape, store, fused)?
            }
            EncoderVariant::ModalityTransformers => {
                let outs = streams
                    .iter()
                    .zip(&self.transformers)
                    .map(|(&s, t)| t.forward(tape, store, s))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat(&outs, 1)?
            }
        };
        let pooled = match self.config.pooling {
            Pooling::Last => tape.row(sequence, o - 1)?,
            Pooling::Mean => tape.mean_rows(sequence)?,
        };
        if self.config.variant == EncoderVariant::ModalityTransformers {
            self.project(tape, store, pooled)
        } else {
            Ok(pooled)
        }
    }

    fn project(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match &self.projection {
            Some(p) => p.forward(tape, store, x),
            None => Ok(x),
        }
    }
}
