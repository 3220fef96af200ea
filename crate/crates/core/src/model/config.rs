use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// One transformer per modality, outputs concatenated.
    ModalityTransformers,
    /// Modalities concatenated and fed to a single transformer.
    SharedTransformer,
    /// Pair-wise cross-modal attention units fused by a transformer.
    CrossModal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Last,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaimMode {
    Off,
    NoGlobalAttention,
    NoMotion,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    TaskBased,
    SharedOnly,
    Hybrid,
    GatedHybrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryMode {
    /// Boxes are predicted directly.
    Absolute,
    /// Offsets from the last observed box.
    Delta,
}

/// Input modalities of the encoder, in the order their streams are built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Location,
    Velocity,
    DiscreteLocation,
    EgoMotion,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Location,
        Modality::Velocity,
        Modality::DiscreteLocation,
        Modality::EgoMotion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Location => "location",
            Modality::Velocity => "velocity",
            Modality::DiscreteLocation => "discrete_location",
            Modality::EgoMotion => "ego_motion",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub modalities: Vec<Modality>,
    pub d_embed: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_hidden: usize,
    /// Width the fused sequence is projected to; `None` keeps the fused width.
    pub model_width: Option<usize>,
    pub pooling: Pooling,
    pub scaled_attention: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::CrossModal,
            modalities: Modality::ALL.to_vec(),
            d_embed: 64,
            num_heads: 4,
            num_layers: 2,
            ffn_hidden: 128,
            model_width: Some(128),
            pooling: Pooling::Last,
            scaled_attention: false,
        }
    }
}

impl EncoderConfig {
    /// Width of one embedded stream with its positional encoding.
    pub fn stream_width(&self) -> usize {
        2 * self.d_embed
    }

    /// Width of the sequence entering the projection (or the transformer when unprojected).
    pub fn fused_width(&self) -> usize {
        let m = self.modalities.len();
        match self.variant {
            EncoderVariant::CrossModal => m * (m - 1) * self.d_embed + self.d_embed,
            EncoderVariant::SharedTransformer => m * self.stream_width() + self.d_embed,
            EncoderVariant::ModalityTransformers => m * self.stream_width(),
        }
    }

    /// Width of the transformer input, which is also the width of the pooled encoding
    /// for every variant except per-modality transformers.
    pub fn transformer_width(&self) -> usize {
        match self.variant {
            EncoderVariant::ModalityTransformers => self.stream_width(),
            _ => self.model_width.unwrap_or_else(|| self.fused_width()),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.variant {
            EncoderVariant::ModalityTransformers => self.model_width.unwrap_or_else(|| self.fused_width()),
            _ => self.transformer_width(),
        }
    }

    fn problems(&self, out: &mut Vec<String>) {
        let m = self.modalities.len();
        if m == 0 {
            out.push("encoder.modalities must not be empty".into());
        }
        if self.variant == EncoderVariant::CrossModal && m < 2 {
            out.push("encoder.modalities: cross-modal attention needs at least two modalities".into());
        }
        let mut sorted = self.modalities.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != m {
            out.push("encoder.modalities contains duplicates".into());
        }
        if self.d_embed == 0 {
            out.push("encoder.d_embed must be positive".into());
        }
        if self.num_heads == 0 || self.d_embed % self.num_heads != 0 {
            out.push(format!(
                "encoder.d_embed ({}) must be divisible by encoder.num_heads ({})",
                self.d_embed, self.num_heads
            ));
        }
        if self.num_layers == 0 {
            out.push("encoder.num_layers must be at least 1".into());
        }
        if self.ffn_hidden == 0 {
            out.push("encoder.ffn_hidden must be positive".into());
        }
        if self.model_width == Some(0) {
            out.push("encoder.model_width must be positive".into());
        }
        if m > 0 && self.num_heads > 0 && self.transformer_width() % self.num_heads != 0 {
            out.push(format!(
                "transformer width {} must be divisible by encoder.num_heads ({})",
                self.transformer_width(),
                self.num_heads
            ));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaimConfig {
    pub mode: SaimMode,
    /// `[height, width]` maps are resized to before patching.
    pub map_size: [usize; 2],
    pub patch_size: usize,
    pub patch_dim: usize,
    pub num_heads: usize,
    /// Number of stacked self-attention units over patches.
    pub depth: usize,
    pub recurrent_hidden: usize,
    pub query_dim: usize,
    pub output_dim: usize,
    pub positional_encoding: bool,
}

impl Default for SaimConfig {
    fn default() -> Self {
        Self {
            mode: SaimMode::Full,
            map_size: [216, 384],
            patch_size: 12,
            patch_dim: 64,
            num_heads: 4,
            depth: 1,
            recurrent_hidden: 128,
            query_dim: 64,
            output_dim: 128,
            positional_encoding: true,
        }
    }
}

impl SaimConfig {
    pub fn num_patches(&self) -> usize {
        (self.map_size[0] / self.patch_size) * (self.map_size[1] / self.patch_size)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 4
    }

    /// Width of ψ_int, zero when the module is off.
    pub fn encoding_dim(&self) -> usize {
        if self.mode == SaimMode::Off {
            0
        } else {
            self.output_dim
        }
    }

    fn problems(&self, out: &mut Vec<String>) {
        if self.mode == SaimMode::Off {
            return;
        }
        let [h, w] = self.map_size;
        if self.patch_size == 0 || h == 0 || w == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            out.push(format!(
                "saim.map_size {h}x{w} is not divisible by saim.patch_size {}",
                self.patch_size
            ));
        }
        if self.num_heads == 0 || self.patch_dim % self.num_heads != 0 {
            out.push(format!(
                "saim.patch_dim ({}) must be divisible by saim.num_heads ({})",
                self.patch_dim, self.num_heads
            ));
        }
        if self.depth == 0 {
            out.push("saim.depth must be at least 1".into());
        }
        for (name, v) in [
            ("saim.patch_dim", self.patch_dim),
            ("saim.recurrent_hidden", self.recurrent_hidden),
            ("saim.query_dim", self.query_dim),
            ("saim.output_dim", self.output_dim),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        if self.mode == SaimMode::NoMotion && self.query_dim != self.patch_dim {
            out.push("saim.query_dim must equal saim.patch_dim when the motion query is disabled".into());
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub variant: DecoderVariant,
    pub hidden: usize,
    pub trajectory_mode: TrajectoryMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            variant: DecoderVariant::GatedHybrid,
            hidden: 128,
            trajectory_mode: TrajectoryMode::Absolute,
        }
    }
}

/// Multiplicative scaling applied to raw features before embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputScale {
    pub velocity: f64,
    /// Per-component factors for `(s, v_x, v_z)`.
    pub ego: [f64; 3],
}

impl Default for InputScale {
    fn default() -> Self {
        Self {
            velocity: 30.0,
            ego: [0.02, 1.0, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub obs_len: usize,
    pub pred_len: usize,
    /// Number of discrete grid cells.
    pub num_cells: usize,
    pub encoder: EncoderConfig,
    pub saim: SaimConfig,
    pub decoder: DecoderConfig,
    pub input_scale: InputScale,
    /// L2 coefficient of recurrent kernels.
    pub l2_recurrent: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            obs_len: 15,
            pred_len: 30,
            num_cells: 576,
            encoder: EncoderConfig::default(),
            saim: SaimConfig::default(),
            decoder: DecoderConfig::default(),
            input_scale: InputScale::default(),
            l2_recurrent: 1e-4,
        }
    }
}

impl ModelConfig {
    /// Width of the per-step decoder context `ψ_cm ⊕ ψ_int ⊕ em`.
    pub fn context_dim(&self) -> usize {
        self.encoder.output_dim() + self.saim.encoding_dim() + 3
    }

    /// All problems found, one per line.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.obs_len == 0 {
            out.push("obs_len must be positive".into());
        }
        if self.pred_len == 0 {
            out.push("pred_len must be positive".into());
        }
        if self.num_cells == 0 {
            out.push("num_cells must be positive".into());
        }
        if self.decoder.hidden == 0 {
            out.push("decoder.hidden must be positive".into());
        }
        if !(self.l2_recurrent >= 0.0) {
            out.push("l2_recurrent must be non-negative".into());
        }
        self.encoder.problems(&mut out);
        self.saim.problems(&mut out);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// A small configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            obs_len: 4,
            pred_len: 3,
            num_cells: 12,
            encoder: EncoderConfig {
                d_embed: 8,
                num_heads: 2,
                num_layers: 2,
                ffn_hidden: 8,
                model_width: Some(8),
                ..EncoderConfig::default()
            },
            saim: SaimConfig {
                map_size: [24, 24],
                patch_size: 12,
                patch_dim: 8,
                num_heads: 2,
                recurrent_hidden: 8,
                query_dim: 8,
                output_dim: 8,
                ..SaimConfig::default()
            },
            decoder: DecoderConfig {
                hidden: 8,
                ..DecoderConfig::default()
            },
            ..Self::default()
        }
    }

    /// A desk-scale model on the full 576-cell grid: 64-wide transformer, 24×48 maps.
    pub fn compact(obs_len: usize, pred_len: usize) -> Self {
        Self {
            obs_len,
            pred_len,
            encoder: EncoderConfig {
                d_embed: 16,
                num_heads: 4,
                num_layers: 2,
                ffn_hidden: 64,
                model_width: Some(64),
                ..EncoderConfig::default()
            },
            saim: SaimConfig {
                map_size: [24, 48],
                patch_size: 12,
                patch_dim: 16,
                num_heads: 4,
                recurrent_hidden: 32,
                query_dim: 16,
                output_dim: 32,
                ..SaimConfig::default()
            },
            decoder: DecoderConfig {
                hidden: 32,
                ..DecoderConfig::default()
            },
            ..Self::default()
        }
    }
}
