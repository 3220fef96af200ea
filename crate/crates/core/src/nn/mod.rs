//! Layers built on the tape: affine maps, embeddings, layer norm, recurrent
//! units, multi-head attention and the transformer encoder.

mod attention;
mod recurrent;

pub use attention::{positional_encoding, MultiHeadAttention, TransformerEncoder, TransformerLayer};
pub use recurrent::{Activation, BiLstm, Lstm};

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Creates named parameters under a dotted prefix.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        let prefix = self.name(name);
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, weight_decay: f64) -> Result<ParamId> {
        let full = self.name(name);
        self.store.add_glorot(self.rng, full, fan_in, fan_out, weight_decay)
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64, weight_decay: f64) -> Result<ParamId> {
        let full = self.name(name);
        self.store.add(full, Tensor::filled(shape, value), weight_decay)
    }
}

/// `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let mut s = b.scope(name);
        let weight = s.glorot("weight", in_dim, out_dim, 0.0)?;
        let bias = if bias {
            Some(s.filled("bias", &[1, out_dim], 0.0, 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Lookup table from class ids to rows.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(b: &mut Builder, name: &str, classes: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: b.scope(name).glorot("table", classes, dim, 0.0)?,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let t = tape.param(store, self.table);
        tape.gather_rows(t, ids)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            gain: s.filled("gain", &[1, dim], 1.0, 0.0)?,
            bias: s.filled("bias", &[1, dim], 0.0, 0.0)?,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        tape.layer_norm(x, tape.param(store, self.gain), tape.param(store, self.bias))
    }
}

#[cfg(test)]
pub(crate) fn test_builder_parts(seed: u64) -> (ParamStore, ChaCha8Rng) {
    use rand::SeedableRng;
    (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
}
