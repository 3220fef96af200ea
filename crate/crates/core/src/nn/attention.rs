use super::{Builder, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Sinusoidal encoding: `PE(p, 2i) = sin(p / 10000^(2i/dim))`, `PE(p, 2i+1) = cos(·)`.
pub fn positional_encoding(length: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(length * dim);
    for p in 0..length {
        for j in 0..dim {
            let i2 = (j - j % 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / dim as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![length, dim], data).expect("positional encoding shape")
}

/// `(head_1 ⊕ … ⊕ head_k)·W_O` with `head_h = softmax(Q W_h^Q (K W_h^K)ᵀ) · V W_h^V`.
///
/// The logits are left unscaled unless `scaled` is set, in which case they are
/// divided by the square root of the head width.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub input_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub scaled: bool,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, name: &str, input_dim: usize, model_dim: usize, heads: usize, scaled: bool) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {model_dim} is not divisible by {heads} heads"
            )));
        }
        let mut s = b.scope(name);
        Ok(Self {
            query: s.glorot("query", input_dim, model_dim, 0.0)?,
            key: s.glorot("key", input_dim, model_dim, 0.0)?,
            value: s.glorot("value", input_dim, model_dim, 0.0)?,
            output: s.glorot("output", model_dim, model_dim, 0.0)?,
            input_dim,
            model_dim,
            heads,
            scaled,
        })
    }

    pub fn num_params(&self) -> usize {
        3 * self.input_dim * self.model_dim + self.model_dim * self.model_dim
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, q_in: Var, k_in: Var, v_in: Var) -> Result<Var> {
        let q = tape.matmul(q_in, tape.param(store, self.query))?;
        let k = tape.matmul(k_in, tape.param(store, self.key))?;
        let v = tape.matmul(v_in, tape.param(store, self.value))?;
        let head_dim = self.model_dim / self.heads;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.narrow(q, 1, h * head_dim, head_dim)?;
            let kh = tape.narrow(k, 1, h * head_dim, head_dim)?;
            let vh = tape.narrow(v, 1, h * head_dim, head_dim)?;
            let mut logits = tape.matmul(qh, tape.transpose(kh)?)?;
            if self.scaled {
                logits = tape.scale(logits, 1.0 / (head_dim as f64).sqrt())?;
            }
            let weights = tape.softmax(logits, 1)?;
            heads.push(tape.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        tape.matmul(joined, tape.param(store, self.output))
    }
}

/// `I' = Norm(I + Attn(I))`, `out = Norm(I' + FFN(I'))` with a rectified two-layer FFN.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
}

impl TransformerLayer {
    pub fn new(b: &mut Builder, name: &str, width: usize, heads: usize, ffn_hidden: usize, scaled: bool) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            attention: MultiHeadAttention::new(&mut s, "attention", width, width, heads, scaled)?,
            norm1: LayerNorm::new(&mut s, "norm1", width)?,
            ffn_in: Linear::new(&mut s, "ffn_in", width, ffn_hidden, true)?,
            ffn_out: Linear::new(&mut s, "ffn_out", ffn_hidden, width, true)?,
            norm2: LayerNorm::new(&mut s, "norm2", width)?,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let attended = self.attention.forward(tape, store, x, x, x)?;
        let x1 = self.norm1.forward(tape, store, tape.add(x, attended)?)?;
        let hidden = tape.relu(self.ffn_in.forward(tape, store, x1)?)?;
        let ff = self.ffn_out.forward(tape, store, hidden)?;
        self.norm2.forward(tape, store, tape.add(x1, ff)?)
    }

    pub fn num_params(&self) -> usize {
        let width = self.attention.model_dim;
        self.attention.num_params() + self.ffn_in.num_params() + self.ffn_out.num_params() + 4 * width
    }
}

/// Stack of identical transformer layers applied in sequence.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub layers: Vec<TransformerLayer>,
}

impl TransformerEncoder {
    pub fn new(
        b: &mut Builder,
        name: &str,
        width: usize,
        heads: usize,
        ffn_hidden: usize,
        num_layers: usize,
        scaled: bool,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Config("transformer needs at least one layer".into()));
        }
        let mut s = b.scope(name);
        let layers = (0..num_layers)
            .map(|l| TransformerLayer::new(&mut s, &format!("layer{l}"), width, heads, ffn_hidden, scaled))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(tape, store, x)?;
        }
        Ok(x)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }
}
