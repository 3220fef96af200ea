use serde::{Deserialize, Serialize};

use super::Builder;
use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Elementwise squashing function of a recurrent unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Softsign,
}

impl Activation {
    pub fn apply(self, tape: &Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Softsign => tape.softsign(x),
        }
    }
}

/// Long short-term memory unit with gates ordered `[input, forget, candidate, output]`.
///
/// ```text
/// z   = x·W + h·U + b
/// c_t = σ(z_f) ⊙ c_{t−1} + σ(z_i) ⊙ cand(z_c)
/// h_t = σ(z_o) ⊙ act(c_t)
/// ```
#[derive(Clone, Debug)]
pub struct Lstm {
    pub kernel: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
    pub candidate: Activation,
    pub activation: Activation,
}

impl Lstm {
    /// Kernels carry `weight_decay`; the forget-gate bias starts at 1.
    pub fn new(
        b: &mut Builder,
        name: &str,
        input_dim: usize,
        hidden: usize,
        activation: Activation,
        weight_decay: f64,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        let kernel = s.glorot("kernel", input_dim, 4 * hidden, weight_decay)?;
        let recurrent = s.glorot("recurrent", hidden, 4 * hidden, weight_decay)?;
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        let bias = s.store.add(s.name("bias"), Tensor::row(&bias), 0.0)?;
        Ok(Self {
            kernel,
            recurrent,
            bias,
            input_dim,
            hidden,
            candidate: Activation::Tanh,
            activation,
        })
    }

    /// Replaces the candidate squashing function (tanh by default).
    pub fn with_candidate(mut self, candidate: Activation) -> Self {
        self.candidate = candidate;
        self
    }

    pub fn num_params(&self) -> usize {
        4 * self.hidden * (self.input_dim + self.hidden + 1)
    }

    /// Runs over the rows of `xs` (`T × input_dim`), returning `T × hidden`
    /// outputs in the original row order. With `reverse` the recurrence
    /// starts at the last row.
    pub fn run(&self, tape: &Tape, store: &ParamStore, xs: Var, reverse: bool) -> Result<Var> {
        Ok(self.run_with_cells(tape, store, xs, reverse)?.0)
    }

    /// Like [`Lstm::run`] but also returns the cell state after every step.
    pub fn run_with_cells(&self, tape: &Tape, store: &ParamStore, xs: Var, reverse: bool) -> Result<(Var, Vec<Var>)> {
        let steps = tape.shape(xs)[0];
        let h_dim = self.hidden;
        let kernel = tape.param(store, self.kernel);
        let recurrent = tape.param(store, self.recurrent);
        let bias = tape.param(store, self.bias);
        let projected = tape.linear(xs, kernel, Some(bias))?;

        let mut h = tape.constant(Tensor::zeros(&[1, h_dim]));
        let mut c = tape.constant(Tensor::zeros(&[1, h_dim]));
        let mut outputs = vec![h; steps];
        let mut cells = vec![c; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let z = tape.add(tape.row(projected, t)?, tape.matmul(h, recurrent)?)?;
            let gate = |k: usize| tape.narrow(z, 1, k * h_dim, h_dim);
            let i = tape.sigmoid(gate(0)?)?;
            let f = tape.sigmoid(gate(1)?)?;
            let candidate = self.candidate.apply(tape, gate(2)?)?;
            let o = tape.sigmoid(gate(3)?)?;
            c = tape.add(tape.mul(f, c)?, tape.mul(i, candidate)?)?;
            h = tape.mul(o, self.activation.apply(tape, c)?)?;
            outputs[t] = h;
            cells[t] = c;
        }
        Ok((tape.concat(&outputs, 0)?, cells))
    }

    /// Hidden state after the last step of a forward run.
    pub fn last_hidden(&self, tape: &Tape, store: &ParamStore, xs: Var) -> Result<Var> {
        let out = self.run(tape, store, xs, false)?;
        let steps = tape.shape(out)[0];
        tape.row(out, steps - 1)
    }
}

/// Forward and backward units whose outputs are concatenated per step.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new(
        b: &mut Builder,
        name: &str,
        input_dim: usize,
        hidden: usize,
        activation: Activation,
        weight_decay: f64,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            forward: Lstm::new(&mut s, "fwd", input_dim, hidden, activation, weight_decay)?,
            backward: Lstm::new(&mut s, "bwd", input_dim, hidden, activation, weight_decay)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.forward.num_params() + self.backward.num_params()
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    /// `T × 2·hidden`: forward outputs then backward outputs per step.
    pub fn run(&self, tape: &Tape, store: &ParamStore, xs: Var) -> Result<Var> {
        let f = self.forward.run(tape, store, xs, false)?;
        let b = self.backward.run(tape, store, xs, true)?;
        tape.concat(&[f, b], 1)
    }
}
