//! LSTM cell shared by the communication channels and the self-memory unit.
//!
//! Gate blocks are laid out as (input, forget, candidate, output) along the
//! `4H` axis. Weights are stored input-major (`D × 4H` and `H × 4H`) so a
//! batch of row vectors multiplies them directly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_input: Tensor,
    pub w_recurrent: Tensor,
    pub bias: Tensor,
}

/// Tape handles for a bound [`LstmParams`].
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_input: Var,
    pub w_recurrent: Var,
    pub bias: Var,
}

/// (hidden, cell) pair. Rank-1 for a single agent, `B × H` for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[hidden]),
            c: Tensor::zeros(&[hidden]),
        }
    }

    pub fn zeros_batch(rows: usize, hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[rows, hidden]),
            c: Tensor::zeros(&[rows, hidden]),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> StateVars {
        StateVars {
            h: tape.leaf(self.h.clone()),
            c: tape.leaf(self.c.clone()),
        }
    }
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_input: Tensor::zeros(&[input, 4 * hidden]),
            w_recurrent: Tensor::zeros(&[hidden, 4 * hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, forget-gate bias 1, other biases 0.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let w_input = Tensor::uniform(&[input, 4 * hidden], 1.0 / (input as f64).sqrt(), rng);
        let w_recurrent = Tensor::uniform(&[hidden, 4 * hidden], 1.0 / (hidden as f64).sqrt(), rng);
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmParams {
            w_input,
            w_recurrent,
            bias,
        }
    }

    pub fn input_width(&self) -> usize {
        self.w_input.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w_recurrent.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmVars {
        LstmVars {
            w_input: tape.leaf(self.w_input.clone()),
            w_recurrent: tape.leaf(self.w_recurrent.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_input, &self.w_recurrent, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_input, &mut self.w_recurrent, &mut self.bias]
    }

    /// Single-vector step without keeping the tape around.
    pub fn step(&self, x: &Tensor, state: &LstmState) -> Result<LstmState> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let row = |t: &Tensor| -> Result<Tensor> {
            let (_, n) = t.as_matrix()?;
            t.clone().reshape(vec![1, n])
        };
        let xv = tape.leaf(row(x)?);
        let s = StateVars {
            h: tape.leaf(row(&state.h)?),
            c: tape.leaf(row(&state.c)?),
        };
        let out = lstm_step(&mut tape, &p, xv, s)?;
        let h = self.hidden();
        Ok(LstmState {
            h: tape.value(out.h).clone().reshape(vec![h])?,
            c: tape.value(out.c).clone().reshape(vec![h])?,
        })
    }
}

fn check_step_shapes(
    tape: &Tape,
    p: &LstmVars,
    x: Var,
    state: StateVars,
) -> Result<(usize, usize)> {
    let d = tape.shape(p.w_input)[0];
    let hidden = tape.shape(p.w_recurrent)[0];
    let xs = tape.shape(x);
    if xs.len() != 2 || xs[1] != d {
        return Err(Error::dim("lstm_step input", xs, &[d]));
    }
    let rows = xs[0];
    for v in [state.h, state.c] {
        let s = tape.shape(v);
        if s != [rows, hidden] {
            return Err(Error::dim("lstm_step state", s, &[rows, hidden]));
        }
    }
    Ok((rows, hidden))
}

/// One LSTM step over a batch: `x` is `B × D`, the state is `B × H`.
///
/// The returned hidden state is both the unit's output and half of its
/// outgoing state.
pub fn lstm_step(tape: &mut Tape, p: &LstmVars, x: Var, state: StateVars) -> Result<StateVars> {
    let (_, hidden) = check_step_shapes(tape, p, x, state)?;
    let joined = tape.lstm_cell(x, state.h, state.c, p.w_input, p.w_recurrent, p.bias)?;
    let parts = tape.split(joined, &[hidden, hidden], 1)?;
    Ok(StateVars {
        h: parts[0],
        c: parts[1],
    })
}

/// The same step assembled from elementary tape operations. Slower than
/// [`lstm_step`]; kept as an independent reference for the fused cell.
pub fn lstm_step_composed(
    tape: &mut Tape,
    p: &LstmVars,
    x: Var,
    state: StateVars,
) -> Result<StateVars> {
    let (_, hidden) = check_step_shapes(tape, p, x, state)?;
    let from_input = tape.matmul(x, p.w_input)?;
    let from_state = tape.matmul(state.h, p.w_recurrent)?;
    let pre = tape.add(from_input, from_state)?;
    let pre = tape.add_bias(pre, p.bias)?;
    let gates = tape.split(pre, &[hidden; 4], 1)?;
    let i = tape.sigmoid(gates[0]);
    let f = tape.sigmoid(gates[1]);
    let g = tape.tanh(gates[2]);
    let o = tape.sigmoid(gates[3]);
    let kept = tape.mul(f, state.c)?;
    let written = tape.mul(i, g)?;
    let c = tape.add(kept, written)?;
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed)?;
    Ok(StateVars { h, c })
}
