//! LSTM cell and sequence unrolling with backpropagation through time.
//!
//! Each gate's pre-activation is an affine map of the concatenation
//! `[x_t, z_{t-1}]`:
//!
//! ```text
//! i = σ(W_i·[x, z] + b_i)    f = σ(W_f·[x, z] + b_f)
//! o = σ(W_o·[x, z] + b_o)    g = tanh(W_c·[x, z] + b_c)
//! C_t = f ∘ C_{t-1} + i ∘ g
//! z_t = o ∘ tanh(C_t)
//! ```

use super::activation::sigmoid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gate weights `[Din + hidden, hidden]` and biases `[hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_input: Tensor,
    pub w_forget: Tensor,
    pub w_output: Tensor,
    pub w_candidate: Tensor,
    pub b_input: Tensor,
    pub b_forget: Tensor,
    pub b_output: Tensor,
    pub b_candidate: Tensor,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        let w = Tensor::zeros(&[input_dim + hidden, hidden]);
        let b = Tensor::zeros(&[hidden]);
        LstmParams {
            w_input: w.clone(),
            w_forget: w.clone(),
            w_output: w.clone(),
            w_candidate: w,
            b_input: b.clone(),
            b_forget: b.clone(),
            b_output: b.clone(),
            b_candidate: b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_input.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.shape()[0] - self.hidden()
    }

    /// Tensors in a fixed order, paired with their slot names.
    pub fn named(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("w_input", &self.w_input),
            ("w_forget", &self.w_forget),
            ("w_output", &self.w_output),
            ("w_candidate", &self.w_candidate),
            ("b_input", &self.b_input),
            ("b_forget", &self.b_forget),
            ("b_output", &self.b_output),
            ("b_candidate", &self.b_candidate),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 8] {
        [
            ("w_input", &mut self.w_input),
            ("w_forget", &mut self.w_forget),
            ("w_output", &mut self.w_output),
            ("w_candidate", &mut self.w_candidate),
            ("b_input", &mut self.b_input),
            ("b_forget", &mut self.b_forget),
            ("b_output", &mut self.b_output),
            ("b_candidate", &mut self.b_candidate),
        ]
    }

    fn validate(&self) -> Result<()> {
        let h = self.hidden();
        let rows = self.w_input.shape()[0];
        if rows <= h {
            return Err(Error::shape("LSTM weights have no input rows"));
        }
        for (name, t) in self.named() {
            let expected: &[usize] = if name.starts_with('w') { &[rows, h] } else { &[h] };
            if t.shape() != expected {
                return Err(Error::shape(format!(
                    "LSTM {name} has shape {:?}, expected {expected:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellState {
    pub cell: Tensor,
    pub output: Tensor,
}

impl LstmCellState {
    pub fn zeros(hidden: usize) -> Self {
        LstmCellState {
            cell: Tensor::zeros(&[hidden]),
            output: Tensor::zeros(&[hidden]),
        }
    }
}

/// Activations of one step kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmCellCache {
    concat: Vec<f64>,
    input_gate: Vec<f64>,
    forget_gate: Vec<f64>,
    output_gate: Vec<f64>,
    candidate: Vec<f64>,
    prev_cell: Vec<f64>,
    tanh_cell: Vec<f64>,
}

fn affine(concat: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let h = b.len();
    let mut out = b.data().to_vec();
    for (&x, row) in concat.iter().zip(w.data().chunks_exact(h)) {
        if x != 0.0 {
            out.iter_mut().zip(row).for_each(|(o, w)| *o += x * w);
        }
    }
    out
}

/// One LSTM step, returning the new state and the step's cache.
pub fn lstm_cell_forward(
    x: &Tensor,
    prev: &LstmCellState,
    params: &LstmParams,
) -> Result<(LstmCellState, LstmCellCache)> {
    params.validate()?;
    let h = params.hidden();
    let din = params.input_dim();
    if x.shape() != [din] {
        return Err(Error::shape(format!(
            "LSTM input must be [{din}], got {:?}",
            x.shape()
        )));
    }
    prev.cell.expect_shape(&[h])?;
    prev.output.expect_shape(&[h])?;

    let mut concat = Vec::with_capacity(din + h);
    concat.extend_from_slice(x.data());
    concat.extend_from_slice(prev.output.data());

    let input_gate: Vec<f64> = affine(&concat, &params.w_input, &params.b_input)
        .into_iter()
        .map(sigmoid)
        .collect();
    let forget_gate: Vec<f64> = affine(&concat, &params.w_forget, &params.b_forget)
        .into_iter()
        .map(sigmoid)
        .collect();
    let output_gate: Vec<f64> = affine(&concat, &params.w_output, &params.b_output)
        .into_iter()
        .map(sigmoid)
        .collect();
    let candidate: Vec<f64> = affine(&concat, &params.w_candidate, &params.b_candidate)
        .into_iter()
        .map(f64::tanh)
        .collect();

    let prev_cell = prev.cell.data().to_vec();
    let cell: Vec<f64> = (0..h)
        .map(|j| forget_gate[j] * prev_cell[j] + input_gate[j] * candidate[j])
        .collect();
    let tanh_cell: Vec<f64> = cell.iter().map(|c| c.tanh()).collect();
    let output: Vec<f64> = (0..h).map(|j| output_gate[j] * tanh_cell[j]).collect();

    Ok((
        LstmCellState {
            cell: Tensor::vector(cell),
            output: Tensor::vector(output),
        },
        LstmCellCache {
            concat,
            input_gate,
            forget_gate,
            output_gate,
            candidate,
            prev_cell,
            tanh_cell,
        },
    ))
}

pub fn lstm_cell_step(x: &Tensor, prev: &LstmCellState, params: &LstmParams) -> Result<LstmCellState> {
    lstm_cell_forward(x, prev, params).map(|(s, _)| s)
}

/// Backward through one step. Gradients are accumulated into `grads`;
/// returns `(d x, d prev output, d prev cell)`.
pub fn lstm_cell_backward(
    cache: &LstmCellCache,
    params: &LstmParams,
    d_output: &[f64],
    d_cell_next: &[f64],
    grads: &mut LstmParams,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let h = params.hidden();
    let din = params.input_dim();
    let mut da_i = vec![0.0; h];
    let mut da_f = vec![0.0; h];
    let mut da_o = vec![0.0; h];
    let mut da_g = vec![0.0; h];
    let mut d_prev_cell = vec![0.0; h];
    for j in 0..h {
        let (i, f, o, g) = (
            cache.input_gate[j],
            cache.forget_gate[j],
            cache.output_gate[j],
            cache.candidate[j],
        );
        let tc = cache.tanh_cell[j];
        let dc = d_output[j] * o * (1.0 - tc * tc) + d_cell_next[j];
        da_o[j] = d_output[j] * tc * o * (1.0 - o);
        da_i[j] = dc * g * i * (1.0 - i);
        da_f[j] = dc * cache.prev_cell[j] * f * (1.0 - f);
        da_g[j] = dc * i * (1.0 - g * g);
        d_prev_cell[j] = dc * f;
    }

    let mut d_concat = vec![0.0; din + h];
    for (da, w, gw, gb) in [
        (&da_i, &params.w_input, &mut grads.w_input, &mut grads.b_input),
        (&da_f, &params.w_forget, &mut grads.w_forget, &mut grads.b_forget),
        (&da_o, &params.w_output, &mut grads.w_output, &mut grads.b_output),
        (&da_g, &params.w_candidate, &mut grads.w_candidate, &mut grads.b_candidate),
    ] {
        gb.data_mut().iter_mut().zip(da.iter()).for_each(|(b, d)| *b += d);
        for (k, (wrow, grow)) in w
            .data()
            .chunks_exact(h)
            .zip(gw.data_mut().chunks_exact_mut(h))
            .enumerate()
        {
            let x = cache.concat[k];
            let mut acc = 0.0;
            for ((gv, &wv), &dv) in grow.iter_mut().zip(wrow).zip(da.iter()) {
                *gv += x * dv;
                acc += wv * dv;
            }
            d_concat[k] += acc;
        }
    }
    let d_prev_output = d_concat.split_off(din);
    (d_concat, d_prev_output, d_prev_cell)
}

/// Caches of every step of one unrolled sequence.
#[derive(Debug, Clone)]
pub struct LstmSequenceCache {
    steps: Vec<LstmCellCache>,
}

/// Runs the cell over `inputs` from a zero state; returns per-step outputs.
pub fn lstm_sequence(inputs: &[Tensor], params: &LstmParams) -> Result<(Vec<Tensor>, LstmSequenceCache)> {
    let mut state = LstmCellState::zeros(params.hidden());
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut steps = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (next, cache) = lstm_cell_forward(x, &state, params)?;
        outputs.push(next.output.clone());
        steps.push(cache);
        state = next;
    }
    Ok((outputs, LstmSequenceCache { steps }))
}

/// Backpropagation through time. `d_outputs[t]` is the loss gradient with
/// respect to the step-`t` output; returns parameter gradients and the
/// gradient for each input.
pub fn lstm_sequence_backward(
    cache: &LstmSequenceCache,
    params: &LstmParams,
    d_outputs: &[Tensor],
) -> Result<(LstmParams, Vec<Tensor>)> {
    if d_outputs.len() != cache.steps.len() {
        return Err(Error::shape(format!(
            "{} output gradients for {} steps",
            d_outputs.len(),
            cache.steps.len()
        )));
    }
    let h = params.hidden();
    let mut grads = LstmParams::zeros(params.input_dim(), h);
    let mut d_inputs = vec![Tensor::zeros(&[params.input_dim()]); cache.steps.len()];
    let mut d_out_next = vec![0.0; h];
    let mut d_cell_next = vec![0.0; h];
    for t in (0..cache.steps.len()).rev() {
        d_outputs[t].expect_shape(&[h])?;
        let d_out: Vec<f64> = d_outputs[t]
            .data()
            .iter()
            .zip(&d_out_next)
            .map(|(a, b)| a + b)
            .collect();
        let (dx, dh, dc) = lstm_cell_backward(&cache.steps[t], params, &d_out, &d_cell_next, &mut grads);
        d_inputs[t] = Tensor::vector(dx);
        d_out_next = dh;
        d_cell_next = dc;
    }
    Ok((grads, d_inputs))
}
