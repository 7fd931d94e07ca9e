//! Vanilla, gated and attention recurrent networks.
//!
//! Input projections for all time steps are computed with one matrix
//! product on the time-major input, then sliced per step.

use super::init::effective_norm;
use super::layers::{step, time_major, Net};
use super::Arch;
use crate::error::Result;
use crate::grad::{Tensor, Var};

/// Per-step internals of a recurrent forward pass.
#[derive(Clone, Debug, Default)]
pub struct RecurrentTrace {
    /// Hidden state after each step, `[batch, state]`.
    pub hidden: Vec<Var>,
    /// Cell state after each step (LSTM and GRU).
    pub cells: Vec<Var>,
    /// Attention weights over steps, `[batch, window]`.
    pub attention: Option<Var>,
    /// Attention-weighted encoder output, `[batch, state]`.
    pub context: Option<Var>,
}

pub(crate) fn forward(net: &mut Net<'_, '_>, inputs: &Tensor) -> Result<(Var, RecurrentTrace)> {
    let arch = net.model.arch;
    let mut trace = RecurrentTrace::default();
    let last = match arch {
        Arch::Rnn => {
            encode(net, inputs, &mut trace)?;
            *trace.hidden.last().unwrap()
        }
        Arch::RnnAttention => attend(net, inputs, &mut trace)?,
        Arch::Lstm | Arch::Gru => gated(net, inputs, &mut trace)?,
        _ => unreachable!("not a recurrent architecture"),
    };
    let last = net.dropout(last)?;
    Ok((net.dense(last, "head")?, trace))
}

/// `h_t = tanh(W h_{t-1} + U x_t + b)` from `h_0 = 0`.
fn encode(net: &mut Net<'_, '_>, inputs: &Tensor, trace: &mut RecurrentTrace) -> Result<()> {
    let g = net.g;
    let &[b, l, _] = inputs.shape() else { unreachable!() };
    let norm = effective_norm(net.model.arch, net.model.hyper.normalization);
    let xs = g.constant(time_major(inputs));
    let xu = g.matmul(xs, net.param("rnn.u"))?;
    let (w, bias) = (net.param("rnn.w"), net.param("rnn.b"));
    let mut h = g.constant(Tensor::zeros(&[b, net.model.hyper.state]));
    for t in 0..l {
        let pre = g.add(g.slice_rows(xu, t * b, (t + 1) * b)?, g.matmul(h, w)?)?;
        let pre = g.add(pre, bias)?;
        let pre = net.norm(pre, "rnn", norm)?;
        h = g.tanh(pre)?;
        trace.hidden.push(h);
    }
    Ok(())
}

/// Encoder over the window, then attention over its outputs queried by the
/// current input and the previous hidden state.
fn attend(net: &mut Net<'_, '_>, inputs: &Tensor, trace: &mut RecurrentTrace) -> Result<Var> {
    let g = net.g;
    let &[b, l, _] = inputs.shape() else { unreachable!() };
    encode(net, inputs, trace)?;
    let prev = if l >= 2 {
        trace.hidden[l - 2]
    } else {
        g.constant(Tensor::zeros(&[b, net.model.hyper.state]))
    };
    let x_now = g.constant(step(inputs, l - 1));
    let query = g.concat_cols(&[x_now, prev])?;
    let weights = g.softmax(net.dense(query, "attn")?)?;
    let mut z = None;
    for (t, &y) in trace.hidden.iter().enumerate() {
        let term = g.mul(g.slice_cols(weights, t, t + 1)?, y)?;
        z = Some(match z {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let z = z.unwrap();
    let c = g.matmul(g.concat_cols(&[z, prev])?, net.param("ctx.w"))?;
    let pre = g.add(g.matmul(c, net.param("out.w"))?, g.matmul(x_now, net.param("out.u"))?)?;
    let out = g.tanh(g.add(pre, net.param("out.b"))?)?;
    trace.attention = Some(weights);
    trace.context = Some(z);
    Ok(out)
}

/// LSTM (gates update, forget, output, reset) or GRU (update, reset).
fn gated(net: &mut Net<'_, '_>, inputs: &Tensor, trace: &mut RecurrentTrace) -> Result<Var> {
    let g = net.g;
    let arch = net.model.arch;
    let hyper = &net.model.hyper;
    let &[b, l, _] = inputs.shape() else { unreachable!() };
    let s = hyper.state;
    let lstm_tanh = hyper.lstm_tanh;
    let norm = effective_norm(arch, hyper.normalization);
    let xs = g.constant(time_major(inputs));
    let xg = g.matmul(xs, net.param("gates.wx"))?;
    let xc = g.matmul(xs, net.param("cand.wx"))?;
    let (wh, gb) = (net.param("gates.wh"), net.param("gates.b"));
    let (ch, cb) = (net.param("cand.wh"), net.param("cand.b"));
    let mut h = g.constant(Tensor::zeros(&[b, s]));
    let mut c = h;
    for t in 0..l {
        let rows = (t * b, (t + 1) * b);
        let pre = g.add(g.slice_rows(xg, rows.0, rows.1)?, g.matmul(h, wh)?)?;
        let gates = g.sigmoid(g.add(pre, gb)?)?;
        let update = g.slice_cols(gates, 0, s)?;
        let (reset, forget, output) = if arch == Arch::Lstm {
            (
                g.slice_cols(gates, 3 * s, 4 * s)?,
                Some(g.slice_cols(gates, s, 2 * s)?),
                Some(g.slice_cols(gates, 2 * s, 3 * s)?),
            )
        } else {
            (g.slice_cols(gates, s, 2 * s)?, None, None)
        };
        // candidate reads the reset-gated previous state
        let prev = if arch == Arch::Lstm { h } else { c };
        let cand = g.matmul(g.mul(reset, prev)?, ch)?;
        let cand = g.add(g.add(cand, g.slice_rows(xc, rows.0, rows.1)?)?, cb)?;
        let cand = net.norm(cand, "cand", norm)?;
        let cand = g.tanh(cand)?;
        let kept = match forget {
            Some(f) => g.mul(f, c)?,
            None => g.mul(g.one_minus(update)?, c)?,
        };
        c = g.add(g.mul(update, cand)?, kept)?;
        h = match output {
            Some(o) if lstm_tanh => g.mul(o, g.tanh(c)?)?,
            Some(o) => g.mul(o, c)?,
            None => c,
        };
        trace.cells.push(c);
        trace.hidden.push(h);
    }
    Ok(h)
}
