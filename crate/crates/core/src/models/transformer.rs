//! Transformer encoder: multi-head self-attention, residual connections,
//! post-sublayer layer normalization and position-wise feed-forward layers.

use super::layers::Net;
use super::Normalization;
use crate::error::{Error, Result};
use crate::grad::{Graph, Tensor, Var};

/// Fixed sinusoidal position encodings, `[len, width]`.
pub(crate) fn positional_encoding(len: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * width);
    for pos in 0..len {
        for i in 0..width {
            let freq = 1.0 / 10000f64.powf((i - i % 2) as f64 / width as f64);
            let angle = pos as f64 * freq;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::raw(vec![len, width], data)
}

/// Self-attention over `x: [batch * len, width]` (rows batch-major).
///
/// Each head attends with `softmax(Q K^T / sqrt(d_k)) V` on its slice of the
/// projected queries, keys and values; the heads are concatenated and
/// projected by `wo` plus `bo`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &Graph,
    x: Var,
    batch: usize,
    heads: usize,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bo: Var,
) -> Result<Var> {
    let shape = g.shape(x);
    let (rows, width) = (shape[0], shape[1]);
    if heads == 0 || width % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("width {width} is not divisible by {heads} heads"),
        ));
    }
    if batch == 0 || rows % batch != 0 {
        return Err(Error::shape("attention", "rows are not a whole number of sequences"));
    }
    let len = rows / batch;
    let dk = width / heads;
    let (q, k, v) = (g.matmul(x, wq)?, g.matmul(x, wk)?, g.matmul(x, wv)?);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let split = |m: Var| -> Result<Var> {
            let part = g.slice_cols(m, h * dk, (h + 1) * dk)?;
            g.reshape(part, &[batch, len, dk])
        };
        let (qh, kh, vh) = (split(q)?, split(k)?, split(v)?);
        let scores = g.bmm(qh, g.transpose_last2(kh)?)?;
        let weights = g.softmax(g.scale(scores, 1.0 / (dk as f64).sqrt())?)?;
        let out = g.bmm(weights, vh)?;
        outs.push(g.reshape(out, &[rows, dk])?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    g.add(g.matmul(cat, wo)?, bo)
}

pub(crate) fn forward(net: &mut Net<'_, '_>, inputs: &Tensor) -> Result<Var> {
    let g = net.g;
    let hyper = &net.model.hyper;
    let &[b, l, d] = inputs.shape() else { unreachable!() };
    let m = hyper.d_model;
    let (heads, layers) = (hyper.heads, hyper.layers);
    let x = g.reshape(g.constant(inputs.clone()), &[b * l, d])?;
    let e = g.reshape(net.dense(x, "embed")?, &[b, l, m])?;
    let e = g.add(e, g.constant(positional_encoding(l, m)))?;
    let mut x = g.reshape(e, &[b * l, m])?;
    for layer in 0..layers {
        let p = |s: &str| net.param(&format!("l{layer}.{s}"));
        let att = multi_head_attention(g, x, b, heads, p("q"), p("k"), p("v"), p("o.w"), p("o.b"))?;
        let att = net.dropout(att)?;
        x = net.norm(g.add(x, att)?, &format!("l{layer}.ln1"), Normalization::Layer)?;
        let ff = g.relu(net.dense(x, &format!("l{layer}.ff1"))?)?;
        let ff = net.dense(ff, &format!("l{layer}.ff2"))?;
        let ff = net.dropout(ff)?;
        x = net.norm(g.add(x, ff)?, &format!("l{layer}.ln2"), Normalization::Layer)?;
    }
    let seqs = g.reshape(x, &[b, l * m])?;
    let last = g.slice_cols(seqs, (l - 1) * m, l * m)?;
    let last = net.dropout(last)?;
    net.dense(last, "head")
}
