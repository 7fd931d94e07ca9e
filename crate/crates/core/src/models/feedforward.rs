//! OLS, multilayer perceptrons and convolutional networks.

use super::init::effective_norm;
use super::layers::{step, Net};
use super::{Arch, Hyper};
use crate::error::Result;
use crate::grad::{Tensor, Var};

fn last_step(net: &Net<'_, '_>, inputs: &Tensor) -> Var {
    net.g.constant(step(inputs, inputs.shape()[1] - 1))
}

/// `x' theta`, no intercept.
pub(crate) fn ols(net: &mut Net<'_, '_>, inputs: &Tensor) -> Result<Var> {
    let x = last_step(net, inputs);
    net.g.matmul(x, net.param("theta"))
}

/// Affine + ReLU hidden layers, affine scalar head.
pub(crate) fn mlp(net: &mut Net<'_, '_>, inputs: &Tensor) -> Result<Var> {
    let norm = effective_norm(Arch::Mlp, net.model.hyper.normalization);
    let mut h = last_step(net, inputs);
    for i in 0..net.model.hyper.hidden.len() {
        let prefix = format!("h{i}");
        let a = net.dense(h, &prefix)?;
        let a = net.norm(a, &prefix, norm)?;
        h = net.g.relu(a)?;
        h = net.dropout(h)?;
    }
    net.dense(h, "head")
}

/// Stem layer, then blocks `h + relu(W h + b)`, then the head.
pub(crate) fn mlp_residual(net: &mut Net<'_, '_>, inputs: &Tensor) -> Result<Var> {
    let norm = effective_norm(Arch::MlpResidual, net.model.hyper.normalization);
    let x = last_step(net, inputs);
    let a = net.dense(x, "stem")?;
    let a = net.norm(a, "stem", norm)?;
    let mut h = net.g.relu(a)?;
    for j in 0..net.model.hyper.residual_blocks {
        let prefix = format!("block{j}");
        let a = net.dense(h, &prefix)?;
        let a = net.norm(a, &prefix, norm)?;
        let inner = net.g.relu(a)?;
        let inner = net.dropout(inner)?;
        h = net.g.add(h, inner)?;
    }
    net.dense(h, "head")
}

fn pool_window(extent: usize, pool: usize) -> usize {
    pool.min(extent)
}

/// Spatial extents `(rows, cols)` after the convolutional trunk.
fn cnn_output_extent(arch: Arch, h: &Hyper) -> (usize, usize) {
    let (mut rows, mut cols) = (h.window, h.input_dim);
    let pools = if arch == Arch::Cnn { h.conv_channels.len() } else { 1 };
    for _ in 0..pools {
        rows /= pool_window(rows, h.pool);
        cols /= pool_window(cols, h.pool);
    }
    (rows, cols)
}

pub(crate) fn cnn_flat_width(arch: Arch, h: &Hyper) -> usize {
    let (rows, cols) = cnn_output_extent(arch, h);
    let channels = match arch {
        Arch::Cnn => *h.conv_channels.last().unwrap(),
        _ => h.conv_channels[0],
    };
    channels * rows * cols
}

/// The window as a one-channel image: `[batch, 1, window, dim]`.
fn image(net: &Net<'_, '_>, inputs: &Tensor) -> Result<Var> {
    let &[b, l, d] = inputs.shape() else { unreachable!() };
    net.g.reshape(net.g.constant(inputs.clone()), &[b, 1, l, d])
}

fn conv(net: &Net<'_, '_>, x: Var, kernel: &str, bias: &str) -> Result<Var> {
    let pad = net.model.hyper.kernel / 2;
    let y = net.g.conv2d(x, net.param(kernel), pad)?;
    net.g.add(y, net.param(bias))
}

fn pool(net: &Net<'_, '_>, x: Var) -> Result<Var> {
    let shape = net.g.shape(x);
    let p = net.model.hyper.pool;
    let win = [pool_window(shape[2], p), pool_window(shape[3], p)];
    net.g.max_pool2d(x, win, win)
}

fn flatten_head(net: &mut Net<'_, '_>, x: Var) -> Result<Var> {
    let shape = net.g.shape(x);
    let flat = net.g.reshape(x, &[shape[0], shape[1..].iter().product()])?;
    let flat = net.dropout(flat)?;
    net.dense(flat, "head")
}

/// Conv + ReLU + max-pool blocks over the window image, then an affine head.
pub(crate) fn cnn(net: &mut Net<'_, '_>, inputs: &Tensor) -> Result<Var> {
    let mut x = image(net, inputs)?;
    for i in 0..net.model.hyper.conv_channels.len() {
        let y = conv(net, x, &format!("conv{i}.k"), &format!("conv{i}.b"))?;
        x = pool(net, net.g.relu(y)?)?;
    }
    flatten_head(net, x)
}

/// Stem conv, residual blocks `x + conv(relu(conv(x)))`, one pool, head.
pub(crate) fn cnn_residual(net: &mut Net<'_, '_>, inputs: &Tensor) -> Result<Var> {
    let x = image(net, inputs)?;
    let mut x = net.g.relu(conv(net, x, "stem.k", "stem.b")?)?;
    for j in 0..net.model.hyper.cnn_residual_blocks {
        let inner = conv(net, x, &format!("block{j}.k1"), &format!("block{j}.b1"))?;
        let inner = net.g.relu(inner)?;
        let inner = conv(net, inner, &format!("block{j}.k2"), &format!("block{j}.b2"))?;
        x = net.g.add(x, inner)?;
    }
    let x = pool(net, x)?;
    flatten_head(net, x)
}
