//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Every primitive appends one node holding its output value and the ids of
//! its parents. Node ids are assigned in creation order, so the node list is
//! already a topological order and `backward` is a single reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, transpose, Tensor};
use crate::error::{Error, Result};

/// Epsilon inside the layer-norm denominator.
pub const LAYER_NORM_EPS: f64 = 1e-10;
/// Epsilon inside the batch-norm denominator.
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    TransposeLast2(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    BatchNorm { x: Var, inv_std: Vec<f64> },
    Conv2d { x: Var, kernel: Var, pad: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    AvgPool2d { x: Var, window: [usize; 2], stride: [usize; 2] },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | BatchMatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Conv2d { x, kernel, .. } => vec![*x, *kernel],
            ConcatCols(xs) => xs.clone(),
            Affine { x, .. }
            | SliceCols { x, .. }
            | SliceRows { x, .. }
            | LayerNorm { x, .. }
            | BatchNorm { x, .. }
            | MaxPool2d { x, .. }
            | AvgPool2d { x, .. } => vec![*x],
            Relu(x) | Tanh(x) | Sigmoid(x) | Softmax(x) | Reshape(x) | Transpose(x)
            | TransposeLast2(x) | Sum(x) | Mean(x) => vec![*x],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
    shapes: HashMap<usize, Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to a leaf; zeros when the root does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(&v.0) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes.get(&v.0).expect("not a differentiable leaf")),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.remove(&v.0) {
            Some(g) => g,
            None => Tensor::zeros(self.shapes.get(&v.0).expect("not a differentiable leaf")),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    // ----------------------------------------------------------------------
    // linear algebra

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (Some((m, k)), Some((k2, n))) = (av.dims2(), bv.dims2()) else {
            return Err(Error::shape("matmul", "operands must be matrices"));
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{m}x{k} times {k2}x{n}: inner extents differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, av.data(), bv.data(), &mut out);
        self.push(Tensor::raw(vec![m, n], out), Op::MatMul(a, b), "matmul")
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (&[ba, m, k], &[bb, k2, n]) = (av.shape(), bv.shape()) else {
            return Err(Error::shape("bmm", "operands must be rank 3"));
        };
        if ba != bb || k != k2 {
            return Err(Error::shape(
                "bmm",
                format!("{:?} times {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            gemm_acc(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(Tensor::raw(vec![ba, m, n], out), Op::BatchMatMul(a, b), "bmm")
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let Some((r, c)) = xv.dims2() else {
            return Err(Error::shape("transpose", "operand must be a matrix"));
        };
        let out = transpose(r, c, xv.data());
        self.push(Tensor::raw(vec![c, r], out), Op::Transpose(x), "transpose")
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose_last2(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let &[b, r, c] = xv.shape() else {
            return Err(Error::shape("transpose_last2", "operand must be rank 3"));
        };
        let mut out = Vec::with_capacity(b * r * c);
        for i in 0..b {
            out.extend(transpose(r, c, &xv.data()[i * r * c..(i + 1) * r * c]));
        }
        self.push(
            Tensor::raw(vec![b, c, r], out),
            Op::TransposeLast2(x),
            "transpose_last2",
        )
    }

    // ----------------------------------------------------------------------
    // elementwise

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    fn binary(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::raw(av.shape().to_vec(), data));
        }
        let bc = Broadcast::new(av.shape(), bv.shape())
            .ok_or_else(|| Error::shape(op, format!("{:?} vs {:?}", av.shape(), bv.shape())))?;
        let mut out = vec![0.0; bc.out.iter().product()];
        let (ad, bd) = (av.data(), bv.data());
        bc.for_each(|o, ia, ib| out[o] = f(ad[ia], bd[ib]));
        Ok(Tensor::raw(bc.out.clone(), out))
    }

    /// `scale * x + shift`
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale }, "affine")
    }

    pub fn scale(&self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| s * v);
        self.push(out, Op::Affine { x, scale: s }, "scale")
    }

    /// `1 - x`
    pub fn one_minus(&self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), "tanh")
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), "sigmoid")
    }

    /// Softmax along the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(Tensor::raw(xv.shape().to_vec(), out), Op::Softmax(x), "softmax")
    }

    // ----------------------------------------------------------------------
    // structural

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Empty("concat_cols of nothing".into()));
        }
        let vals: Vec<_> = xs.iter().map(|&x| self.value(x)).collect();
        let mut rows = None;
        let mut widths = Vec::with_capacity(xs.len());
        for v in &vals {
            let Some((r, c)) = v.dims2() else {
                return Err(Error::shape("concat_cols", "operands must be matrices"));
            };
            if *rows.get_or_insert(r) != r {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            widths.push(c);
        }
        let rows = rows.unwrap();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in vals.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            Tensor::raw(vec![rows, total], out),
            Op::ConcatCols(xs.to_vec()),
            "concat_cols",
        )
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let Some((r, c)) = xv.dims2() else {
            return Err(Error::shape("slice_cols", "operand must be a matrix"));
        };
        if start >= end || end > c {
            return Err(Error::shape(
                "slice_cols",
                format!("range {start}..{end} of {c} columns"),
            ));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for row in xv.data().chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        self.push(
            Tensor::raw(vec![r, w], out),
            Op::SliceCols { x, start },
            "slice_cols",
        )
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let Some((r, c)) = xv.dims2() else {
            return Err(Error::shape("slice_rows", "operand must be a matrix"));
        };
        if start >= end || end > r {
            return Err(Error::shape(
                "slice_rows",
                format!("range {start}..{end} of {r} rows"),
            ));
        }
        self.push(
            Tensor::raw(vec![end - start, c], xv.data()[start * c..end * c].to_vec()),
            Op::SliceRows { x, start },
            "slice_rows",
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} into {shape:?}", xv.shape()),
            ));
        }
        self.push(
            Tensor::raw(shape.to_vec(), xv.data().to_vec()),
            Op::Reshape(x),
            "reshape",
        )
    }

    // ----------------------------------------------------------------------
    // reductions and normalization

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.sum() / xv.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Mean squared difference between `pred` and `target`.
    pub fn mse(&self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape("mse", "prediction and target shapes differ"));
        }
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Standardizes each slice along the last axis to zero mean and unit
    /// (population) variance. A constant slice maps to zeros.
    pub fn layer_norm(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        if n < 2 {
            return Err(Error::shape("layer_norm", "feature axis needs length >= 2"));
        }
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            inv_std.push(standardize(row, 0, 1, n, LAYER_NORM_EPS));
        }
        self.push(
            Tensor::raw(xv.shape().to_vec(), out),
            Op::LayerNorm { x, inv_std },
            "layer_norm",
        )
    }

    /// Standardizes each column of a matrix using statistics over the rows.
    pub fn batch_norm(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let Some((r, c)) = xv.dims2() else {
            return Err(Error::shape("batch_norm", "operand must be a matrix"));
        };
        if r < 2 {
            return Err(Error::shape("batch_norm", "batch needs at least 2 rows"));
        }
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(c);
        for j in 0..c {
            inv_std.push(standardize(&mut out, j, c, r, BATCH_NORM_EPS));
        }
        self.push(
            Tensor::raw(vec![r, c], out),
            Op::BatchNorm { x, inv_std },
            "batch_norm",
        )
    }

    // ----------------------------------------------------------------------
    // convolution and pooling

    /// Cross-correlation of `x: [B, C, H, W]` with `kernel: [O, C, kh, kw]`,
    /// stride 1, zero padding `pad` on every border.
    pub fn conv2d(&self, x: Var, kernel: Var, pad: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let (&[b, c, h, w], &[o, c2, kh, kw]) = (xv.shape(), kv.shape()) else {
            return Err(Error::shape("conv2d", "input and kernel must be rank 4"));
        };
        if c != c2 {
            return Err(Error::shape("conv2d", format!("{c} input channels vs kernel {c2}")));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than input {h}x{w} (padding {pad})"),
            ));
        }
        let geo = ConvGeom { b, c, h, w, o, kh, kw, pad };
        let mut out = vec![0.0; b * o * geo.ho() * geo.wo()];
        geo.for_each_tap(|oi, xi, ki| out[oi] += xv.data()[xi] * kv.data()[ki]);
        self.push(
            Tensor::raw(vec![b, o, geo.ho(), geo.wo()], out),
            Op::Conv2d { x, kernel, pad },
            "conv2d",
        )
    }

    /// Max pooling over `window = [rows, cols]` patches of a `[B, C, H, W]`
    /// tensor. Ties go to the first cell in row-major order.
    pub fn max_pool2d(&self, x: Var, window: [usize; 2], stride: [usize; 2]) -> Result<Var> {
        let xv = self.value(x);
        let (geo, shape) = pool_geom(xv.shape(), window, stride, "max_pool2d")?;
        let mut out = Vec::with_capacity(shape.iter().product());
        let mut argmax = Vec::with_capacity(out.capacity());
        geo.for_each_window(|cells| {
            let mut best = cells[0];
            for &i in &cells[1..] {
                if xv.data()[i] > xv.data()[best] {
                    best = i;
                }
            }
            out.push(xv.data()[best]);
            argmax.push(best);
        });
        self.push(Tensor::raw(shape, out), Op::MaxPool2d { x, argmax }, "max_pool2d")
    }

    pub fn avg_pool2d(&self, x: Var, window: [usize; 2], stride: [usize; 2]) -> Result<Var> {
        let xv = self.value(x);
        let (geo, shape) = pool_geom(xv.shape(), window, stride, "avg_pool2d")?;
        let mut out = Vec::with_capacity(shape.iter().product());
        let area = (window[0] * window[1]) as f64;
        geo.for_each_window(|cells| {
            out.push(cells.iter().map(|&i| xv.data()[i]).sum::<f64>() / area);
        });
        self.push(
            Tensor::raw(shape, out),
            Op::AvgPool2d { x, window, stride },
            "avg_pool2d",
        )
    }

    // ----------------------------------------------------------------------
    // reverse sweep

    /// Propagates d(root)/d(node) back to every differentiable leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut shapes = HashMap::new();
        for (id, n) in nodes.iter().enumerate().take(root.0 + 1) {
            if n.requires_grad && matches!(n.op, Op::Leaf) {
                shapes.insert(id, n.value.shape().to_vec());
            }
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        let mut leaf_grads = HashMap::new();
        if nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::ones(root_value.shape()));
        }
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
                leaf_grads.insert(id, g);
                continue;
            }
            let mut sink = Sink {
                nodes: &nodes,
                grads: &mut grads,
            };
            propagate(&nodes, node, &g, &mut sink);
        }
        Ok(Gradients {
            grads: leaf_grads,
            shapes,
        })
    }
}

struct Sink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Tensor>],
}

impl Sink<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn add_with(&mut self, v: Var, f: impl FnOnce() -> Tensor) {
        if self.wants(v) {
            let g = f();
            self.add(v, g);
        }
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, sink: &mut Sink<'_>) {
    let val = |v: Var| nodes[v.0].value.clone();
    let y = &node.value;
    let gd = g.data();
    match &node.op {
        Op::Leaf => unreachable!(),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = av.dims2().unwrap();
            let n = bv.shape()[1];
            sink.add_with(*a, || {
                let mut ga = vec![0.0; m * k];
                gemm_nt_acc(m, n, k, gd, bv.data(), &mut ga);
                Tensor::raw(vec![m, k], ga)
            });
            sink.add_with(*b, || {
                let mut gb = vec![0.0; k * n];
                gemm_tn_acc(m, k, n, av.data(), gd, &mut gb);
                Tensor::raw(vec![k, n], gb)
            });
        }
        Op::BatchMatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = bv.shape()[2];
            sink.add_with(*a, || {
                let mut ga = vec![0.0; bs * m * k];
                for i in 0..bs {
                    gemm_nt_acc(
                        m,
                        n,
                        k,
                        &gd[i * m * n..(i + 1) * m * n],
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
                Tensor::raw(av.shape().to_vec(), ga)
            });
            sink.add_with(*b, || {
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    gemm_tn_acc(
                        m,
                        k,
                        n,
                        &av.data()[i * m * k..(i + 1) * m * k],
                        &gd[i * m * n..(i + 1) * m * n],
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
                Tensor::raw(bv.shape().to_vec(), gb)
            });
        }
        Op::Transpose(x) => {
            let (r, c) = y.dims2().unwrap();
            sink.add(*x, Tensor::raw(vec![c, r], transpose(r, c, gd)));
        }
        Op::TransposeLast2(x) => {
            let &[b, r, c] = y.shape() else { unreachable!() };
            let mut out = Vec::with_capacity(gd.len());
            for i in 0..b {
                out.extend(transpose(r, c, &gd[i * r * c..(i + 1) * r * c]));
            }
            sink.add(*x, Tensor::raw(vec![b, c, r], out));
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let (ash, bsh) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
            sink.add_with(*a, || reduce_to(g, &ash));
            sink.add_with(*b, || {
                let mut t = reduce_to(g, &bsh);
                if sign < 0.0 {
                    t.scale_in_place(-1.0);
                }
                t
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if av.shape() == bv.shape() {
                sink.add_with(*a, || {
                    let d = gd.iter().zip(bv.data()).map(|(g, b)| g * b).collect();
                    Tensor::raw(av.shape().to_vec(), d)
                });
                sink.add_with(*b, || {
                    let d = gd.iter().zip(av.data()).map(|(g, a)| g * a).collect();
                    Tensor::raw(bv.shape().to_vec(), d)
                });
            } else {
                let bc = Broadcast::new(av.shape(), bv.shape()).unwrap();
                sink.add_with(*a, || {
                    let mut ga = vec![0.0; av.len()];
                    bc.for_each(|o, ia, ib| ga[ia] += gd[o] * bv.data()[ib]);
                    Tensor::raw(av.shape().to_vec(), ga)
                });
                sink.add_with(*b, || {
                    let mut gb = vec![0.0; bv.len()];
                    bc.for_each(|o, ia, ib| gb[ib] += gd[o] * av.data()[ia]);
                    Tensor::raw(bv.shape().to_vec(), gb)
                });
            }
        }
        Op::Affine { x, scale } => sink.add(*x, g.map(|v| v * scale)),
        Op::Relu(x) => {
            let xv = val(*x);
            let d = gd
                .iter()
                .zip(xv.data())
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect();
            sink.add(*x, Tensor::raw(y.shape().to_vec(), d));
        }
        Op::Tanh(x) => {
            let d = gd.iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
            sink.add(*x, Tensor::raw(y.shape().to_vec(), d));
        }
        Op::Sigmoid(x) => {
            let d = gd.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
            sink.add(*x, Tensor::raw(y.shape().to_vec(), d));
        }
        Op::Softmax(x) => {
            let n = *y.shape().last().unwrap();
            let mut d = Vec::with_capacity(gd.len());
            for (gr, yr) in gd.chunks(n).zip(y.data().chunks(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                d.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
            }
            sink.add(*x, Tensor::raw(y.shape().to_vec(), d));
        }
        Op::ConcatCols(xs) => {
            let (rows, total) = y.dims2().unwrap();
            let mut offset = 0;
            for &x in xs {
                let w = nodes[x.0].value.shape()[1];
                sink.add_with(x, || {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    Tensor::raw(vec![rows, w], d)
                });
                offset += w;
            }
        }
        Op::SliceCols { x, start } => {
            let xv = val(*x);
            let (r, c) = xv.dims2().unwrap();
            let w = y.shape()[1];
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                d[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
            }
            sink.add(*x, Tensor::raw(vec![r, c], d));
        }
        Op::SliceRows { x, start } => {
            let xv = val(*x);
            let c = xv.shape()[1];
            let mut d = vec![0.0; xv.len()];
            d[start * c..start * c + gd.len()].copy_from_slice(gd);
            sink.add(*x, Tensor::raw(xv.shape().to_vec(), d));
        }
        Op::Reshape(x) => {
            let shape = nodes[x.0].value.shape().to_vec();
            sink.add(*x, Tensor::raw(shape, gd.to_vec()));
        }
        Op::Sum(x) => {
            let shape = nodes[x.0].value.shape().to_vec();
            sink.add(*x, Tensor::full(&shape, gd[0]));
        }
        Op::Mean(x) => {
            let xv = &nodes[x.0].value;
            sink.add(*x, Tensor::full(xv.shape(), gd[0] / xv.len() as f64));
        }
        Op::LayerNorm { x, inv_std } => {
            let n = *y.shape().last().unwrap();
            let mut d = Vec::with_capacity(gd.len());
            for ((gr, yr), &inv) in gd.chunks(n).zip(y.data().chunks(n)).zip(inv_std) {
                norm_backward(gr.iter().copied(), yr.iter().copied(), inv, n, &mut d);
            }
            sink.add(*x, Tensor::raw(y.shape().to_vec(), d));
        }
        Op::BatchNorm { x, inv_std } => {
            let (r, c) = y.dims2().unwrap();
            let mut d = vec![0.0; r * c];
            let mut col = Vec::with_capacity(r);
            for (j, &inv) in inv_std.iter().enumerate() {
                col.clear();
                norm_backward(
                    gd.iter().skip(j).step_by(c).copied(),
                    y.data().iter().skip(j).step_by(c).copied(),
                    inv,
                    r,
                    &mut col,
                );
                for (i, v) in col.iter().enumerate() {
                    d[i * c + j] = *v;
                }
            }
            sink.add(*x, Tensor::raw(vec![r, c], d));
        }
        Op::Conv2d { x, kernel, pad } => {
            let (xv, kv) = (val(*x), val(*kernel));
            let (xs, ks) = (xv.shape(), kv.shape());
            let geo = ConvGeom {
                b: xs[0],
                c: xs[1],
                h: xs[2],
                w: xs[3],
                o: ks[0],
                kh: ks[2],
                kw: ks[3],
                pad: *pad,
            };
            sink.add_with(*x, || {
                let mut gx = vec![0.0; xv.len()];
                geo.for_each_tap(|oi, xi, ki| gx[xi] += gd[oi] * kv.data()[ki]);
                Tensor::raw(xs.to_vec(), gx)
            });
            sink.add_with(*kernel, || {
                let mut gk = vec![0.0; kv.len()];
                geo.for_each_tap(|oi, xi, ki| gk[ki] += gd[oi] * xv.data()[xi]);
                Tensor::raw(ks.to_vec(), gk)
            });
        }
        Op::MaxPool2d { x, argmax } => {
            let xv = &nodes[x.0].value;
            let mut d = vec![0.0; xv.len()];
            for (&src, &gv) in argmax.iter().zip(gd) {
                d[src] += gv;
            }
            sink.add(*x, Tensor::raw(xv.shape().to_vec(), d));
        }
        Op::AvgPool2d { x, window, stride } => {
            let xv = &nodes[x.0].value;
            let (geo, _) = pool_geom(xv.shape(), *window, *stride, "avg_pool2d").unwrap();
            let mut d = vec![0.0; xv.len()];
            let area = (window[0] * window[1]) as f64;
            let mut k = 0;
            geo.for_each_window(|cells| {
                for &i in cells {
                    d[i] += gd[k] / area;
                }
                k += 1;
            });
            sink.add(*x, Tensor::raw(xv.shape().to_vec(), d));
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Standardizes `n` values `data[start + k * stride]` in place; returns
/// `1 / sqrt(var + eps)`.
fn standardize(data: &mut [f64], start: usize, stride: usize, n: usize, eps: f64) -> f64 {
    let idx = |k: usize| start + k * stride;
    let mean = (0..n).map(|k| data[idx(k)]).sum::<f64>() / n as f64;
    let var = (0..n).map(|k| (data[idx(k)] - mean).powi(2)).sum::<f64>() / n as f64;
    let inv = 1.0 / (var + eps).sqrt();
    for k in 0..n {
        data[idx(k)] = (data[idx(k)] - mean) * inv;
    }
    inv
}

/// dx = inv * (dy - mean(dy) - y * mean(dy * y)) for one normalized group.
fn norm_backward(
    g: impl Iterator<Item = f64> + Clone,
    y: impl Iterator<Item = f64> + Clone,
    inv: f64,
    n: usize,
    out: &mut Vec<f64>,
) {
    let nf = n as f64;
    let mean_g = g.clone().sum::<f64>() / nf;
    let mean_gy = g.clone().zip(y.clone()).map(|(g, y)| g * y).sum::<f64>() / nf;
    out.extend(g.zip(y).map(|(g, y)| inv * (g - mean_g - y * mean_gy)));
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let bc = Broadcast::new(g.shape(), shape).unwrap();
    let mut out = vec![0.0; shape.iter().product()];
    bc.for_each(|o, _, ib| out[ib] += g.data()[o]);
    Tensor::raw(shape.to_vec(), out)
}

/// Numpy-style broadcasting of two shapes.
struct Broadcast {
    out: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            out.push(match (x, y) {
                _ if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return None,
            });
        }
        let strides = |p: &[usize]| {
            let mut s = vec![0; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                s[d] = if p[d] == 1 && out[d] != 1 { 0 } else { acc };
                acc *= p[d];
            }
            s
        };
        let (sa, sb) = (strides(&pa), strides(&pb));
        Some(Broadcast { out, sa, sb })
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out.len();
        let last = self.out[rank - 1];
        let (la, lb) = (self.sa[rank - 1], self.sb[rank - 1]);
        let outer: usize = self.out[..rank - 1].iter().product();
        let mut idx = vec![0usize; rank - 1];
        let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
        for _ in 0..outer {
            for j in 0..last {
                f(o, oa + j * la, ob + j * lb);
                o += 1;
            }
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                oa += self.sa[d];
                ob += self.sb[d];
                if idx[d] < self.out[d] {
                    break;
                }
                oa -= self.sa[d] * self.out[d];
                ob -= self.sb[d] * self.out[d];
                idx[d] = 0;
            }
        }
    }
}

struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    pad: usize,
}

impl ConvGeom {
    fn ho(&self) -> usize {
        self.h + 2 * self.pad - self.kh + 1
    }

    fn wo(&self) -> usize {
        self.w + 2 * self.pad - self.kw + 1
    }

    /// Calls `f(out_index, input_index, kernel_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.ho(), self.wo());
        for bi in 0..self.b {
            for oc in 0..self.o {
                for i in 0..ho {
                    for j in 0..wo {
                        let oi = ((bi * self.o + oc) * ho + i) * wo + j;
                        for ic in 0..self.c {
                            for m in 0..self.kh {
                                let r = i + m;
                                if r < self.pad || r - self.pad >= self.h {
                                    continue;
                                }
                                let r = r - self.pad;
                                for n in 0..self.kw {
                                    let s = j + n;
                                    if s < self.pad || s - self.pad >= self.w {
                                        continue;
                                    }
                                    let s = s - self.pad;
                                    let xi = ((bi * self.c + ic) * self.h + r) * self.w + s;
                                    let ki = ((oc * self.c + ic) * self.kh + m) * self.kw + n;
                                    f(oi, xi, ki);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

struct PoolGeom {
    planes: usize,
    h: usize,
    w: usize,
    window: [usize; 2],
    stride: [usize; 2],
    ho: usize,
    wo: usize,
}

fn pool_geom(
    shape: &[usize],
    window: [usize; 2],
    stride: [usize; 2],
    op: &'static str,
) -> Result<(PoolGeom, Vec<usize>)> {
    let &[b, c, h, w] = shape else {
        return Err(Error::shape(op, "input must be rank 4"));
    };
    if window.contains(&0) || stride.contains(&0) || window[0] > h || window[1] > w {
        return Err(Error::shape(op, format!("window {window:?} over {h}x{w}")));
    }
    let ho = (h - window[0]) / stride[0] + 1;
    let wo = (w - window[1]) / stride[1] + 1;
    Ok((
        PoolGeom {
            planes: b * c,
            h,
            w,
            window,
            stride,
            ho,
            wo,
        },
        vec![b, c, ho, wo],
    ))
}

impl PoolGeom {
    /// Calls `f` with the flat input indices of each window, in output order.
    fn for_each_window(&self, mut f: impl FnMut(&[usize])) {
        let mut cells = Vec::with_capacity(self.window[0] * self.window[1]);
        for p in 0..self.planes {
            for i in 0..self.ho {
                for j in 0..self.wo {
                    cells.clear();
                    for m in 0..self.window[0] {
                        let r = i * self.stride[0] + m;
                        for n in 0..self.window[1] {
                            let s = j * self.stride[1] + n;
                            cells.push((p * self.h + r) * self.w + s);
                        }
                    }
                    f(&cells);
                }
            }
        }
    }
}
