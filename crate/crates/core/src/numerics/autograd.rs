//! Reverse-mode differentiation over a recorded operation graph.
//!
//! A [`Graph`] is built once per forward pass. Every op appends a node that
//! holds its output value plus whatever the backward rule needs; nodes whose
//! inputs are all constants skip gradient bookkeeping. [`Graph::backward`]
//! walks the nodes in reverse and returns vector-Jacobian products for every
//! node that requires a gradient.

use crate::error::{dim_err, Error, Result};

use super::kernels::{self, gemm, ConvGeometry};
use super::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
        cols: Vec<f64>,
    },
    ChannelNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    Silu(Var),
    Softmax(Var),
    AddChannel(Var, Var),
    ConcatChannels(Var, Var),
    Upsample2x(Var),
    BlockLeftMatMul(Var, Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation; single-writer, one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` required one and
    /// the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Zero-padded convolution; see [`kernels::conv2d`].
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let geo = kernels::conv_geometry(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
        )?;
        let (out, cols) = kernels::conv2d_raw(
            &geo,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(&geo.out_shape(), out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        // The patch matrix is only needed for the weight gradient.
        let cols = if self.requires_grad(weight) { cols } else { Vec::new() };
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
                cols,
            },
            rg,
        ))
    }

    pub fn channel_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        if h * w < 2 {
            return Err(dim_err!("channel_norm needs at least 2 spatial positions"));
        }
        let (out, inv_std) = kernels::channel_norm_raw(self.value(input).data(), c, h * w, eps);
        let out = Tensor::new(&[c, h, w], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::ChannelNorm { input, inv_std }, rg))
    }

    /// `x·sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * kernels::sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = kernels::softmax_lastdim(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Add `v[c]` to every element of channel `c` of `x` (C×…).
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.value(x);
        let c = xs.shape()[0];
        if self.value(v).numel() != c {
            return Err(dim_err!(
                "add_channel: {} values for {c} channels",
                self.value(v).numel()
            ));
        }
        let per = xs.numel() / c;
        let mut out = xs.clone();
        for (ch, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let b = self.nodes[v.0].value.data()[ch];
            chunk.iter_mut().for_each(|e| *e += b);
        }
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::AddChannel(x, v), rg))
    }

    /// Concatenate two C×H×W tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.value(a).dims3()?;
        let (cb, hb, wb) = self.value(b).dims3()?;
        if (ha, wa) != (hb, wb) {
            return Err(dim_err!("concat: spatial {ha}x{wa} vs {hb}x{wb}"));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::new(&[ca + cb, ha, wa], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatChannels(a, b), rg))
    }

    /// Nearest-neighbour ×2 upsampling of a C×H×W tensor.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + x] = src[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let out = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Upsample2x(a), rg))
    }

    /// Left-multiply every `q×s` row block of `b` ((m·q)×s) by `h` (p×q),
    /// giving (m·p)×s.
    pub fn block_left_matmul(&mut self, h: Var, b: Var) -> Result<Var> {
        let (p, q) = self.value(h).dims2()?;
        let (rows, s) = self.value(b).dims2()?;
        if rows % q != 0 {
            return Err(dim_err!("block_left_matmul: {rows} rows not divisible by {q}"));
        }
        let m = rows / q;
        let mut out = vec![0.0; m * p * s];
        let (hv, bv) = (self.value(h).data(), self.value(b).data());
        for blk in 0..m {
            gemm(
                p,
                q,
                s,
                hv,
                false,
                &bv[blk * q * s..(blk + 1) * q * s],
                false,
                &mut out[blk * p * s..(blk + 1) * p * s],
                0.0,
            );
        }
        let out = Tensor::new(&[m * p, s], out)?;
        let rg = self.rg(&[h, b]);
        Ok(self.push(out, Op::BlockLeftMatMul(h, b), rg))
    }

    /// Select rows of a 2-D table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {bad} out of range for {rows} rows")));
        }
        if ids.is_empty() {
            return Err(dim_err!("gather_rows needs at least one id"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::new(&[ids.len(), cols], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(dim_err!("backward needs a scalar loss, got {:?}", lv.shape()));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(g) if n.requires_grad => Some(Tensor::new(n.value.shape(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Small helper that adds `f(i)` to every element of v's gradient.
        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl Fn(usize) -> f64) {
            if !nodes[v.0].requires_grad {
                return;
            }
            let len = nodes[v.0].value.numel();
            let gb = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            for (i, e) in gb.iter_mut().enumerate() {
                *e += f(i);
            }
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, nodes, *a, |i| g[i]);
                acc(grads, nodes, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                acc(grads, nodes, *a, |i| g[i]);
                acc(grads, nodes, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(grads, nodes, *a, |i| g[i] * bv[i]);
                acc(grads, nodes, *b, |i| g[i] * av[i]);
            }
            Op::Scale(a, s) => acc(grads, nodes, *a, |i| g[i] * s),
            Op::Sum(a) => acc(grads, nodes, *a, |_| g[0]),
            Op::Mean(a) => {
                let n = nodes[a.0].value.numel() as f64;
                acc(grads, nodes, *a, |_| g[0] / n)
            }
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().expect("matrix");
                let n = nodes[b.0].value.shape()[1];
                if wants(*a) {
                    let gb = grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    gemm(m, n, k, g, false, nodes[b.0].value.data(), true, gb, 1.0);
                }
                if wants(*b) {
                    let gb = grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    gemm(k, m, n, nodes[a.0].value.data(), true, g, false, gb, 1.0);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = nodes[a.0].value.dims2().expect("matrix");
                // g is c×r
                acc(grads, nodes, *a, |i| {
                    let (row, col) = (i / c, i % c);
                    g[col * r + row]
                });
            }
            Op::Reshape(a) => acc(grads, nodes, *a, |i| g[i]),
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
                cols,
            } => {
                let [c_out, ho, wo] = geo.out_shape();
                let p = ho * wo;
                let kdim = geo.c_in * geo.kernel * geo.kernel;
                if let Some(b) = bias {
                    acc(grads, nodes, *b, |co| g[co * p..(co + 1) * p].iter().sum());
                }
                if wants(*weight) {
                    let gw = grads[weight.0].get_or_insert_with(|| vec![0.0; c_out * kdim]);
                    gemm(c_out, p, kdim, g, false, cols, true, gw, 1.0);
                }
                if wants(*input) {
                    let mut dcols = vec![0.0; kdim * p];
                    gemm(
                        kdim,
                        c_out,
                        p,
                        nodes[weight.0].value.data(),
                        true,
                        g,
                        false,
                        &mut dcols,
                        0.0,
                    );
                    let dx = if geo.kernel == 1 && geo.stride == 1 {
                        dcols
                    } else {
                        kernels::col2im(&dcols, (geo.c_in, geo.h, geo.w), geo.kernel, geo.stride)
                    };
                    acc(grads, nodes, *input, |i| dx[i]);
                }
            }
            Op::ChannelNorm { input, inv_std } => {
                let y = node.value.data();
                let c = inv_std.len();
                let hw = y.len() / c;
                let mut dx = vec![0.0; y.len()];
                for (ch, &inv) in inv_std.iter().enumerate() {
                    let r = ch * hw..(ch + 1) * hw;
                    let (gs, ys) = (&g[r.clone()], &y[r.clone()]);
                    let mg = gs.iter().sum::<f64>() / hw as f64;
                    let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                    for (d, (gi, yi)) in dx[r].iter_mut().zip(gs.iter().zip(ys)) {
                        *d = inv * (gi - mg - yi * mgy);
                    }
                }
                acc(grads, nodes, *input, |i| dx[i]);
            }
            Op::Silu(a) => {
                let x = nodes[a.0].value.data();
                acc(grads, nodes, *a, |i| {
                    let s = kernels::sigmoid(x[i]);
                    g[i] * s * (1.0 + x[i] * (1.0 - s))
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("rank >= 1");
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                acc(grads, nodes, *a, |i| dx[i]);
            }
            Op::AddChannel(x, v) => {
                acc(grads, nodes, *x, |i| g[i]);
                let c = nodes[v.0].value.numel();
                let per = g.len() / c;
                acc(grads, nodes, *v, |ch| g[ch * per..(ch + 1) * per].iter().sum());
            }
            Op::ConcatChannels(a, b) => {
                let na = nodes[a.0].value.numel();
                acc(grads, nodes, *a, |i| g[i]);
                acc(grads, nodes, *b, |i| g[na + i]);
            }
            Op::Upsample2x(a) => {
                let (_, h, w) = nodes[a.0].value.dims3().expect("rank 3");
                acc(grads, nodes, *a, |i| {
                    let (ch, rem) = (i / (h * w), i % (h * w));
                    let (y, x) = (rem / w, rem % w);
                    let base = ch * 4 * h * w;
                    let r0 = base + (2 * y) * 2 * w + 2 * x;
                    let r1 = r0 + 2 * w;
                    g[r0] + g[r0 + 1] + g[r1] + g[r1 + 1]
                });
            }
            Op::BlockLeftMatMul(h, b) => {
                let (p, q) = nodes[h.0].value.dims2().expect("matrix");
                let (rows, s) = nodes[b.0].value.dims2().expect("matrix");
                let m = rows / q;
                let hv = nodes[h.0].value.data();
                let bv = nodes[b.0].value.data();
                if wants(*h) {
                    let gh = grads[h.0].get_or_insert_with(|| vec![0.0; p * q]);
                    for blk in 0..m {
                        gemm(
                            p,
                            s,
                            q,
                            &g[blk * p * s..(blk + 1) * p * s],
                            false,
                            &bv[blk * q * s..(blk + 1) * q * s],
                            true,
                            gh,
                            1.0,
                        );
                    }
                }
                if wants(*b) {
                    let gb = grads[b.0].get_or_insert_with(|| vec![0.0; rows * s]);
                    for blk in 0..m {
                        gemm(
                            q,
                            p,
                            s,
                            hv,
                            true,
                            &g[blk * p * s..(blk + 1) * p * s],
                            false,
                            &mut gb[blk * q * s..(blk + 1) * q * s],
                            1.0,
                        );
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if wants(*table) {
                    let (rows, cols) = nodes[table.0].value.dims2().expect("matrix");
                    let gt = grads[table.0].get_or_insert_with(|| vec![0.0; rows * cols]);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            gt[id * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
        }
    }
}
