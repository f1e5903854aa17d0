//! Dense `f64` tensors and a tape-style reverse-mode autodiff graph.
//!
//! Feature maps use the layout `[C, D, H, W]`, row-major, channel slowest.
//! A [`Graph`] is an append-only list of nodes; every node's inputs precede
//! it, so a single reverse sweep in index order is a valid topological pass.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// One-dimensional tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RescaleDirection {
    Down,
    Up,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Act(Activation),
    Exp,
    Log,
    Abs,
    Square,
    Recip,
    /// `a * x + b`
    Linear(f64, f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Unary {
        input: Var,
        kind: Unary,
    },
    /// Elementwise; either side may be a single-element tensor broadcast
    /// against the other.
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Rescale {
        input: Var,
        direction: RescaleDirection,
        factor: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    BroadcastLatent {
        z: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Reduce {
        input: Var,
        op: ReduceOp,
    },
    Dot {
        a: Var,
        b: Var,
    },
    Norm {
        input: Var,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradient accumulators produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

fn conv_out_extent(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus for positive `y`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || ks.len() != 5 {
            return Err(Error::shape(format!(
                "conv3d expects input [C,D,H,W] and kernel [Co,Ci,k,k,k], got {:?} and {:?}",
                xs, ks
            )));
        }
        if ks[1] != xs[0] {
            return Err(Error::shape(format!(
                "conv3d kernel expects {} input channels, input has {}",
                ks[1], xs[0]
            )));
        }
        let k = ks[2];
        if ks[3] != k || ks[4] != k || k % 2 == 0 {
            return Err(Error::shape(format!(
                "conv3d kernel must be cubic with odd extent, got {:?}",
                &ks[2..]
            )));
        }
        if bs != [ks[0]] {
            return Err(Error::shape(format!(
                "conv3d bias must have shape [{}], got {:?}",
                ks[0], bs
            )));
        }
        let mut out_dims = [0usize; 3];
        for axis in 0..3 {
            out_dims[axis] = conv_out_extent(xs[axis + 1], k, stride, padding)
                .filter(|&e| e >= 1)
                .ok_or_else(|| {
                    Error::shape(format!(
                        "conv3d output extent along axis {} is empty (input {}, k {}, stride {}, padding {})",
                        axis,
                        xs[axis + 1],
                        k,
                        stride,
                        padding
                    ))
                })?;
        }
        let geom = ConvGeom {
            c_in: xs[0],
            c_out: ks[0],
            k,
            stride,
            padding,
            inp: [xs[1], xs[2], xs[3]],
            out: out_dims,
        };
        let value = conv3d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let rg = self.requires_grad(input) || self.requires_grad(kernel) || self.requires_grad(bias);
        let t = Tensor {
            shape: vec![geom.c_out, out_dims[0], out_dims[1], out_dims[2]],
            data: value,
        };
        Ok(self.push(
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            t,
            rg,
        ))
    }

    fn unary(&mut self, input: Var, kind: Unary) -> Var {
        let x = self.value(input);
        let data: Vec<f64> = x.data.iter().map(|&v| unary_forward(kind, v)).collect();
        let t = Tensor {
            shape: x.shape.clone(),
            data,
        };
        let rg = self.requires_grad(input);
        self.push(Op::Unary { input, kind }, t, rg)
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        self.unary(input, Unary::Act(kind))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Tanh)
    }

    pub fn softplus(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Softplus)
    }

    pub fn exp(&mut self, input: Var) -> Var {
        self.unary(input, Unary::Exp)
    }

    pub fn ln(&mut self, input: Var) -> Var {
        self.unary(input, Unary::Log)
    }

    pub fn abs(&mut self, input: Var) -> Var {
        self.unary(input, Unary::Abs)
    }

    pub fn square(&mut self, input: Var) -> Var {
        self.unary(input, Unary::Square)
    }

    pub fn recip(&mut self, input: Var) -> Var {
        self.unary(input, Unary::Recip)
    }

    /// `scale * x + shift`, elementwise.
    pub fn linear(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        self.unary(input, Unary::Linear(scale, shift))
    }

    pub fn scale(&mut self, input: Var, scale: f64) -> Var {
        self.linear(input, scale, 0.0)
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the bound is active.
    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Var {
        self.unary(input, Unary::Clamp(lo, hi))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape == tb.shape || tb.numel() == 1 {
            ta.shape.clone()
        } else if ta.numel() == 1 {
            tb.shape.clone()
        } else {
            return Err(Error::shape(format!(
                "elementwise {:?} on incompatible shapes {:?} and {:?}",
                kind, ta.shape, tb.shape
            )));
        };
        let n: usize = shape.iter().product();
        let (sa, sb) = (ta.numel() == 1, tb.numel() == 1);
        let data = (0..n)
            .map(|i| {
                let x = ta.data[if sa { 0 } else { i }];
                let y = tb.data[if sb { 0 } else { i }];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Binary { a, b, kind }, Tensor { shape, data }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    /// `weight · input + bias` for `weight: [m, n]`, `input: [n]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if w.shape.len() != 2 || w.shape[1] != x.numel() || b.shape != [w.shape[0]] {
            return Err(Error::shape(format!(
                "affine: weight {:?}, input {:?}, bias {:?} do not agree",
                w.shape, x.shape, b.shape
            )));
        }
        let (m, n) = (w.shape[0], w.shape[1]);
        let data = (0..m)
            .map(|r| {
                let row = &w.data[r * n..(r + 1) * n];
                b.data[r] + row.iter().zip(&x.data).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect();
        let rg = self.requires_grad(input) || self.requires_grad(weight) || self.requires_grad(bias);
        Ok(self.push(
            Op::Affine {
                input,
                weight,
                bias,
            },
            Tensor {
                shape: vec![m],
                data,
            },
            rg,
        ))
    }

    /// Average pooling (`Down`) or nearest-neighbour repetition (`Up`) over
    /// `factor³` blocks.
    pub fn rescale_spatial(
        &mut self,
        input: Var,
        direction: RescaleDirection,
        factor: usize,
    ) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape(format!(
                "rescale_spatial expects [C,D,H,W] and factor >= 1, got {:?} / {}",
                s, factor
            )));
        }
        let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
        let x = &self.value(input).data;
        let t = match direction {
            RescaleDirection::Down => {
                for (axis, e) in [d, h, w].into_iter().enumerate() {
                    if e % factor != 0 {
                        return Err(Error::shape(format!(
                            "rescale_spatial down: extent {} on axis {} not divisible by {}",
                            e, axis, factor
                        )));
                    }
                }
                let (od, oh, ow) = (d / factor, h / factor, w / factor);
                let inv = 1.0 / (factor * factor * factor) as f64;
                // Mean taken relative to each block's first voxel, so constant blocks pool exactly.
                let mut anchor = vec![0.0; c * od * oh * ow];
                for ch in 0..c {
                    for z in 0..od {
                        for y in 0..oh {
                            let src = &x[((ch * d + z * factor) * h + y * factor) * w..][..w];
                            let dst = &mut anchor[((ch * od + z) * oh + y) * ow..][..ow];
                            for (xx, v) in dst.iter_mut().enumerate() {
                                *v = src[xx * factor];
                            }
                        }
                    }
                }
                let mut dev = vec![0.0; anchor.len()];
                for ch in 0..c {
                    for z in 0..d {
                        for y in 0..h {
                            let src = &x[((ch * d + z) * h + y) * w..][..w];
                            let row = ((ch * od + z / factor) * oh + y / factor) * ow;
                            for (xx, v) in src.iter().enumerate() {
                                dev[row + xx / factor] += (v - anchor[row + xx / factor]) * inv;
                            }
                        }
                    }
                }
                let out = anchor.iter().zip(&dev).map(|(a, e)| a + e).collect();
                Tensor {
                    shape: vec![c, od, oh, ow],
                    data: out,
                }
            }
            RescaleDirection::Up => {
                let (od, oh, ow) = (d * factor, h * factor, w * factor);
                let mut out = vec![0.0; c * od * oh * ow];
                for ch in 0..c {
                    for z in 0..od {
                        for y in 0..oh {
                            let src = &x[((ch * d + z / factor) * h + y / factor) * w..][..w];
                            let dst = &mut out[((ch * od + z) * oh + y) * ow..][..ow];
                            for (xx, v) in dst.iter_mut().enumerate() {
                                *v = src[xx / factor];
                            }
                        }
                    }
                }
                Tensor {
                    shape: vec![c, od, oh, ow],
                    data: out,
                }
            }
        };
        let rg = self.requires_grad(input);
        Ok(self.push(
            Op::Rescale {
                input,
                direction,
                factor,
            },
            t,
            rg,
        ))
    }

    /// Stack along the leading (channel) axis; trailing extents must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != tb.shape.len() || ta.shape[1..] != tb.shape[1..] {
            return Err(Error::shape(format!(
                "concat_channels: spatial mismatch {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let mut shape = ta.shape.clone();
        shape[0] += tb.shape[0];
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        data.extend_from_slice(&ta.data);
        data.extend_from_slice(&tb.data);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Concat { a, b }, Tensor { shape, data }, rg))
    }

    /// Tile each coordinate of `z: [L]` over a `(D, H, W)` grid.
    pub fn broadcast_latent(&mut self, z: Var, spatial: [usize; 3]) -> Result<Var> {
        let tz = self.value(z);
        if tz.shape.len() != 1 {
            return Err(Error::shape(format!(
                "broadcast_latent expects a vector, got {:?}",
                tz.shape
            )));
        }
        let vol = spatial.iter().product::<usize>();
        let mut data = Vec::with_capacity(tz.numel() * vol);
        for &v in &tz.data {
            data.extend(std::iter::repeat_n(v, vol));
        }
        let shape = vec![tz.numel(), spatial[0], spatial[1], spatial[2]];
        let rg = self.requires_grad(z);
        Ok(self.push(Op::BroadcastLatent { z }, Tensor { shape, data }, rg))
    }

    /// `[C, D, H, W] -> [C]`, mean over the spatial axes.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        if t.shape.len() != 4 {
            return Err(Error::shape(format!(
                "global_avg_pool expects [C,D,H,W], got {:?}",
                t.shape
            )));
        }
        let c = t.shape[0];
        let vol = t.numel() / c.max(1);
        let data = t
            .data
            .chunks(vol.max(1))
            .take(c)
            .map(|ch| ch.iter().sum::<f64>() / vol as f64)
            .collect();
        let rg = self.requires_grad(input);
        Ok(self.push(
            Op::GlobalAvgPool { input },
            Tensor {
                shape: vec![c],
                data,
            },
            rg,
        ))
    }

    pub fn reduce(&mut self, input: Var, op: ReduceOp) -> Var {
        let t = self.value(input);
        let s: f64 = t.data.iter().sum();
        let v = match op {
            ReduceOp::Sum => s,
            ReduceOp::Mean => s / t.numel().max(1) as f64,
        };
        let rg = self.requires_grad(input);
        self.push(Op::Reduce { input, op }, Tensor::scalar(v), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        self.reduce(input, ReduceOp::Sum)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        self.reduce(input, ReduceOp::Mean)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::shape(format!(
                "dot on mismatched shapes {:?} and {:?}",
                ta.shape, tb.shape
            )));
        }
        let v = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).sum();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Dot { a, b }, Tensor::scalar(v), rg))
    }

    /// Euclidean norm. The gradient at the origin is taken as zero.
    pub fn norm(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let v = t.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rg = self.requires_grad(input);
        self.push(Op::Norm { input }, Tensor::scalar(v), rg)
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_shape = self.shape(root);
        if self.value(root).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar root, got shape {:?}",
                root_shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(root_shape, 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accum<F>(&self, grads: &mut [Option<Tensor>], v: Var, f: F)
    where
        F: FnOnce(&mut [f64]),
    {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let g = slot.get_or_insert_with(|| Tensor::zeros(&self.nodes[v.0].value.shape));
        f(&mut g.data);
    }

    fn propagate(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = &gout.data;
        match node.op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let xs = self.shape(input);
                let ks = self.shape(kernel);
                let geom = ConvGeom {
                    c_in: xs[0],
                    c_out: ks[0],
                    k: ks[2],
                    stride,
                    padding,
                    inp: [xs[1], xs[2], xs[3]],
                    out: [node.value.shape[1], node.value.shape[2], node.value.shape[3]],
                };
                let xv = &self.value(input).data;
                let kv = &self.value(kernel).data;
                self.accum(grads, input, |gi| conv3d_grad_input(&geom, kv, g, gi));
                self.accum(grads, kernel, |gk| conv3d_grad_kernel(&geom, xv, g, gk));
                self.accum(grads, bias, |gb| {
                    let vol = geom.out.iter().product::<usize>();
                    for (co, b) in gb.iter_mut().enumerate() {
                        *b += g[co * vol..(co + 1) * vol].iter().sum::<f64>();
                    }
                });
            }
            Op::Unary { input, kind } => {
                let x = &self.value(input).data;
                let y = &node.value.data;
                self.accum(grads, input, |gi| {
                    for i in 0..gi.len() {
                        gi[i] += g[i] * unary_derivative(kind, x[i], y[i]);
                    }
                });
            }
            Op::Binary { a, b, kind } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (sa, sb) = (ta.numel() == 1, tb.numel() == 1);
                let n = g.len();
                let xa = |i: usize| ta.data[if sa { 0 } else { i }];
                let xb = |i: usize| tb.data[if sb { 0 } else { i }];
                self.accum(grads, a, |ga| {
                    for i in 0..n {
                        let d = match kind {
                            Binary::Add | Binary::Sub => g[i],
                            Binary::Mul => g[i] * xb(i),
                            Binary::Div => g[i] / xb(i),
                        };
                        ga[if sa { 0 } else { i }] += d;
                    }
                });
                self.accum(grads, b, |gb| {
                    for i in 0..n {
                        let d = match kind {
                            Binary::Add => g[i],
                            Binary::Sub => -g[i],
                            Binary::Mul => g[i] * xa(i),
                            Binary::Div => -g[i] * xa(i) / (xb(i) * xb(i)),
                        };
                        gb[if sb { 0 } else { i }] += d;
                    }
                });
            }
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let x = &self.value(input).data;
                let w = &self.value(weight).data;
                let (m, n) = (g.len(), x.len());
                self.accum(grads, input, |gi| {
                    for r in 0..m {
                        let row = &w[r * n..(r + 1) * n];
                        for c in 0..n {
                            gi[c] += g[r] * row[c];
                        }
                    }
                });
                self.accum(grads, weight, |gw| {
                    for r in 0..m {
                        for c in 0..n {
                            gw[r * n + c] += g[r] * x[c];
                        }
                    }
                });
                self.accum(grads, bias, |gb| {
                    for r in 0..m {
                        gb[r] += g[r];
                    }
                });
            }
            Op::Rescale {
                input,
                direction,
                factor,
            } => {
                let s = self.shape(input);
                let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
                let os = &node.value.shape;
                let (od, oh, ow) = (os[1], os[2], os[3]);
                self.accum(grads, input, |gi| match direction {
                    RescaleDirection::Down => {
                        let inv = 1.0 / (factor * factor * factor) as f64;
                        for ch in 0..c {
                            for z in 0..d {
                                for y in 0..h {
                                    let src = &g[((ch * od + z / factor) * oh + y / factor) * ow..][..ow];
                                    let dst = &mut gi[((ch * d + z) * h + y) * w..][..w];
                                    for (xx, v) in dst.iter_mut().enumerate() {
                                        *v += src[xx / factor] * inv;
                                    }
                                }
                            }
                        }
                    }
                    RescaleDirection::Up => {
                        for ch in 0..c {
                            for z in 0..od {
                                for y in 0..oh {
                                    let src = &g[((ch * od + z) * oh + y) * ow..][..ow];
                                    let dst = &mut gi[((ch * d + z / factor) * h + y / factor) * w..][..w];
                                    for (xx, v) in src.iter().enumerate() {
                                        dst[xx / factor] += v;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { a, b } => {
                let na = self.value(a).numel();
                self.accum(grads, a, |ga| {
                    for (x, y) in ga.iter_mut().zip(&g[..na]) {
                        *x += y;
                    }
                });
                self.accum(grads, b, |gb| {
                    for (x, y) in gb.iter_mut().zip(&g[na..]) {
                        *x += y;
                    }
                });
            }
            Op::BroadcastLatent { z } => {
                let l = self.value(z).numel();
                let vol = g.len() / l.max(1);
                self.accum(grads, z, |gz| {
                    for (i, v) in gz.iter_mut().enumerate() {
                        *v += g[i * vol..(i + 1) * vol].iter().sum::<f64>();
                    }
                });
            }
            Op::GlobalAvgPool { input } => {
                let c = g.len();
                let vol = self.value(input).numel() / c.max(1);
                self.accum(grads, input, |gi| {
                    for ch in 0..c {
                        let share = g[ch] / vol as f64;
                        for v in &mut gi[ch * vol..(ch + 1) * vol] {
                            *v += share;
                        }
                    }
                });
            }
            Op::Reduce { input, op } => {
                let n = self.value(input).numel();
                let share = match op {
                    ReduceOp::Sum => g[0],
                    ReduceOp::Mean => g[0] / n.max(1) as f64,
                };
                self.accum(grads, input, |gi| {
                    for v in gi.iter_mut() {
                        *v += share;
                    }
                });
            }
            Op::Dot { a, b } => {
                let (xa, xb) = (&self.value(a).data, &self.value(b).data);
                self.accum(grads, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[0] * xb[i];
                    }
                });
                self.accum(grads, b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[0] * xa[i];
                    }
                });
            }
            Op::Norm { input } => {
                let r = node.value.data[0];
                let x = &self.value(input).data;
                self.accum(grads, input, |gi| {
                    if r > 0.0 {
                        for i in 0..gi.len() {
                            gi[i] += g[0] * x[i] / r;
                        }
                    }
                });
            }
        }
    }
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Act(Activation::Relu) => x.max(0.0),
        Unary::Act(Activation::Sigmoid) => sigmoid(x),
        Unary::Act(Activation::Tanh) => x.tanh(),
        Unary::Act(Activation::Softplus) => softplus(x),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::Recip => 1.0 / x,
        Unary::Linear(a, b) => a * x + b,
        Unary::Clamp(lo, hi) => x.clamp(lo, hi),
    }
}

fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Act(Activation::Relu) => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Act(Activation::Sigmoid) => y * (1.0 - y),
        Unary::Act(Activation::Tanh) => 1.0 - y * y,
        Unary::Act(Activation::Softplus) => sigmoid(x),
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
        Unary::Recip => -y * y,
        Unary::Linear(a, _) => a,
        Unary::Clamp(lo, hi) => {
            if x >= lo && x <= hi {
                1.0
            } else {
                0.0
            }
        }
    }
}

struct ConvGeom {
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    inp: [usize; 3],
    out: [usize; 3],
}

impl ConvGeom {
    /// Input coordinate hit by output `o` under kernel tap `t`, if in range.
    #[inline]
    fn src(&self, axis: usize, o: usize, t: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.padding as isize;
        (i >= 0 && (i as usize) < self.inp[axis]).then_some(i as usize)
    }

    /// For stride 1: output range along W whose source under tap `t` is valid.
    #[inline]
    fn w_range(&self, t: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(t);
        let hi = (self.inp[2] + self.padding)
            .saturating_sub(t)
            .min(self.out[2]);
        (lo, hi.max(lo))
    }

    fn kidx(&self, co: usize, ci: usize, a: usize, b: usize, c: usize) -> usize {
        (((co * self.c_in + ci) * self.k + a) * self.k + b) * self.k + c
    }
}

fn conv3d_forward(geom: &ConvGeom, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let [id, ih, iw] = geom.inp;
    let [od, oh, ow] = geom.out;
    let ovol = od * oh * ow;
    let mut out = vec![0.0; geom.c_out * ovol];
    for co in 0..geom.c_out {
        let out_c = &mut out[co * ovol..(co + 1) * ovol];
        out_c.fill(bias[co]);
        for ci in 0..geom.c_in {
            let x_c = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
            for a in 0..geom.k {
                for b in 0..geom.k {
                    for c in 0..geom.k {
                        let wv = kernel[geom.kidx(co, ci, a, b, c)];
                        if wv == 0.0 {
                            continue;
                        }
                        for z in 0..od {
                            let Some(sz) = geom.src(0, z, a) else { continue };
                            for y in 0..oh {
                                let Some(sy) = geom.src(1, y, b) else { continue };
                                let row_in = &x_c[(sz * ih + sy) * iw..][..iw];
                                let row_out = &mut out_c[(z * oh + y) * ow..][..ow];
                                if geom.stride == 1 {
                                    let (lo, hi) = geom.w_range(c);
                                    let off = lo + c - geom.padding;
                                    for (o, i) in row_out[lo..hi].iter_mut().zip(&row_in[off..]) {
                                        *o += wv * i;
                                    }
                                } else {
                                    for (xo, o) in row_out.iter_mut().enumerate() {
                                        if let Some(sx) = geom.src(2, xo, c) {
                                            *o += wv * row_in[sx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3d_grad_input(geom: &ConvGeom, kernel: &[f64], gout: &[f64], gin: &mut [f64]) {
    let [id, ih, iw] = geom.inp;
    let [od, oh, ow] = geom.out;
    let ovol = od * oh * ow;
    for co in 0..geom.c_out {
        let g_c = &gout[co * ovol..(co + 1) * ovol];
        for ci in 0..geom.c_in {
            let gi_c = &mut gin[ci * id * ih * iw..(ci + 1) * id * ih * iw];
            for a in 0..geom.k {
                for b in 0..geom.k {
                    for c in 0..geom.k {
                        let wv = kernel[geom.kidx(co, ci, a, b, c)];
                        if wv == 0.0 {
                            continue;
                        }
                        for z in 0..od {
                            let Some(sz) = geom.src(0, z, a) else { continue };
                            for y in 0..oh {
                                let Some(sy) = geom.src(1, y, b) else { continue };
                                let row_g = &g_c[(z * oh + y) * ow..][..ow];
                                let row_i = &mut gi_c[(sz * ih + sy) * iw..][..iw];
                                if geom.stride == 1 {
                                    let (lo, hi) = geom.w_range(c);
                                    let off = lo + c - geom.padding;
                                    for (i, o) in row_i[off..].iter_mut().zip(&row_g[lo..hi]) {
                                        *i += wv * o;
                                    }
                                } else {
                                    for (xo, o) in row_g.iter().enumerate() {
                                        if let Some(sx) = geom.src(2, xo, c) {
                                            row_i[sx] += wv * o;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3d_grad_kernel(geom: &ConvGeom, x: &[f64], gout: &[f64], gk: &mut [f64]) {
    let [id, ih, iw] = geom.inp;
    let [od, oh, ow] = geom.out;
    let ovol = od * oh * ow;
    for co in 0..geom.c_out {
        let g_c = &gout[co * ovol..(co + 1) * ovol];
        for ci in 0..geom.c_in {
            let x_c = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
            for a in 0..geom.k {
                for b in 0..geom.k {
                    for c in 0..geom.k {
                        let mut acc = 0.0;
                        for z in 0..od {
                            let Some(sz) = geom.src(0, z, a) else { continue };
                            for y in 0..oh {
                                let Some(sy) = geom.src(1, y, b) else { continue };
                                let row_g = &g_c[(z * oh + y) * ow..][..ow];
                                let row_in = &x_c[(sz * ih + sy) * iw..][..iw];
                                if geom.stride == 1 {
                                    let (lo, hi) = geom.w_range(c);
                                    let off = lo + c - geom.padding;
                                    acc += row_g[lo..hi]
                                        .iter()
                                        .zip(&row_in[off..])
                                        .map(|(p, q)| p * q)
                                        .sum::<f64>();
                                } else {
                                    for (xo, o) in row_g.iter().enumerate() {
                                        if let Some(sx) = geom.src(2, xo, c) {
                                            acc += o * row_in[sx];
                                        }
                                    }
                                }
                            }
                        }
                        gk[geom.kidx(co, ci, a, b, c)] += acc;
                    }
                }
            }
        }
    }
}

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
    /// Number of scalar coordinates compared.
    pub checked: usize,
}

/// Denominator floor for relative errors, so coordinates whose true
/// gradient is zero are judged on absolute error instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub const GRAD_CHECK_STEP: f64 = 1e-5;

impl GradCheckReport {
    pub fn compare(analytic: &[f64], numeric: &[f64], tol: f64) -> Self {
        let max_rel_error = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR))
            .fold(0.0, f64::max);
        GradCheckReport {
            max_rel_error,
            tol,
            passed: max_rel_error < tol && analytic.len() == numeric.len(),
            checked: analytic.len(),
        }
    }
}

/// Analytic gradients of a scalar function of several tensors.
pub fn analytic_gradients<F>(f: &F, points: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;
    Ok(vars
        .iter()
        .zip(points)
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect())
}

/// Central finite differences of a scalar function of several tensors.
pub fn numeric_gradients<F>(f: &F, points: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };
    let mut work = points.to_vec();
    let mut out = Vec::with_capacity(points.len());
    for t in 0..points.len() {
        let mut grad = Tensor::zeros(points[t].shape());
        for i in 0..points[t].numel() {
            let orig = work[t].data[i];
            work[t].data[i] = orig + h;
            let fp = eval(&work)?;
            work[t].data[i] = orig - h;
            let fm = eval(&work)?;
            work[t].data[i] = orig;
            grad.data[i] = (fp - fm) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compare backward gradients against central differences (`h = 1e-5`).
pub fn grad_check_many<F>(f: F, points: &[Tensor], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, points)?;
    let numeric = numeric_gradients(&f, points, GRAD_CHECK_STEP)?;
    let a: Vec<f64> = analytic.iter().flat_map(|t| t.data.iter().copied()).collect();
    let n: Vec<f64> = numeric.iter().flat_map(|t| t.data.iter().copied()).collect();
    Ok(GradCheckReport::compare(&a, &n, tol))
}

pub fn grad_check<F>(f: F, point: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(point), tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn tensor_rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn sigmoid_at_zero_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn relu_of_negative_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-0.5, -3.0, -1e-9]));
        let y = g.relu(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softplus_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(5.0));
        let y = g.softplus(x);
        let expected = (1.0 + 5f64.exp()).ln();
        assert!(close(g.value(y).item(), expected, 1e-14));
    }

    #[test]
    fn square_backward() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn reduce_sum_and_mean() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2, 2], 1.0));
        let s = g.sum(x);
        let m = g.mean(x);
        assert_eq!(g.value(s).item(), 4.0);
        assert_eq!(g.value(m).item(), 1.0);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn affine_identity_and_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.5, -2.0]));
        let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zero = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.affine(x, eye, zero).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, -2.0]);

        let x0 = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let w = g.constant(Tensor::new(vec![2, 2], vec![0.3, -0.1, 2.0, 4.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.7, -0.2]));
        let y0 = g.affine(x0, w, b).unwrap();
        assert_eq!(g.value(y0).data(), &[0.7, -0.2]);
    }

    #[test]
    fn affine_two_by_two_by_hand() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.25, -1.5]));
        let w = g.constant(Tensor::new(vec![2, 2], vec![0.5, 2.0, -3.0, 0.125]).unwrap());
        let b = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let y = g.affine(x, w, b).unwrap();
        // [0.5*0.25 + 2*(-1.5) + 1, -3*0.25 + 0.125*(-1.5)]
        assert_eq!(g.value(y).data(), &[-1.875, -0.9375]);
    }

    #[test]
    fn affine_dimension_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.affine(x, w, b), Err(Error::Shape(_))));
    }

    #[test]
    fn rescale_mean_of_block() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap());
        let y = g.rescale_spatial(x, RescaleDirection::Down, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 4.5);
    }

    #[test]
    fn rescale_down_up_constant_is_identity() {
        let mut g = Graph::new();
        let c = Tensor::full(&[2, 4, 4, 4], 1.75);
        let x = g.constant(c.clone());
        let d = g.rescale_spatial(x, RescaleDirection::Down, 2).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v == 1.75));
        let u = g.rescale_spatial(d, RescaleDirection::Up, 2).unwrap();
        assert_eq!(g.value(u), &c);
    }

    #[test]
    fn rescale_indivisible_is_shape_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(matches!(
            g.rescale_spatial(x, RescaleDirection::Down, 2),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn concat_shapes_and_gradient_routing() {
        let mut g = Graph::new();
        let a = g.param(Tensor::full(&[1, 2, 2, 2], 1.0));
        let b = g.param(Tensor::full(&[1, 2, 2, 2], 2.0));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 2, 2]);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(grads.get(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_with_zero_channels_is_identity() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![1, 1, 1, 2], vec![3.0, 4.0]).unwrap();
        let a = g.constant(x.clone());
        let e = g.constant(Tensor::zeros(&[0, 1, 1, 2]));
        let c = g.concat_channels(a, e).unwrap();
        assert_eq!(g.value(c), &x);
    }

    #[test]
    fn concat_spatial_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1, 2, 2, 4]));
        assert!(matches!(g.concat_channels(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn broadcast_latent_values_and_gradient() {
        let mut g = Graph::new();
        let z = g.param(Tensor::vector(vec![3.0]));
        let b = g.broadcast_latent(z, [1, 1, 2]).unwrap();
        assert_eq!(g.value(b).data(), &[3.0, 3.0]);

        let z6 = g.param(Tensor::vector(vec![0.5; 6]));
        let b6 = g.broadcast_latent(z6, [4, 4, 4]).unwrap();
        assert_eq!(g.shape(b6), &[6, 4, 4, 4]);

        let mut g = Graph::new();
        let z = g.param(Tensor::vector(vec![1.0, -2.0]));
        let b = g.broadcast_latent(z, [2, 3, 4]).unwrap();
        // mean over L·V entries: d/dz_l = V / (L·V) = 1/L
        let m = g.mean(b);
        let grads = g.backward(m).unwrap();
        for &v in grads.get(z).unwrap().data() {
            assert!(close(v, 0.5, 1e-15));
        }
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 3, 3]));
        let k = g.constant(Tensor::full(&[3, 2, 3, 3, 3], 0.37));
        let b = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let y = g.conv3d(x, k, b, 1, 1).unwrap();
        let t = g.value(y);
        assert_eq!(t.shape(), &[3, 3, 3, 3]);
        for (co, chunk) in t.data().chunks(27).enumerate() {
            assert!(chunk.iter().all(|&v| v == [1.0, -2.0, 0.5][co]));
        }
    }

    #[test]
    fn conv_unit_kernel_sums_channels() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = g.constant(Tensor::new(vec![2, 2, 2, 2], data.clone()).unwrap());
        let k = g.constant(Tensor::full(&[1, 2, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::vector(vec![0.0]));
        let y = g.conv3d(x, k, b, 1, 0).unwrap();
        let expected: Vec<f64> = (0..8).map(|i| data[i] + data[i + 8]).collect();
        assert_eq!(g.value(y).data(), expected.as_slice());
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 3, 3]));
        let k = g.constant(Tensor::zeros(&[1, 3, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.conv3d(x, k, b, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_function_grad_check_is_exact() {
        let p = Tensor::vector(vec![0.3, -1.2, 2.5]);
        let report = grad_check(
            |g, x| {
                let y = g.linear(x, 3.0, 1.0);
                Ok(g.sum(y))
            },
            &p,
            1e-4,
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
    }

    #[test]
    fn corrupted_gradient_fails_check() {
        let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let y = g.tanh(v[0]);
            Ok(g.sum(y))
        };
        let p = vec![Tensor::vector(vec![0.1, 0.7, -0.4])];
        let mut analytic = analytic_gradients(&f, &p).unwrap();
        let numeric = numeric_gradients(&f, &p, GRAD_CHECK_STEP).unwrap();
        analytic[0].data_mut()[1] *= 1.01;
        let report = GradCheckReport::compare(analytic[0].data(), numeric[0].data(), 1e-4);
        assert!(!report.passed);
    }

    #[test]
    fn backward_twice_identical() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.2, -0.3, 0.9]));
        let t = g.tanh(x);
        let s = g.square(t);
        let r = g.sum(s);
        let a = g.backward(r).unwrap();
        let b = g.backward(r).unwrap();
        assert_eq!(a.get(x).unwrap(), b.get(x).unwrap());
    }

    #[test]
    fn norm_gradient_at_origin_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, 0.0]));
        let n = g.norm(x);
        assert_eq!(g.value(n).item(), 0.0);
        let grads = g.backward(n).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for y in [1e-3, 0.5, 1.0, 4.0, 40.0] {
            assert!(close(softplus(softplus_inverse(y)), y, 1e-12 * y.max(1.0)));
        }
    }
}
