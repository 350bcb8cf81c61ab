//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends a node holding its output value and enough context to
//! push gradients back to its inputs. [`Tape::backward`] walks the nodes in
//! reverse and stores gradients in each reached tensor's `grad` slot; tensors
//! that the loss does not depend on keep `grad == None`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{col2im3, gemm, im2col3, sigmoid};
use crate::param::Parameter;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Shape, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Channel,
    Spatial,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1x1 { input: Var, weight: Var, bias: Var },
    Conv3x3 { input: Var, weight: Var, bias: Var },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    GlobalMaxPool { input: Var, argmax: Vec<usize> },
    CrossChannelAvgPool(Var),
    GroupChannelMean { input: Var, group: usize },
    Sigmoid(Var),
    Relu(Var),
    BroadcastMul { a: Var, b: Var, kind: Broadcast },
    Dropout { input: Var, mask: Vec<f64> },
    FullyConnected { input: Var, weight: Var, bias: Var },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
    Sum(Var),
    Add(Var, Var),
    Scale(Var, f64),
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of a forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    track_frozen: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape on which frozen parameters still propagate gradients. Used when
    /// gradients with respect to activations are wanted regardless of the
    /// training phase (Grad-CAM).
    pub fn tracking_frozen() -> Self {
        Tape {
            track_frozen: true,
            ..Tape::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Which branch every piecewise op took: the active set of each relu and
    /// the argmax of each global max pool. Two evaluations with equal
    /// patterns lie on the same smooth piece of the function.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(input) => out.extend(
                    self.nodes[input.0].tensor.values().iter().map(|&v| usize::from(v > 0.0)),
                ),
                Op::GlobalMaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// Leaf that receives a gradient when reachable from the loss.
    pub fn variable(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, true)
    }

    /// Records a model parameter. Frozen parameters behave as constants.
    pub fn param(&mut self, p: &Parameter) -> Var {
        let mut t = p.tensor.clone();
        t.grad = None;
        let v = self.push(t, Op::Leaf, p.trainable || self.track_frozen);
        self.params.push((p.name.clone(), v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].tensor.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    /// Gradient recorded for the parameter registered under `name`.
    pub fn param_grad(&self, name: &str) -> Option<&[f64]> {
        self.params
            .iter()
            .rev()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.grad(*v))
    }

    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.params
    }

    // ---- ops ------------------------------------------------------------

    /// `out[n,o,y,x] = bias[o] + sum_i weight[o,i] * in[n,i,y,x]`.
    /// `weight` has shape `(c_out, c_in, 1, 1)`, `bias` `(1, c_out, 1, 1)`.
    pub fn conv1x1(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let s = self.shape(input);
        let ws = self.shape(weight);
        let (c_out, c_in) = (ws.n(), ws.c());
        if ws.plane() != 1 {
            return Err(Error::Shape(format!("conv1x1 weight must be (o, i, 1, 1), got {ws:?}")));
        }
        if s.c() != c_in {
            return Err(Error::Shape(format!(
                "conv1x1 expects {c_in} input channels, got {}",
                s.c()
            )));
        }
        check_bias(self.shape(bias), c_out)?;
        let hw = s.plane();
        let out_shape = Shape::new(s.n(), c_out, s.h(), s.w())?;
        let mut out = vec![0.0; out_shape.numel()];
        let x = self.value(input).values();
        let w = self.value(weight).values();
        let b = self.value(bias).values();
        for n in 0..s.n() {
            let dst = &mut out[n * c_out * hw..(n + 1) * c_out * hw];
            for (o, row) in dst.chunks_mut(hw).enumerate() {
                row.fill(b[o]);
            }
            gemm(c_out, c_in, hw, w, false, &x[n * c_in * hw..], false, 1.0, dst);
        }
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Tensor::from_vec(out_shape, out)?,
            Op::Conv1x1 {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    /// 3x3 convolution, stride 1, zero padding 1. `weight` is `(c_out, c_in, 3, 3)`.
    pub fn conv3x3(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let s = self.shape(input);
        let ws = self.shape(weight);
        let (c_out, c_in) = (ws.n(), ws.c());
        if ws.h() != 3 || ws.w() != 3 {
            return Err(Error::Shape(format!("conv3x3 weight must be (o, i, 3, 3), got {ws:?}")));
        }
        if s.c() != c_in {
            return Err(Error::Shape(format!(
                "conv3x3 expects {c_in} input channels, got {}",
                s.c()
            )));
        }
        check_bias(self.shape(bias), c_out)?;
        let hw = s.plane();
        let out_shape = Shape::new(s.n(), c_out, s.h(), s.w())?;
        let mut out = vec![0.0; out_shape.numel()];
        let mut cols = vec![0.0; c_in * 9 * hw];
        let x = self.value(input).values();
        let w = self.value(weight).values();
        let b = self.value(bias).values();
        for n in 0..s.n() {
            im2col3(&x[n * c_in * hw..], c_in, s.h(), s.w(), &mut cols);
            let dst = &mut out[n * c_out * hw..(n + 1) * c_out * hw];
            for (o, row) in dst.chunks_mut(hw).enumerate() {
                row.fill(b[o]);
            }
            gemm(c_out, c_in * 9, hw, w, false, &cols, false, 1.0, dst);
        }
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Tensor::from_vec(out_shape, out)?,
            Op::Conv3x3 {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    /// Non-overlapping 2x2 average pooling (halves h and w).
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if !s.h().is_multiple_of(2) || !s.w().is_multiple_of(2) || s.h() < 2 || s.w() < 2 {
            return Err(Error::Shape(format!("avg_pool2 needs even spatial dims, got {s:?}")));
        }
        let (oh, ow) = (s.h() / 2, s.w() / 2);
        let out_shape = Shape::new(s.n(), s.c(), oh, ow)?;
        let x = self.value(input);
        let out = Tensor::from_fn(out_shape, |n, c, y, xx| {
            0.25 * (x.at(n, c, 2 * y, 2 * xx)
                + x.at(n, c, 2 * y, 2 * xx + 1)
                + x.at(n, c, 2 * y + 1, 2 * xx)
                + x.at(n, c, 2 * y + 1, 2 * xx + 1))
        });
        let needs = self.needs(&[input]);
        Ok(self.push(out, Op::AvgPool2(input), needs))
    }

    /// Mean over each channel's `h*w` plane -> `(n, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let x = self.value(input).values();
        let hw = s.plane();
        let out: Vec<f64> = x
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::from_vec(Shape::new(s.n(), s.c(), 1, 1)?, out)?;
        let needs = self.needs(&[input]);
        Ok(self.push(t, Op::GlobalAvgPool(input), needs))
    }

    /// Max over each channel's plane -> `(n, c, 1, 1)`. Ties resolve to the
    /// first maximal element in row-major order.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let x = self.value(input).values();
        let hw = s.plane();
        let mut out = Vec::with_capacity(s.n() * s.c());
        let mut argmax = Vec::with_capacity(s.n() * s.c());
        for (p, plane) in x.chunks(hw).enumerate() {
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            out.push(plane[best]);
            argmax.push(p * hw + best);
        }
        let t = Tensor::from_vec(Shape::new(s.n(), s.c(), 1, 1)?, out)?;
        let needs = self.needs(&[input]);
        Ok(self.push(t, Op::GlobalMaxPool { input, argmax }, needs))
    }

    /// Mean across channels at each pixel -> `(n, 1, h, w)`.
    pub fn cross_channel_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        self.group_mean(input, s.c(), Op::CrossChannelAvgPool(input))
    }

    /// Averages consecutive groups of `group` channels:
    /// `(n, g*group, h, w) -> (n, g, h, w)`.
    pub fn group_channel_mean(&mut self, input: Var, group: usize) -> Result<Var> {
        self.group_mean(input, group, Op::GroupChannelMean { input, group })
    }

    fn group_mean(&mut self, input: Var, group: usize, op: Op) -> Result<Var> {
        let s = self.shape(input);
        if group == 0 || !s.c().is_multiple_of(group) {
            return Err(Error::Config(format!(
                "{} channels cannot be split into groups of {group}",
                s.c()
            )));
        }
        let groups = s.c() / group;
        let hw = s.plane();
        let x = self.value(input).values();
        let out_shape = Shape::new(s.n(), groups, s.h(), s.w())?;
        let mut out = vec![0.0; out_shape.numel()];
        let k = group as f64;
        for n in 0..s.n() {
            for g in 0..groups {
                let dst = &mut out[(n * groups + g) * hw..][..hw];
                for j in 0..group {
                    let src = &x[(n * s.c() + g * group + j) * hw..][..hw];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
                dst.iter_mut().for_each(|d| *d /= k);
            }
        }
        let needs = self.needs(&[input]);
        Ok(self.push(Tensor::from_vec(out_shape, out)?, op, needs))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::from_vec(x.shape(), x.values().iter().map(|&v| sigmoid(v)).collect())
            .expect("same shape");
        let needs = self.needs(&[input]);
        self.push(out, Op::Sigmoid(input), needs)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::from_vec(x.shape(), x.values().iter().map(|&v| v.max(0.0)).collect())
            .expect("same shape");
        let needs = self.needs(&[input]);
        self.push(out, Op::Relu(input), needs)
    }

    /// Elementwise `a * b` where `b` is either `a`'s shape, a per-channel map
    /// `(n, c, 1, 1)`, or a per-pixel map `(n, 1, h, w)`.
    pub fn broadcast_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let kind = if sa == sb {
            Broadcast::Same
        } else if sb.dims() == [sa.n(), sa.c(), 1, 1] {
            Broadcast::Channel
        } else if sb.dims() == [sa.n(), 1, sa.h(), sa.w()] {
            Broadcast::Spatial
        } else {
            return Err(Error::Shape(format!("cannot broadcast {sb:?} against {sa:?}")));
        };
        let av = self.value(a);
        let bv = self.value(b);
        let out = Tensor::from_fn(sa, |n, c, y, x| av.at(n, c, y, x) * bv.values()[bidx(kind, sa, n, c, y, x)]);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::BroadcastMul { a, b, kind }, needs))
    }

    /// Inverted dropout. Outside training, or at rate 0, returns `input` itself.
    pub fn dropout(&mut self, input: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let mut rng = stream_rng(seed, Stream::Dropout, 0);
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(input);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = Tensor::from_vec(
            x.shape(),
            x.values().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )?;
        let needs = self.needs(&[input]);
        Ok(self.push(out, Op::Dropout { input, mask }, needs))
    }

    /// Flattens `input` to `n x d` and returns `input * weight^T + bias` as
    /// `(n, L, 1, 1)`. `weight` is `(L, d, 1, 1)`, `bias` `(1, L, 1, 1)`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let s = self.shape(input);
        let ws = self.shape(weight);
        let d = s.c() * s.plane();
        let l = ws.n();
        if ws.c() * ws.plane() != d {
            return Err(Error::Shape(format!(
                "fully_connected weight {ws:?} does not match input width {d}"
            )));
        }
        check_bias(self.shape(bias), l)?;
        let n = s.n();
        let b = self.value(bias).values();
        let mut out: Vec<f64> = (0..n).flat_map(|_| b.iter().copied()).collect();
        gemm(n, d, l, self.value(input).values(), false, self.value(weight).values(), true, 1.0, &mut out);
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Tensor::from_vec(Shape::new(n, l, 1, 1)?, out)?,
            Op::FullyConnected {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    /// Mean softmax cross-entropy of `logits` (`n` rows of `c*h*w` classes).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        let l = s.c() * s.plane();
        if labels.len() != s.n() {
            return Err(Error::Validation(format!(
                "{} labels for a batch of {}",
                labels.len(),
                s.n()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= l) {
            return Err(Error::Validation(format!("label {bad} outside [0, {l})")));
        }
        let z = self.value(logits).values();
        let mut probs = Vec::with_capacity(z.len());
        let mut loss = 0.0;
        for (row, &y) in z.chunks(l).zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let log_sum = sum.ln();
            loss += -(row[y] - m - log_sum);
            probs.extend(row.iter().map(|v| (v - m).exp() / sum));
        }
        loss /= s.n() as f64;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::full(Shape::new(1, 1, 1, 1)?, loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).values().iter().sum();
        let needs = self.needs(&[input]);
        self.push(
            Tensor::full(Shape::new(1, 1, 1, 1).expect("unit"), total),
            Op::Sum(input),
            needs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "cannot add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = Tensor::from_vec(
            self.shape(a),
            self.value(a)
                .values()
                .iter()
                .zip(self.value(b).values())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let out = Tensor::from_vec(x.shape(), x.values().iter().map(|v| v * factor).collect())
            .expect("same shape");
        let needs = self.needs(&[input]);
        self.push(out, Op::Scale(input, factor), needs)
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with(loss, vec![1.0])
    }

    /// Back-propagates an arbitrary upstream gradient `seed` from `root`.
    pub fn backward_with(&mut self, root: Var, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.value(root).numel() {
            return Err(Error::Contract("seed gradient does not match root".into()));
        }
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
        self.nodes[root.0].tensor.grad = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(upstream) = self.nodes[i].tensor.grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &upstream);
            self.nodes[i].tensor.grad = Some(upstream);
            for (var, g) in contributions {
                let node = &mut self.nodes[var.0];
                match &mut node.tensor.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient contributions of node `i` to each of its inputs that needs one.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out_shape = node.tensor.shape();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1x1 {
                input,
                weight,
                bias,
            } => {
                let s = self.shape(*input);
                let (c_in, c_out, hw) = (s.c(), out_shape.c(), s.plane());
                let x = self.value(*input).values();
                let w = self.value(*weight).values();
                if self.wants(*input) {
                    let mut gx = vec![0.0; x.len()];
                    for n in 0..s.n() {
                        gemm(c_in, c_out, hw, w, true, &g[n * c_out * hw..], false, 0.0, &mut gx[n * c_in * hw..]);
                    }
                    res.push((*input, gx));
                }
                if self.wants(*weight) {
                    let mut gw = vec![0.0; w.len()];
                    for n in 0..s.n() {
                        gemm(c_out, hw, c_in, &g[n * c_out * hw..], false, &x[n * c_in * hw..], true, 1.0, &mut gw);
                    }
                    res.push((*weight, gw));
                }
                if self.wants(*bias) {
                    res.push((*bias, channel_sums(g, out_shape)));
                }
            }
            Op::Conv3x3 {
                input,
                weight,
                bias,
            } => {
                let s = self.shape(*input);
                let (c_in, c_out, hw) = (s.c(), out_shape.c(), s.plane());
                let x = self.value(*input).values();
                let w = self.value(*weight).values();
                let want_x = self.wants(*input);
                let want_w = self.wants(*weight);
                let mut gx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
                let mut gw = if want_w { vec![0.0; w.len()] } else { Vec::new() };
                let mut cols = vec![0.0; c_in * 9 * hw];
                for n in 0..s.n() {
                    let go = &g[n * c_out * hw..(n + 1) * c_out * hw];
                    if want_w {
                        im2col3(&x[n * c_in * hw..], c_in, s.h(), s.w(), &mut cols);
                        gemm(c_out, hw, c_in * 9, go, false, &cols, true, 1.0, &mut gw);
                    }
                    if want_x {
                        gemm(c_in * 9, c_out, hw, w, true, go, false, 0.0, &mut cols);
                        col2im3(&cols, c_in, s.h(), s.w(), &mut gx[n * c_in * hw..]);
                    }
                }
                if want_x {
                    res.push((*input, gx));
                }
                if want_w {
                    res.push((*weight, gw));
                }
                if self.wants(*bias) {
                    res.push((*bias, channel_sums(g, out_shape)));
                }
            }
            Op::AvgPool2(input) => {
                let s = self.shape(*input);
                let mut gx = vec![0.0; s.numel()];
                let (ow, w) = (out_shape.w(), s.w());
                for (p, go) in g.chunks(out_shape.plane()).enumerate() {
                    let base = p * s.plane();
                    for (k, v) in go.iter().enumerate() {
                        let (y, x) = (k / ow, k % ow);
                        let q = 0.25 * v;
                        let top = base + 2 * y * w + 2 * x;
                        gx[top] += q;
                        gx[top + 1] += q;
                        gx[top + w] += q;
                        gx[top + w + 1] += q;
                    }
                }
                res.push((*input, gx));
            }
            Op::GlobalAvgPool(input) => {
                let s = self.shape(*input);
                let hw = s.plane();
                let gx = g
                    .iter()
                    .flat_map(|v| std::iter::repeat_n(v / hw as f64, hw))
                    .collect();
                res.push((*input, gx));
            }
            Op::GlobalMaxPool { input, argmax } => {
                let mut gx = vec![0.0; self.value(*input).numel()];
                for (&idx, v) in argmax.iter().zip(g) {
                    gx[idx] += v;
                }
                res.push((*input, gx));
            }
            Op::CrossChannelAvgPool(input) => {
                let c = self.shape(*input).c();
                res.push((*input, spread_groups(g, self.shape(*input), c)));
            }
            Op::GroupChannelMean { input, group } => {
                res.push((*input, spread_groups(g, self.shape(*input), *group)));
            }
            Op::Sigmoid(input) => {
                let y = node.tensor.values();
                res.push((*input, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
            Op::Relu(input) => {
                let x = self.value(*input).values();
                res.push((
                    *input,
                    g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                ));
            }
            Op::BroadcastMul { a, b, kind } => {
                let sa = self.shape(*a);
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                if self.wants(*a) {
                    let mut ga = vec![0.0; av.len()];
                    for n in 0..sa.n() {
                        for c in 0..sa.c() {
                            for y in 0..sa.h() {
                                for x in 0..sa.w() {
                                    let k = sa.index(n, c, y, x);
                                    ga[k] = g[k] * bv[bidx(*kind, sa, n, c, y, x)];
                                }
                            }
                        }
                    }
                    res.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    for n in 0..sa.n() {
                        for c in 0..sa.c() {
                            for y in 0..sa.h() {
                                for x in 0..sa.w() {
                                    let k = sa.index(n, c, y, x);
                                    gb[bidx(*kind, sa, n, c, y, x)] += g[k] * av[k];
                                }
                            }
                        }
                    }
                    res.push((*b, gb));
                }
            }
            Op::Dropout { input, mask } => {
                res.push((*input, g.iter().zip(mask).map(|(g, m)| g * m).collect()));
            }
            Op::FullyConnected {
                input,
                weight,
                bias,
            } => {
                let s = self.shape(*input);
                let n = s.n();
                let d = s.c() * s.plane();
                let l = out_shape.c();
                if self.wants(*input) {
                    let mut gx = vec![0.0; n * d];
                    gemm(n, l, d, g, false, self.value(*weight).values(), false, 0.0, &mut gx);
                    res.push((*input, gx));
                }
                if self.wants(*weight) {
                    let mut gw = vec![0.0; l * d];
                    gemm(l, n, d, g, true, self.value(*input).values(), false, 0.0, &mut gw);
                    res.push((*weight, gw));
                }
                if self.wants(*bias) {
                    let mut gb = vec![0.0; l];
                    for row in g.chunks(l) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    res.push((*bias, gb));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let l = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut gz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    gz[r * l + y] -= scale;
                }
                res.push((*logits, gz));
            }
            Op::Sum(input) => {
                res.push((*input, vec![g[0]; self.value(*input).numel()]));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    res.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    res.push((*b, g.to_vec()));
                }
            }
            Op::Scale(input, f) => {
                res.push((*input, g.iter().map(|v| v * f).collect()));
            }
        }
        res.retain(|(v, _)| self.wants(*v));
        res
    }
}

fn check_bias(bs: Shape, c_out: usize) -> Result<()> {
    if bs.dims() != [1, c_out, 1, 1] {
        return Err(Error::Shape(format!(
            "bias must be (1, {c_out}, 1, 1), got {bs:?}"
        )));
    }
    Ok(())
}

#[inline]
fn bidx(kind: Broadcast, sa: Shape, n: usize, c: usize, y: usize, x: usize) -> usize {
    match kind {
        Broadcast::Same => sa.index(n, c, y, x),
        Broadcast::Channel => n * sa.c() + c,
        Broadcast::Spatial => (n * sa.h() + y) * sa.w() + x,
    }
}

/// Sums a gradient over batch and spatial axes, one value per channel.
fn channel_sums(g: &[f64], s: Shape) -> Vec<f64> {
    let mut out = vec![0.0; s.c()];
    for (p, plane) in g.chunks(s.plane()).enumerate() {
        out[p % s.c()] += plane.iter().sum::<f64>();
    }
    out
}

/// Adjoint of a group-mean over channels.
fn spread_groups(g: &[f64], in_shape: Shape, group: usize) -> Vec<f64> {
    let hw = in_shape.plane();
    let groups = in_shape.c() / group;
    let k = group as f64;
    let mut gx = vec![0.0; in_shape.numel()];
    for n in 0..in_shape.n() {
        for gi in 0..groups {
            let src = &g[(n * groups + gi) * hw..][..hw];
            for j in 0..group {
                let dst = &mut gx[(n * in_shape.c() + gi * group + j) * hw..][..hw];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = s / k);
            }
        }
    }
    gx
}
