//! Minimal reverse-mode automatic differentiation over f64 tensors.
//!
//! The networks in this crate are small and fixed-shape, so the engine is a
//! flat eager tape: building an op computes its value immediately, `backward`
//! walks the tape once in reverse. Trainable parameters live in a [`ParamSet`]
//! outside the tape and are referenced by index; frozen backend weights are
//! shared into the tape as `Arc` tensors so per-sample graphs never copy them.

use std::sync::Arc;

use crate::tensor::{l2_norm, Tensor};

/// Named trainable parameters. Order is the canonical serialization order.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.iter().any(|n| *n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Gradient accumulator shaped like a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        ParamGrads {
            grads: params.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.is_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
    Frozen(Arc<Tensor>),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { w: NodeId, b: Option<NodeId>, x: NodeId },
    Conv2d { w: NodeId, b: NodeId, x: NodeId, stride: usize, pad: usize },
    LeakyRelu { x: NodeId, slope: f64 },
    Tanh { x: NodeId },
    Exp { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, k: f64 },
    AddScalar { x: NodeId },
    Concat { a: NodeId, b: NodeId },
    Slice { x: NodeId, start: usize, len: usize },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Reshape { x: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    Dot { a: NodeId, b: NodeId },
    L2Normalize { x: NodeId, eps: f64 },
    ChannelNormalize { x: NodeId, eps: f64 },
    AvgPool2 { x: NodeId },
    GlobalAvgPool { x: NodeId },
}

struct Node {
    value: Value,
    op: Op,
    label: Option<&'static str>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

/// Eager computation tape. Create one per forward pass.
pub struct Tape<'p> {
    params: Option<&'p ParamSet>,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { params: None, nodes: Vec::new() }
    }

    pub fn with_params(params: &'p ParamSet) -> Self {
        Tape { params: Some(params), nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(pid) => self.params.expect("tape has no ParamSet bound").get(*pid),
            Value::Frozen(t) => t,
        }
    }

    pub fn set_label(&mut self, id: NodeId, label: &'static str) {
        self.nodes[id.0].label = Some(label);
    }

    /// First node (in insertion order) holding a non-finite value, reported by
    /// its label when one was set.
    pub fn first_non_finite(&self) -> Option<String> {
        for (i, node) in self.nodes.iter().enumerate() {
            let t = self.value(NodeId(i));
            if !t.is_finite() {
                return Some(match node.label {
                    Some(l) => l.to_string(),
                    None => format!("node {i}"),
                });
            }
        }
        None
    }

    fn push(&mut self, value: Value, op: Op) -> NodeId {
        self.nodes.push(Node { value, op, label: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Value::Owned(t), Op::Leaf)
    }

    pub fn frozen(&mut self, t: &Arc<Tensor>) -> NodeId {
        self.push(Value::Frozen(Arc::clone(t)), Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        assert!(self.params.is_some(), "param node on a tape without a ParamSet");
        self.push(Value::Param(id), Op::Leaf)
    }

    /// `y = W x (+ b)` with `W: [m, n]`, `x: [n]`.
    pub fn affine(&mut self, w: NodeId, b: Option<NodeId>, x: NodeId) -> NodeId {
        let wt = self.value(w);
        let xt = self.value(x);
        let (m, n) = (wt.shape()[0], wt.shape()[1]);
        assert_eq!(xt.len(), n, "affine: W {:?} vs x {:?}", wt.shape(), xt.shape());
        let wd = wt.data();
        let xd = xt.data();
        let mut y = vec![0.0; m];
        for i in 0..m {
            y[i] = crate::tensor::dot(&wd[i * n..(i + 1) * n], xd);
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            assert_eq!(bd.len(), m);
            for i in 0..m {
                y[i] += bd[i];
            }
        }
        self.push(Value::Owned(Tensor::vector(y)), Op::Affine { w, b, x })
    }

    /// 2-D convolution, `x: [C, H, W]`, `w: [OC, C, KH, KW]`, `b: [OC]`.
    pub fn conv2d(&mut self, w: NodeId, b: NodeId, x: NodeId, stride: usize, pad: usize) -> NodeId {
        let (wt, xt, bt) = (self.value(w), self.value(x), self.value(b));
        let (oc, ic, kh, kw) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
        let (c, h, wid) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        assert_eq!(c, ic, "conv2d: channel mismatch");
        assert_eq!(bt.len(), oc);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wid + 2 * pad - kw) / stride + 1;
        let y = conv2d_forward(
            wt.data(), bt.data(), xt.data(), oc, ic, kh, kw, h, wid, oh, ow, stride, pad,
        );
        self.push(
            Value::Owned(Tensor::new(vec![oc, oh, ow], y)),
            Op::Conv2d { w, b, x, stride, pad },
        )
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let y: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Value::Owned(Tensor::new(shape, y)), Op::LeakyRelu { x, slope })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Value::Owned(Tensor::new(shape, y)), Op::Tanh { x })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.value(x).data().iter().map(|v| v.exp()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Value::Owned(Tensor::new(shape, y)), Op::Exp { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Value::Owned(y), Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(Value::Owned(y), Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(Value::Owned(y), Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let t = self.value(x);
        let y = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * k).collect());
        self.push(Value::Owned(y), Op::Scale { x, k })
    }

    pub fn add_scalar(&mut self, x: NodeId, k: f64) -> NodeId {
        let t = self.value(x);
        let y = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + k).collect());
        self.push(Value::Owned(y), Op::AddScalar { x })
    }

    /// Concatenate two vectors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut y = self.value(a).data().to_vec();
        y.extend_from_slice(self.value(b).data());
        self.push(Value::Owned(Tensor::vector(y)), Op::Concat { a, b })
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let y = self.value(x).data()[start..start + len].to_vec();
        self.push(Value::Owned(Tensor::vector(y)), Op::Slice { x, start, len })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let t = self.value(x);
        let y = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.clamp(lo, hi)).collect());
        self.push(Value::Owned(y), Op::Clamp { x, lo, hi })
    }

    /// Same data, different shape.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let t = self.value(x);
        assert_eq!(t.len(), shape.iter().product::<usize>(), "reshape length mismatch");
        let y = Tensor::new(shape, t.data().to_vec());
        self.push(Value::Owned(y), Op::Reshape { x })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Value::Owned(Tensor::scalar(s)), Op::Sum { x })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Value::Owned(Tensor::scalar(s)), Op::Mean { x })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = crate::tensor::dot(self.value(a).data(), self.value(b).data());
        self.push(Value::Owned(Tensor::scalar(s)), Op::Dot { a, b })
    }

    /// `y = x / (‖x‖ + eps)` over the whole tensor.
    pub fn l2_normalize(&mut self, x: NodeId, eps: f64) -> NodeId {
        let t = self.value(x);
        let s = l2_norm(t.data()) + eps;
        let y = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v / s).collect());
        self.push(Value::Owned(y), Op::L2Normalize { x, eps })
    }

    /// Per spatial position of a `[C, H, W]` tensor, normalize the C-vector to
    /// unit length (with an eps guard).
    pub fn channel_normalize(&mut self, x: NodeId, eps: f64) -> NodeId {
        let t = self.value(x);
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let hw = h * w;
        let xd = t.data();
        let mut y = vec![0.0; xd.len()];
        for p in 0..hw {
            let mut sq = 0.0;
            for ch in 0..c {
                let v = xd[ch * hw + p];
                sq += v * v;
            }
            let s = sq.sqrt() + eps;
            for ch in 0..c {
                y[ch * hw + p] = xd[ch * hw + p] / s;
            }
        }
        self.push(Value::Owned(Tensor::new(vec![c, h, w], y)), Op::ChannelNormalize { x, eps })
    }

    /// 2x2 average pooling with stride 2 on `[C, H, W]`; H and W must be even.
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let xd = t.data();
        let mut y = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = ch * h * w + 2 * i * w + 2 * j;
                    y[ch * oh * ow + i * ow + j] =
                        0.25 * (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]);
                }
            }
        }
        self.push(Value::Owned(Tensor::new(vec![c, oh, ow], y)), Op::AvgPool2 { x })
    }

    /// `[C, H, W]` -> `[C]`, mean over the spatial dims.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let hw = (h * w) as f64;
        let xd = t.data();
        let mut y = vec![0.0; c];
        for ch in 0..c {
            y[ch] = xd[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / hw;
        }
        self.push(Value::Owned(Tensor::vector(y)), Op::GlobalAvgPool { x })
    }

    /// Reverse pass from `root`, computing gradients of `sum(root)`.
    ///
    /// Gradients w.r.t. trainable parameters are accumulated (+=) into
    /// `param_sink` when provided; gradients w.r.t. frozen tensors are
    /// discarded; everything else is returned per node.
    pub fn backward(&self, root: NodeId, mut param_sink: Option<&mut ParamGrads>) -> NodeGrads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_val = self.value(root);
        grads[root.0] = Some(Tensor::new(root_val.shape().to_vec(), vec![1.0; root_val.len()]));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads, &mut param_sink);
            grads[id] = Some(g);
        }
        NodeGrads { grads }
    }

    fn backprop_node(
        &self,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        sink: &mut Option<&mut ParamGrads>,
    ) {
        let gd = g.data();
        match self.nodes[id].op.clone() {
            Op::Leaf => {}
            Op::Affine { w, b, x } => {
                let wt = self.value(w);
                let (m, n) = (wt.shape()[0], wt.shape()[1]);
                let xv = self.value(x).data().to_vec();
                self.accum(grads, sink, w, |dst| {
                    for i in 0..m {
                        if gd[i] != 0.0 {
                            crate::tensor::axpy(gd[i], &xv, &mut dst[i * n..(i + 1) * n]);
                        }
                    }
                });
                if let Some(b) = b {
                    self.accum(grads, sink, b, |dst| {
                        for i in 0..m {
                            dst[i] += gd[i];
                        }
                    });
                }
                let wd = self.value(w).data();
                self.accum(grads, sink, x, |dst| {
                    for i in 0..m {
                        if gd[i] != 0.0 {
                            crate::tensor::axpy(gd[i], &wd[i * n..(i + 1) * n], dst);
                        }
                    }
                });
            }
            Op::Conv2d { w, b, x, stride, pad } => {
                let wt = self.value(w);
                let xt = self.value(x);
                let (oc, ic, kh, kw) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
                let (h, wid) = (xt.shape()[1], xt.shape()[2]);
                let yt = self.value(NodeId(id));
                let (oh, ow) = (yt.shape()[1], yt.shape()[2]);
                let xd = xt.data().to_vec();
                self.accum(grads, sink, w, |dst| {
                    conv2d_grad_w(dst, gd, &xd, oc, ic, kh, kw, h, wid, oh, ow, stride, pad);
                });
                self.accum(grads, sink, b, |dst| {
                    for o in 0..oc {
                        dst[o] += gd[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
                    }
                });
                let wd = self.value(w).data().to_vec();
                self.accum(grads, sink, x, |dst| {
                    conv2d_grad_x(dst, gd, &wd, oc, ic, kh, kw, h, wid, oh, ow, stride, pad);
                });
            }
            Op::LeakyRelu { x, slope } => {
                let xd = self.value(x).data();
                self.accum(grads, sink, x, |dst| {
                    for i in 0..gd.len() {
                        dst[i] += gd[i] * if xd[i] > 0.0 { 1.0 } else { slope };
                    }
                });
            }
            Op::Tanh { x } => {
                let yd = self.value(NodeId(id)).data();
                self.accum(grads, sink, x, |dst| {
                    for i in 0..gd.len() {
                        dst[i] += gd[i] * (1.0 - yd[i] * yd[i]);
                    }
                });
            }
            Op::Exp { x } => {
                let yd = self.value(NodeId(id)).data();
                self.accum(grads, sink, x, |dst| {
                    for i in 0..gd.len() {
                        dst[i] += gd[i] * yd[i];
                    }
                });
            }
            Op::Add { a, b } => {
                self.accum(grads, sink, a, |dst| add_assign(dst, gd));
                self.accum(grads, sink, b, |dst| add_assign(dst, gd));
            }
            Op::Sub { a, b } => {
                self.accum(grads, sink, a, |dst| add_assign(dst, gd));
                self.accum(grads, sink, b, |dst| {
                    for i in 0..gd.len() {
                        dst[i] -= gd[i];
                    }
                });
            }
            Op::Mul { a, b } => {
                let bv = self.value(b).data().to_vec();
                self.accum(grads, sink, a, |dst| {
                    for i in 0..gd.len() {
                        dst[i] += gd[i] * bv[i];
                    }
                });
                let av = self.value(a).data();
                self.accum(grads, sink, b, |dst| {
                    for i in 0..gd.len() {
                        dst[i] += gd[i] * av[i];
                    }
                });
            }
            Op::Scale { x, k } => {
                self.accum(grads, sink, x, |dst| {
                    for i in 0..gd.len() {
                        dst[i] += gd[i] * k;
                    }
                });
            }
            Op::AddScalar { x } => {
                self.accum(grads, sink, x, |dst| add_assign(dst, gd));
            }
            Op::Concat { a, b } => {
                let alen = self.value(a).len();
                self.accum(grads, sink, a, |dst| add_assign(dst, &gd[..alen]));
                self.accum(grads, sink, b, |dst| add_assign(dst, &gd[alen..]));
            }
            Op::Slice { x, start, len } => {
                self.accum(grads, sink, x, |dst| {
                    add_assign(&mut dst[start..start + len], gd);
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.value(x).data();
                self.accum(grads, sink, x, |dst| {
                    for i in 0..gd.len() {
                        if xd[i] > lo && xd[i] < hi {
                            dst[i] += gd[i];
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.accum(grads, sink, x, |dst| add_assign(dst, gd));
            }
            Op::Sum { x } => {
                let gs = gd[0];
                self.accum(grads, sink, x, |dst| {
                    for v in dst.iter_mut() {
                        *v += gs;
                    }
                });
            }
            Op::Mean { x } => {
                let n = self.value(x).len() as f64;
                let gs = gd[0] / n;
                self.accum(grads, sink, x, |dst| {
                    for v in dst.iter_mut() {
                        *v += gs;
                    }
                });
            }
            Op::Dot { a, b } => {
                let gs = gd[0];
                let bv = self.value(b).data().to_vec();
                self.accum(grads, sink, a, |dst| {
                    for i in 0..bv.len() {
                        dst[i] += gs * bv[i];
                    }
                });
                let av = self.value(a).data();
                self.accum(grads, sink, b, |dst| {
                    for i in 0..av.len() {
                        dst[i] += gs * av[i];
                    }
                });
            }
            Op::L2Normalize { x, eps } => {
                let xd = self.value(x).data();
                let n = l2_norm(xd);
                let s = n + eps;
                let gx = crate::tensor::dot(gd, xd);
                self.accum(grads, sink, x, |dst| {
                    if n > 0.0 {
                        let c = gx / (n * s * s);
                        for i in 0..gd.len() {
                            dst[i] += gd[i] / s - c * xd[i];
                        }
                    } else {
                        for i in 0..gd.len() {
                            dst[i] += gd[i] / s;
                        }
                    }
                });
            }
            Op::ChannelNormalize { x, eps } => {
                let t = self.value(x);
                let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let hw = h * w;
                let xd = t.data();
                self.accum(grads, sink, x, |dst| {
                    for p in 0..hw {
                        let mut sq = 0.0;
                        let mut gx = 0.0;
                        for ch in 0..c {
                            let v = xd[ch * hw + p];
                            sq += v * v;
                            gx += gd[ch * hw + p] * v;
                        }
                        let n = sq.sqrt();
                        let s = n + eps;
                        if n > 0.0 {
                            let coef = gx / (n * s * s);
                            for ch in 0..c {
                                dst[ch * hw + p] += gd[ch * hw + p] / s - coef * xd[ch * hw + p];
                            }
                        } else {
                            for ch in 0..c {
                                dst[ch * hw + p] += gd[ch * hw + p] / s;
                            }
                        }
                    }
                });
            }
            Op::AvgPool2 { x } => {
                let t = self.value(x);
                let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let (oh, ow) = (h / 2, w / 2);
                self.accum(grads, sink, x, |dst| {
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let gq = 0.25 * gd[ch * oh * ow + i * ow + j];
                                let base = ch * h * w + 2 * i * w + 2 * j;
                                dst[base] += gq;
                                dst[base + 1] += gq;
                                dst[base + w] += gq;
                                dst[base + w + 1] += gq;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool { x } => {
                let t = self.value(x);
                let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let hw = (h * w) as f64;
                self.accum(grads, sink, x, |dst| {
                    for ch in 0..c {
                        let gs = gd[ch] / hw;
                        for v in dst[ch * h * w..(ch + 1) * h * w].iter_mut() {
                            *v += gs;
                        }
                    }
                });
            }
        }
    }

    /// Route a gradient contribution to wherever `target`'s gradient lives:
    /// the param sink for trainable parameters, nowhere for frozen tensors,
    /// a lazily-allocated node buffer otherwise.
    fn accum(
        &self,
        grads: &mut [Option<Tensor>],
        sink: &mut Option<&mut ParamGrads>,
        target: NodeId,
        write: impl FnOnce(&mut [f64]),
    ) {
        match &self.nodes[target.0].value {
            Value::Param(pid) => {
                if let Some(s) = sink {
                    write(s.get_mut(*pid).data_mut());
                }
            }
            Value::Frozen(_) => {}
            Value::Owned(t) => {
                let slot = &mut grads[target.0];
                if slot.is_none() {
                    *slot = Some(Tensor::zeros(t.shape().to_vec()));
                }
                write(slot.as_mut().unwrap().data_mut());
            }
        }
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise op shape mismatch");
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Gather the `[ic, kh, kw]` patch under output position (i, j) into a
/// contiguous buffer (zero-filled where the kernel hangs over the padding).
/// The weight rows share this exact layout, so convolution reduces to one
/// dot product per output channel.
#[allow(clippy::too_many_arguments)]
fn gather_patch(
    xd: &[f64], buf: &mut [f64],
    ic: usize, kh: usize, kw: usize, h: usize, w: usize,
    i: usize, j: usize, stride: usize, pad: usize,
) {
    let mut idx = 0;
    for c in 0..ic {
        let plane = &xd[c * h * w..(c + 1) * h * w];
        for r in 0..kh {
            let ih = (i * stride + r) as isize - pad as isize;
            if ih < 0 || ih >= h as isize {
                buf[idx..idx + kw].fill(0.0);
                idx += kw;
                continue;
            }
            let row = &plane[ih as usize * w..(ih as usize + 1) * w];
            for q in 0..kw {
                let iw = (j * stride + q) as isize - pad as isize;
                buf[idx] = if iw >= 0 && iw < w as isize { row[iw as usize] } else { 0.0 };
                idx += 1;
            }
        }
    }
}

/// Scatter-add a patch-shaped gradient back into the input gradient.
#[allow(clippy::too_many_arguments)]
fn scatter_patch(
    dst: &mut [f64], buf: &[f64],
    ic: usize, kh: usize, kw: usize, h: usize, w: usize,
    i: usize, j: usize, stride: usize, pad: usize,
) {
    let mut idx = 0;
    for c in 0..ic {
        for r in 0..kh {
            let ih = (i * stride + r) as isize - pad as isize;
            if ih < 0 || ih >= h as isize {
                idx += kw;
                continue;
            }
            let base = c * h * w + ih as usize * w;
            for q in 0..kw {
                let iw = (j * stride + q) as isize - pad as isize;
                if iw >= 0 && iw < w as isize {
                    dst[base + iw as usize] += buf[idx];
                }
                idx += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    wd: &[f64], bd: &[f64], xd: &[f64],
    oc: usize, ic: usize, kh: usize, kw: usize,
    h: usize, w: usize, oh: usize, ow: usize,
    stride: usize, pad: usize,
) -> Vec<f64> {
    let psz = ic * kh * kw;
    let mut patch = vec![0.0; psz];
    let mut y = vec![0.0; oc * oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            gather_patch(xd, &mut patch, ic, kh, kw, h, w, i, j, stride, pad);
            for o in 0..oc {
                y[(o * oh + i) * ow + j] = bd[o] + crate::tensor::dot(&wd[o * psz..(o + 1) * psz], &patch);
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_w(
    dst: &mut [f64], gd: &[f64], xd: &[f64],
    oc: usize, ic: usize, kh: usize, kw: usize,
    h: usize, w: usize, oh: usize, ow: usize,
    stride: usize, pad: usize,
) {
    let psz = ic * kh * kw;
    let mut patch = vec![0.0; psz];
    for i in 0..oh {
        for j in 0..ow {
            gather_patch(xd, &mut patch, ic, kh, kw, h, w, i, j, stride, pad);
            for o in 0..oc {
                let g = gd[(o * oh + i) * ow + j];
                if g != 0.0 {
                    crate::tensor::axpy(g, &patch, &mut dst[o * psz..(o + 1) * psz]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_x(
    dst: &mut [f64], gd: &[f64], wd: &[f64],
    oc: usize, ic: usize, kh: usize, kw: usize,
    h: usize, w: usize, oh: usize, ow: usize,
    stride: usize, pad: usize,
) {
    let psz = ic * kh * kw;
    let mut patch_grad = vec![0.0; psz];
    for i in 0..oh {
        for j in 0..ow {
            patch_grad.fill(0.0);
            for o in 0..oc {
                let g = gd[(o * oh + i) * ow + j];
                if g != 0.0 {
                    crate::tensor::axpy(g, &wd[o * psz..(o + 1) * psz], &mut patch_grad);
                }
            }
            scatter_patch(dst, &patch_grad, ic, kh, kw, h, w, i, j, stride, pad);
        }
    }
}
