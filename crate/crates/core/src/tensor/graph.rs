use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeom, Padding};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor owned by a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// The recorded operation kinds. Everything except `Leaf` is differentiable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    MaxPool2,
    Upsample2,
    Prelu,
    Relu,
    Add,
    Sub,
    Scale,
    L1Norm,
    Dot,
    RepeatChannels,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 11] = [
        OpKind::Conv2d,
        OpKind::MaxPool2,
        OpKind::Upsample2,
        OpKind::Prelu,
        OpKind::Relu,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Scale,
        OpKind::L1Norm,
        OpKind::Dot,
        OpKind::RepeatChannels,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2 => "maxpool2",
            OpKind::Upsample2 => "upsample2",
            OpKind::Prelu => "prelu",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Scale => "scale",
            OpKind::L1Norm => "l1_norm",
            OpKind::Dot => "dot",
            OpKind::RepeatChannels => "repeat_channels",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        std::iter::once(OpKind::Leaf)
            .chain(Self::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: Var,
    },
    Prelu {
        input: Var,
        slope: Var,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    L1Norm {
        input: Var,
    },
    Dot {
        input: Var,
        weights: Vec<T>,
    },
    RepeatChannels {
        input: Var,
        times: usize,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Upsample2 { .. } => OpKind::Upsample2,
            Op::Prelu { .. } => OpKind::Prelu,
            Op::Relu { .. } => OpKind::Relu,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Scale { .. } => OpKind::Scale,
            Op::L1Norm { .. } => OpKind::L1Norm,
            Op::Dot { .. } => OpKind::Dot,
            Op::RepeatChannels { .. } => OpKind::RepeatChannels,
        }
    }
}

struct Node<T> {
    tensor: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so replaying adjoints from the loss
/// index downwards visits every operation once, after all of its consumers.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<(OpKind, f64)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient on [`Graph::backward`].
    pub fn variable(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient. Gradients still flow through
    /// operations that consume it.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.tensor.zero_grad();
        }
    }

    /// Moves a leaf's tensor (with its gradient) out of the graph.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].tensor, Tensor::scalar(T::zero()))
    }

    /// Scales every gradient contribution produced by operations of `kind`.
    /// Only meant for negative controls of the gradient checker.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            tensor,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Stride-1 cross-correlation with "same" zero padding (see
    /// [`Padding::same`]). `kernel` is `[cout, cin, k, k]`, `bias` is `[cout]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (cout, kcin, kh, kw) = self.value(kernel).dims4()?;
        if kh != kw {
            return Err(Error::Dimension(format!("kernel must be square, got {kh}x{kw}")));
        }
        if kcin != cin {
            return Err(Error::Dimension(format!(
                "input has {cin} channels but kernel expects {kcin}"
            )));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match {cout} output channels",
                self.value(bias).shape()
            )));
        }
        let geom = ConvGeom {
            batch: n,
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: w,
            kernel: kh,
            pad: Padding::same(kh),
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let rg = self.any_grad(&[input, kernel, bias]);
        let t = Tensor::new(vec![n, cout, h, w], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let dims @ (n, c, h, w) = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "max pooling needs even height and width, got {h}x{w}"
            )));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(input).data(), dims);
        let rg = self.any_grad(&[input]);
        let t = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        Ok(self.push(t, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let dims @ (n, c, h, w) = self.value(input).dims4()?;
        let out = kernels::upsample2_forward(self.value(input).data(), dims);
        let rg = self.any_grad(&[input]);
        let t = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(t, Op::Upsample2 { input }, rg))
    }

    /// Parametric ReLU with one slope per channel (axis 1).
    pub fn prelu(&mut self, input: Var, slope: Var) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension("prelu needs a channel axis".into()));
        }
        let c = shape[1];
        if self.value(slope).shape() != [c] {
            return Err(Error::Dimension(format!(
                "prelu slope shape {:?} does not match {c} channels",
                self.value(slope).shape()
            )));
        }
        let inner: usize = shape[2..].iter().product();
        let slopes = self.value(slope).data();
        let out: Vec<T> = self
            .value(input)
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| {
                if x >= T::zero() {
                    x
                } else {
                    slopes[(idx / inner) % c] * x
                }
            })
            .collect();
        let rg = self.any_grad(&[input, slope]);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Prelu { input, slope }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(t, Op::Relu { input }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what} needs identical shapes, got {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let k = T::from_f64(factor);
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v * k).collect();
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(t, Op::Scale { input, factor: k }, rg))
    }

    /// Sum of absolute values, as a scalar.
    pub fn l1_norm(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).l1();
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::scalar(s), Op::L1Norm { input }, rg))
    }

    /// Inner product with fixed weights, as a scalar.
    pub fn dot(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.value(input).shape() != weights.shape() {
            return Err(Error::Dimension(format!(
                "dot needs identical shapes, got {:?} and {:?}",
                self.value(input).shape(),
                weights.shape()
            )));
        }
        let s = self
            .value(input)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&x, &w)| x * w)
            .sum();
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                input,
                weights: weights.data().to_vec(),
            },
            rg,
        ))
    }

    /// Tiles a `[n, c, h, w]` tensor `times` times along the channel axis.
    pub fn repeat_channels(&mut self, input: Var, times: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if times == 0 {
            return Err(Error::Dimension("repeat_channels needs times >= 1".into()));
        }
        let x = self.value(input).data();
        let block = c * h * w;
        let mut out = Vec::with_capacity(n * block * times);
        for s in 0..n {
            for _ in 0..times {
                out.extend_from_slice(&x[s * block..(s + 1) * block]);
            }
        }
        let t = Tensor::new(vec![n, c * times, h, w], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(t, Op::RepeatChannels { input, times }, rg))
    }

    /// Replays adjoints from the scalar `loss` and accumulates the result into
    /// the gradient buffer of every variable leaf it reaches. Calling it twice
    /// without [`Graph::zero_grad`] adds the gradients twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].tensor.accumulate_grad(&g);
                continue;
            }
            let mut contribs = self.local_grads(i, &g);
            if let Some((kind, factor)) = self.fault {
                if kind == self.nodes[i].op.kind() {
                    let f = T::from_f64(factor);
                    for (_, c) in &mut contribs {
                        c.iter_mut().for_each(|v| *v = *v * f);
                    }
                }
            }
            for (v, c) in contribs {
                match &mut adj[v.0] {
                    Some(buf) => buf.iter_mut().zip(&c).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let grads = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    (self.wants(*input), self.wants(*kernel), self.wants(*bias)),
                );
                if let Some(gi) = grads.input {
                    out.push((*input, gi));
                }
                if let Some(gk) = grads.kernel {
                    out.push((*kernel, gk));
                }
                if let Some(gb) = grads.bias {
                    out.push((*bias, gb));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let len = self.value(*input).len();
                out.push((*input, kernels::maxpool2_backward(g, argmax, len)));
            }
            Op::Upsample2 { input } => {
                let dims = self.value(*input).dims4().expect("recorded as rank 4");
                out.push((*input, kernels::upsample2_backward(g, dims)));
            }
            Op::Prelu { input, slope } => {
                let x = self.value(*input);
                let c = x.shape()[1];
                let inner: usize = x.shape()[2..].iter().product();
                let slopes = self.value(*slope).data();
                if self.wants(*input) {
                    let gi = x
                        .data()
                        .iter()
                        .zip(g)
                        .enumerate()
                        .map(|(idx, (&xv, &gv))| {
                            if xv > T::zero() {
                                gv
                            } else if xv < T::zero() {
                                gv * slopes[(idx / inner) % c]
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    out.push((*input, gi));
                }
                if self.wants(*slope) {
                    let mut gs = vec![T::zero(); c];
                    for (idx, (&xv, &gv)) in x.data().iter().zip(g).enumerate() {
                        if xv < T::zero() {
                            let ch = (idx / inner) % c;
                            gs[ch] = gs[ch] + gv * xv;
                        }
                    }
                    out.push((*slope, gs));
                }
            }
            Op::Relu { input } => {
                let gi = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*input, gi));
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().map(|&v| -v).collect()));
                }
            }
            Op::Scale { input, factor } => {
                out.push((*input, g.iter().map(|&v| v * *factor).collect()));
            }
            Op::L1Norm { input } => {
                let s = g[0];
                let gi = self
                    .value(*input)
                    .data()
                    .iter()
                    .map(|&x| kernels::sign(x) * s)
                    .collect();
                out.push((*input, gi));
            }
            Op::Dot { input, weights } => {
                let s = g[0];
                out.push((*input, weights.iter().map(|&w| w * s).collect()));
            }
            Op::RepeatChannels { input, times } => {
                let (n, c, h, w) = self.value(*input).dims4().expect("recorded as rank 4");
                let block = c * h * w;
                let mut gi = vec![T::zero(); n * block];
                for s in 0..n {
                    let dst = &mut gi[s * block..(s + 1) * block];
                    for r in 0..*times {
                        let off = (s * times + r) * block;
                        dst.iter_mut().zip(&g[off..off + block]).for_each(|(d, &v)| *d = *d + v);
                    }
                }
                out.push((*input, gi));
            }
        }
        out.retain(|(v, _)| self.wants(*v));
        out
    }

    /// Hash of every branch decision taken by the recorded piecewise-linear
    /// operations (activation signs, absolute-value signs, pooling winners).
    /// Two evaluations with equal signatures lie in the same linear piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } | Op::Prelu { input, .. } | Op::L1Norm { input } => {
                    for &x in self.value(*input).data() {
                        let s: i8 = if x > T::zero() {
                            1
                        } else if x < T::zero() {
                            -1
                        } else {
                            0
                        };
                        s.hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Smallest distance of any recorded branch input from its kink, used to
    /// judge whether a finite-difference step stays in one linear piece.
    pub fn min_kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } | Op::Prelu { input, .. } | Op::L1Norm { input } => {
                    for &x in self.value(*input).data() {
                        m = m.min(x.as_f64().abs());
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let (n, c, h, w) = self.value(*input).dims4().expect("rank 4");
                    let x = self.value(*input).data();
                    let (oh, ow) = (h / 2, w / 2);
                    for (o, &a) in argmax.iter().enumerate() {
                        let plane = o / (oh * ow);
                        let (i, j) = ((o % (oh * ow)) / ow, o % ow);
                        let base = plane * h * w;
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * i + di) * w + 2 * j + dj;
                            if idx != a as usize {
                                m = m.min((x[a as usize] - x[idx]).as_f64().abs());
                            }
                        }
                    }
                    let _ = (n, c);
                }
                _ => {}
            }
        }
        m
    }
}
