//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Operations are appended to a [`Tape`] in execution order, which is also
//! a topological order. [`Tape::backward`] walks the tape once in reverse,
//! visiting each node at most once, and returns the gradients of every
//! tracked leaf. Gradients from several consumers of one value add up.

use crate::error::{shape_err, Error, Result};
use crate::ops::conv::{self, ConvSpec};
use crate::ops::deform;
use crate::ops::{leaky_relu, sigmoid};
use crate::reference;
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is expanded to the left operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// `(N, C, 1, 1)` factor
    PerChannel,
    /// `(N, 1, H, W)` factor
    PerPosition,
    /// `(1, 1, 1, 1)` factor
    Scalar,
}

impl Broadcast {
    fn resolve(a: Shape, b: Shape) -> Result<Self> {
        if a == b {
            Ok(Broadcast::Same)
        } else if b == Shape::new(a.n, a.c, 1, 1) {
            Ok(Broadcast::PerChannel)
        } else if b == Shape::new(a.n, 1, a.h, a.w) {
            Ok(Broadcast::PerPosition)
        } else if b == Shape::scalar() {
            Ok(Broadcast::Scalar)
        } else {
            Err(shape_err!("cannot broadcast {b} onto {a}"))
        }
    }

    #[inline]
    fn index(self, s: Shape, n: usize, c: usize, p: usize) -> usize {
        match self {
            Broadcast::Same => (n * s.c + c) * s.plane() + p,
            Broadcast::PerChannel => n * s.c + c,
            Broadcast::PerPosition => n * s.plane() + p,
            Broadcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var, bcast: Broadcast },
    Scale { x: Var, factor: f32 },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    TransposeConv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Deform { x: Var, offsets: Var, mask: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    LeakyRelu { x: Var, slope: f32 },
    Sigmoid { x: Var },
    AvgPool { x: Var },
    ChannelMean { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Sum { x: Var },
    Loss { pred: Var, target: Var, p: u8 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind: BinaryKind::Add, .. } => "add",
            Op::Binary { kind: BinaryKind::Sub, .. } => "sub",
            Op::Binary { kind: BinaryKind::Mul, .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::Conv { .. } => "conv2d",
            Op::TransposeConv { .. } => "transpose_conv2d",
            Op::Deform { .. } => "modulated_deform_conv",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::AvgPool { .. } => "adaptive_avg_pool_global",
            Op::ChannelMean { .. } => "channel_mean",
            Op::Linear { .. } => "linear",
            Op::Sum { .. } => "sum",
            Op::Loss { .. } => "loss_lp",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation context.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite output from {}", op.name());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Untracked constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Tracked named leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Operation identifier of the node that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bcast = Broadcast::resolve(sa, sb)?;
        let mut out = Tensor::zeros(sa);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            let plane = sa.plane();
            for n in 0..sa.n {
                for c in 0..sa.c {
                    let base = (n * sa.c + c) * plane;
                    for p in 0..plane {
                        let x = av[base + p];
                        let y = bv[bcast.index(sa, n, c, p)];
                        od[base + p] = match kind {
                            BinaryKind::Add => x + y,
                            BinaryKind::Sub => x - y,
                            BinaryKind::Mul => x * y,
                        };
                    }
                }
            }
        }
        let rg = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Binary { kind, a, b, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.tracked(&[x]);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Argument("concat_channels of an empty list".into()))?;
        let s0 = self.shape(first);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(shape_err!("concat_channels {s0} with {s}"));
            }
            total += s.c;
        }
        let out_shape = Shape::new(s0.n, total, s0.h, s0.w);
        let mut out = Tensor::zeros(out_shape);
        let plane = s0.plane();
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let c = v.shape().c;
            for n in 0..s0.n {
                let dst = (n * total + offset) * plane;
                out.data_mut()[dst..dst + c * plane].copy_from_slice(v.item_slice(n));
            }
            offset += c;
        }
        let rg = self.tracked(parts);
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let out = self.value(x).channels(start, count)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(out, Op::Slice { x, start }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let rg = self.tracked(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Conv { x, w, b, spec }, rg))
    }

    pub fn transpose_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv::transpose_conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let rg = self.tracked(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::TransposeConv { x, w, b, spec }, rg))
    }

    /// Modulated deformable convolution; see [`crate::ops::deform`] for the
    /// offset layout.
    pub fn deform_conv2d(&mut self, x: Var, offsets: Var, mask: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = deform::modulated_deform_conv_forward(
            self.value(x),
            self.value(offsets),
            self.value(mask),
            self.value(w),
            b.map(|b| self.value(b)),
            &spec,
        )?;
        let rg = self.tracked(&[x, offsets, mask, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            out,
            Op::Deform {
                x,
                offsets,
                mask,
                w,
                b,
                spec,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = self.value(x).map(|v| leaky_relu(v, slope));
        let rg = self.tracked(&[x]);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.tracked(&[x]);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    /// Per-channel spatial mean, `(N, C, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.plane() == 0 {
            return Err(shape_err!("global pooling of empty plane {s}"));
        }
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
        let plane = s.plane();
        for (i, chunk) in self.value(x).data().chunks(plane).enumerate() {
            let sum: f64 = chunk.iter().map(|&v| v as f64).sum();
            out.data_mut()[i] = (sum / plane as f64) as f32;
        }
        let rg = self.tracked(&[x]);
        Ok(self.push(out, Op::AvgPool { x }, rg))
    }

    /// Per-position mean over channels, `(N, 1, H, W)`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.c == 0 {
            return Err(shape_err!("channel mean of zero channels"));
        }
        let plane = s.plane();
        let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
        let inv = 1.0 / s.c as f32;
        for n in 0..s.n {
            let src = self.value(x).item_slice(n);
            let dst = &mut out.data_mut()[n * plane..(n + 1) * plane];
            for c in 0..s.c {
                for (d, &v) in dst.iter_mut().zip(&src[c * plane..(c + 1) * plane]) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let rg = self.tracked(&[x]);
        Ok(self.push(out, Op::ChannelMean { x }, rg))
    }

    /// Affine map of `(N, Cin, 1, 1)` by weight `(Cout, Cin, 1, 1)` and bias `(1, Cout, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.plane() != 1 || sw.h * sw.w != 1 || sw.c != sx.c {
            return Err(shape_err!("linear of {sx} by weight {sw}"));
        }
        if let Some(b) = b {
            if self.value(b).len() != sw.n {
                return Err(shape_err!("linear bias has {} elements, expected {}", self.value(b).len(), sw.n));
            }
        }
        let (cin, cout) = (sx.c, sw.n);
        let mut out = Tensor::zeros(Shape::new(sx.n, cout, 1, 1));
        let wd = self.value(w).data();
        for n in 0..sx.n {
            let xi = self.value(x).item_slice(n);
            for o in 0..cout {
                let mut acc = crate::ops::gemm::dot(&wd[o * cin..(o + 1) * cin], xi);
                if let Some(b) = b {
                    acc += self.value(b).data()[o];
                }
                out.data_mut()[n * cout + o] = acc;
            }
        }
        let rg = self.tracked(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Sum of all elements as a `1x1x1x1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum() as f32;
        let rg = self.tracked(&[x]);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    /// Mean of `|target - pred|^p` over all elements, `p` in {1, 2}.
    pub fn loss_lp(&mut self, target: Var, pred: Var, p: u8) -> Result<Var> {
        if p != 1 && p != 2 {
            return Err(Error::Argument(format!("loss exponent must be 1 or 2, got {p}")));
        }
        let (st, sp) = (self.shape(target), self.shape(pred));
        if st != sp {
            return Err(shape_err!("loss between {st} and {sp}"));
        }
        let count = st.numel().max(1) as f64;
        let total: f64 = self
            .value(target)
            .data()
            .iter()
            .zip(self.value(pred).data())
            .map(|(&y, &yh)| {
                let r = (y - yh).abs() as f64;
                if p == 1 {
                    r
                } else {
                    r * r
                }
            })
            .sum();
        let rg = self.tracked(&[target, pred]);
        Ok(self.push(Tensor::scalar((total / count) as f32), Op::Loss { pred, target, p }, rg))
    }

    /// Consumes the tape and returns `d loss / d leaf` for every tracked leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != Shape::scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}",
                self.shape(loss)
            )));
        }
        let Tape { nodes, params } = self;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let need = |v: Var| nodes[v.0].requires_grad;
            let mut acc = |v: Var, t: Tensor| accumulate(&mut grads, v, t);

            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Binary { kind, a, b, bcast } => {
                    let (a, b, bcast) = (*a, *b, *bcast);
                    let sa = val(a).shape();
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => {
                            if need(b) {
                                let mut db = reduce_broadcast(&g, bcast, val(b).shape(), None);
                                if *kind == BinaryKind::Sub {
                                    db.data_mut().iter_mut().for_each(|v| *v = -*v);
                                }
                                acc(b, db);
                            }
                            if need(a) {
                                acc(a, g);
                            }
                        }
                        BinaryKind::Mul => {
                            if need(b) {
                                acc(b, reduce_broadcast(&g, bcast, val(b).shape(), Some(val(a))));
                            }
                            if need(a) {
                                let bv = val(b).data();
                                let mut da = g;
                                let plane = sa.plane();
                                for n in 0..sa.n {
                                    for c in 0..sa.c {
                                        let base = (n * sa.c + c) * plane;
                                        for p in 0..plane {
                                            da.data_mut()[base + p] *= bv[bcast.index(sa, n, c, p)];
                                        }
                                    }
                                }
                                acc(a, da);
                            }
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    acc(*x, g.map(|v| v * f));
                }
                Op::Concat { parts } => {
                    let s = g.shape();
                    let mut offset = 0;
                    for &p in parts {
                        let c = val(p).shape().c;
                        if need(p) {
                            acc(p, g.channels(offset, c).expect("concat band"));
                        }
                        offset += c;
                    }
                    debug_assert_eq!(offset, s.c);
                }
                Op::Slice { x, start } => {
                    let sx = val(*x).shape();
                    let mut dx = Tensor::zeros(sx);
                    let plane = sx.plane();
                    let c = g.shape().c;
                    for n in 0..sx.n {
                        let dst = (n * sx.c + start) * plane;
                        dx.data_mut()[dst..dst + c * plane].copy_from_slice(g.item_slice(n));
                    }
                    acc(*x, dx);
                }
                Op::Conv { x, w, b, spec } => {
                    let flags = [need(*x), need(*w), b.is_some_and(need)];
                    let r = conv::conv2d_backward(val(*x), val(*w), b.is_some(), spec, &g, flags);
                    deliver(&mut acc, *x, r.input);
                    deliver(&mut acc, *w, r.weight);
                    if let Some(b) = b {
                        deliver(&mut acc, *b, r.bias.map(|t| t.reshape(val(*b).shape()).expect("bias")));
                    }
                }
                Op::TransposeConv { x, w, b, spec } => {
                    let flags = [need(*x), need(*w), b.is_some_and(need)];
                    let r = conv::transpose_conv2d_backward(val(*x), val(*w), b.is_some(), spec, &g, flags);
                    deliver(&mut acc, *x, r.input);
                    deliver(&mut acc, *w, r.weight);
                    if let Some(b) = b {
                        deliver(&mut acc, *b, r.bias.map(|t| t.reshape(val(*b).shape()).expect("bias")));
                    }
                }
                Op::Deform {
                    x,
                    offsets,
                    mask,
                    w,
                    b,
                    spec,
                } => {
                    let flags = [need(*x), need(*offsets), need(*mask), need(*w), b.is_some_and(need)];
                    let r = deform::modulated_deform_conv_backward(
                        val(*x),
                        val(*offsets),
                        val(*mask),
                        val(*w),
                        b.is_some(),
                        spec,
                        &g,
                        flags,
                    );
                    deliver(&mut acc, *x, r.input);
                    deliver(&mut acc, *offsets, r.offsets);
                    deliver(&mut acc, *mask, r.mask);
                    deliver(&mut acc, *w, r.weight);
                    if let Some(b) = b {
                        deliver(&mut acc, *b, r.bias.map(|t| t.reshape(val(*b).shape()).expect("bias")));
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = val(*x).data();
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv) {
                        if v < 0.0 {
                            *d *= slope;
                        }
                    }
                    acc(*x, dx);
                }
                Op::Sigmoid { x } => {
                    let yv = node.value.data();
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(yv) {
                        *d *= y * (1.0 - y);
                    }
                    acc(*x, dx);
                }
                Op::AvgPool { x } => {
                    let sx = val(*x).shape();
                    let plane = sx.plane();
                    let inv = 1.0 / plane as f32;
                    let mut dx = Tensor::zeros(sx);
                    for (chunk, &gv) in dx.data_mut().chunks_mut(plane).zip(g.data()) {
                        chunk.fill(gv * inv);
                    }
                    acc(*x, dx);
                }
                Op::ChannelMean { x } => {
                    let sx = val(*x).shape();
                    let plane = sx.plane();
                    let inv = 1.0 / sx.c as f32;
                    let mut dx = Tensor::zeros(sx);
                    for n in 0..sx.n {
                        let gi = &g.data()[n * plane..(n + 1) * plane];
                        for c in 0..sx.c {
                            let start = (n * sx.c + c) * plane;
                            for (d, &gv) in dx.data_mut()[start..start + plane].iter_mut().zip(gi) {
                                *d = gv * inv;
                            }
                        }
                    }
                    acc(*x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (sx, sw) = (val(*x).shape(), val(*w).shape());
                    let (cin, cout) = (sx.c, sw.n);
                    if need(*x) {
                        let mut dx = Tensor::zeros(sx);
                        let wd = val(*w).data();
                        for n in 0..sx.n {
                            for o in 0..cout {
                                let gv = g.data()[n * cout + o];
                                for i in 0..cin {
                                    dx.data_mut()[n * cin + i] += gv * wd[o * cin + i];
                                }
                            }
                        }
                        acc(*x, dx);
                    }
                    if need(*w) {
                        let mut dw = Tensor::zeros(sw);
                        let xd = val(*x).data();
                        for n in 0..sx.n {
                            for o in 0..cout {
                                let gv = g.data()[n * cout + o];
                                for i in 0..cin {
                                    dw.data_mut()[o * cin + i] += gv * xd[n * cin + i];
                                }
                            }
                        }
                        acc(*w, dw);
                    }
                    if let Some(b) = b.filter(|&b| need(b)) {
                        let mut db = Tensor::zeros(val(b).shape());
                        for n in 0..sx.n {
                            for o in 0..cout {
                                db.data_mut()[o] += g.data()[n * cout + o];
                            }
                        }
                        acc(b, db);
                    }
                }
                Op::Sum { x } => {
                    acc(*x, Tensor::full(val(*x).shape(), g.item()));
                }
                Op::Loss { pred, target, p } => {
                    let (yh, y) = (val(*pred).data(), val(*target).data());
                    let scale = g.item() / y.len().max(1) as f32;
                    let d: Vec<f32> = yh
                        .iter()
                        .zip(y)
                        .map(|(&a, &b)| {
                            let r = a - b;
                            if *p == 1 {
                                if r > 0.0 {
                                    scale
                                } else if r < 0.0 {
                                    -scale
                                } else {
                                    0.0
                                }
                            } else {
                                2.0 * r * scale
                            }
                        })
                        .collect();
                    let shape = val(*pred).shape();
                    if need(*target) {
                        acc(*target, Tensor::from_vec(shape, d.iter().map(|v| -v).collect())?);
                    }
                    if need(*pred) {
                        acc(*pred, Tensor::from_vec(shape, d)?);
                    }
                }
            }
        }

        // Only leaves keep gradients.
        for (i, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, params })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t).expect("gradient shape"),
        slot @ None => *slot = Some(t),
    }
}

fn deliver(acc: &mut impl FnMut(Var, Tensor), v: Var, t: Option<Tensor>) {
    if let Some(t) = t {
        acc(v, t);
    }
}

/// Sums `g` (optionally times `other`) over the axes `bcast` expanded.
fn reduce_broadcast(g: &Tensor, bcast: Broadcast, target: Shape, other: Option<&Tensor>) -> Tensor {
    let s = g.shape();
    let mut out = Tensor::zeros(target);
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            for p in 0..plane {
                let v = match other {
                    Some(o) => g.data()[base + p] * o.data()[base + p],
                    None => g.data()[base + p],
                };
                out.data_mut()[bcast.index(s, n, c, p)] += v;
            }
        }
    }
    out
}

impl Tape {
    /// Re-evaluates the tape up to `out` in double precision with the
    /// naive kernels of [`crate::reference`]. Leaves listed in `overrides`
    /// take the given values instead of their recorded ones.
    pub fn replay_f64(&self, overrides: &[(Var, reference::Array)], out: Var) -> Result<reference::Array> {
        let mut vals: Vec<reference::Array> = Vec::with_capacity(out.0 + 1);
        for (i, node) in self.nodes[..=out.0].iter().enumerate() {
            let v = |x: &Var| &vals[x.0];
            let next = match &node.op {
                Op::Leaf => match overrides.iter().find(|(o, _)| o.0 == i) {
                    Some((_, a)) => {
                        if a.shape != node.value.shape() {
                            return Err(shape_err!("override {} for leaf of shape {}", a.shape, node.value.shape()));
                        }
                        a.clone()
                    }
                    None => reference::Array::from(&node.value),
                },
                Op::Binary { kind, a, b, .. } => reference::broadcast(v(a), v(b), |p, q| match kind {
                    BinaryKind::Add => p + q,
                    BinaryKind::Sub => p - q,
                    BinaryKind::Mul => p * q,
                }),
                Op::Scale { x, factor } => v(x).map(|p| p * *factor as f64),
                Op::Concat { parts } => reference::concat_channels(&parts.iter().map(v).collect::<Vec<_>>()),
                Op::Slice { x, start } => reference::slice_channels(v(x), *start, node.value.shape().c),
                Op::Conv { x, w, b, spec } => reference::conv2d(v(x), v(w), b.as_ref().map(v), spec),
                Op::TransposeConv { x, w, b, spec } => reference::transpose_conv2d(v(x), v(w), b.as_ref().map(v), spec),
                Op::Deform {
                    x,
                    offsets,
                    mask,
                    w,
                    b,
                    spec,
                } => reference::deform_conv2d(v(x), v(offsets), v(mask), v(w), b.as_ref().map(v), spec),
                Op::LeakyRelu { x, slope } => reference::leaky_relu(v(x), *slope as f64),
                Op::Sigmoid { x } => reference::sigmoid(v(x)),
                Op::AvgPool { x } => reference::global_avg_pool(v(x)),
                Op::ChannelMean { x } => reference::channel_mean(v(x)),
                Op::Linear { x, w, b } => reference::linear(v(x), v(w), b.as_ref().map(v)),
                Op::Sum { x } => reference::sum(v(x)),
                Op::Loss { pred, target, p } => reference::loss_lp(v(target), v(pred), *p),
            };
            vals.push(next);
        }
        Ok(vals.pop().expect("out is on the tape"))
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of named parameters in registration order. Parameters
    /// unreachable from the loss are skipped.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.get(*v).map(|g| (name.as_str(), g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::uniform([2, 3, 4, 5], -2.0, 2.0, 1));
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn deep_sum_chain_stays_linear() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::uniform([1, 2, 3, 3], -1.0, 1.0, 4));
        let mut acc = x;
        for _ in 0..50 {
            let c = tape.constant(Tensor::uniform([1, 2, 3, 3], -1.0, 1.0, 9));
            acc = tape.add(acc, c).unwrap();
        }
        let l = tape.sum(acc);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros([1, 1, 2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::from_vec([1, 1, 1, 2], vec![3.0, 4.0]).unwrap());
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
        let x = tape.constant(Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.scale(x, 2.0);
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn per_channel_broadcast() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full([1, 2, 2, 2], 1.0));
        let f = tape.input(Tensor::from_vec([1, 2, 1, 1], vec![3.0, -2.0]).unwrap());
        let y = tape.mul(x, f).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 3.0, 3.0, 3.0, -2.0, -2.0, -2.0, -2.0]);
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(f).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn incompatible_broadcast_is_shape_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 2, 2, 2]));
        let f = tape.constant(Tensor::zeros([1, 2, 2, 1]));
        assert!(matches!(tape.add(x, f), Err(Error::Shape(_))));
    }

    #[test]
    fn concat_layout_and_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::uniform([1, 2, 3, 3], -1.0, 1.0, 1));
        let b = tape.constant(Tensor::uniform([1, 3, 3, 3], -1.0, 1.0, 2));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(c).c, 5);
        assert_eq!(tape.value(c).channels(2, 3).unwrap(), *tape.value(b));
        let single = tape.concat_channels(&[a]).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
        assert!(matches!(tape.concat_channels(&[]), Err(Error::Argument(_))));
        let odd = tape.constant(Tensor::zeros([1, 1, 2, 3]));
        assert!(matches!(tape.concat_channels(&[a, odd]), Err(Error::Shape(_))));
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).item(), 2.5);
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec([1, 2, 1, 1], vec![2.0, 4.0]).unwrap());
        let m = tape.channel_mean(x).unwrap();
        assert_eq!(tape.value(m).item(), 3.0);
    }

    #[test]
    fn linear_identity_and_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec([1, 3, 1, 1], vec![1.0, -2.0, 0.5]).unwrap());
        let mut eye = Tensor::zeros([3, 3, 1, 1]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let w = tape.constant(eye);
        let y = tape.linear(x, w, None).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 0.5]);
        let w0 = tape.constant(Tensor::zeros([2, 3, 1, 1]));
        let b = tape.constant(Tensor::from_vec([1, 2, 1, 1], vec![7.0, -1.0]).unwrap());
        let y = tape.linear(x, w0, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, -1.0]);
        let bad = tape.constant(Tensor::zeros([2, 4, 1, 1]));
        assert!(tape.linear(x, bad, None).is_err());
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::scalar(3.0));
        let a = tape.mul(w, w).unwrap();
        let b = tape.add(a, w).unwrap();
        let l = tape.sum(b);
        let g = tape.backward(l).unwrap();
        let (name, gw) = g.params().next().unwrap();
        assert_eq!(name, "w");
        assert_eq!(gw.item(), 7.0);
    }

    #[test]
    fn loss_examples() {
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let yh = tape.constant(Tensor::full([1, 1, 2, 2], 0.5));
        let l2 = tape.loss_lp(y, yh, 2).unwrap();
        assert_eq!(tape.value(l2).item(), 0.25);
        let yh = tape.constant(Tensor::full([1, 1, 2, 2], 1.5));
        let l1 = tape.loss_lp(y, yh, 1).unwrap();
        assert_eq!(tape.value(l1).item(), 0.5);
        let same = tape.loss_lp(y, y, 2).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        let odd = tape.constant(Tensor::zeros([1, 1, 2, 3]));
        assert!(tape.loss_lp(y, odd, 2).is_err());
    }

    #[test]
    fn l1_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::from_vec([1, 1, 1, 3], vec![0.0, 1.0, 2.0]).unwrap());
        let yh = tape.input(Tensor::from_vec([1, 1, 1, 3], vec![0.0, 2.0, 1.0]).unwrap());
        let l = tape.loss_lp(y, yh, 1).unwrap();
        let g = tape.backward(l).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(g.get(yh).unwrap().data(), &[0.0, third, -third]);
    }

    #[test]
    fn discarding_tape_leaves_inputs_untouched() {
        let t = Tensor::uniform([1, 2, 4, 4], -1.0, 1.0, 5);
        let before = t.clone();
        {
            let mut tape = Tape::new();
            let x = tape.input(t.clone());
            let y = tape.sigmoid(x);
            let _ = tape.sum(y);
        }
        assert_eq!(t, before);
    }
}
