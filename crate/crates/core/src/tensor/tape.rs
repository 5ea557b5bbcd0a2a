//! Differentiation tape.
//!
//! Forward primitives append nodes; `backward` walks the tape in reverse and
//! appends the gradient computation as ordinary taped primitives. Because
//! gradients live on the same tape, a scalar built from them (a gradient
//! norm, say) can be differentiated again — the second-order path needed by
//! the Wasserstein gradient penalty.
//!
//! A tape is single-threaded by contract: forward values are immutable once
//! recorded and parent ids are always smaller than their node's id.

use super::kernels::{conv2d_raw, conv2d_weight_grad_raw, conv_transpose2d_raw};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    /// Differentiation target (parameter or input).
    Leaf,
    /// Data the graph treats as fixed: targets, masks, detached values.
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `a * x + b` elementwise with scalar coefficients.
    Affine {
        x: Var,
        a: f64,
    },
    Abs(Var),
    Log(Var),
    Sqrt(Var),
    Softplus(Var),
    Relu(Var),
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Tanh(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    /// Kernel gradient of `Conv2d`; third member of the closed conv set.
    WeightGrad {
        x: Var,
        dy: Var,
        stride: usize,
        pad: usize,
    },
    ConcatC(Var, Var),
    SliceC {
        x: Var,
        from: usize,
        to: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    BroadcastFull(Var),
    /// NCHW -> NC11 mean over the spatial plane.
    SpatialMean(Var),
    SpatialSum(Var),
    BroadcastSpatial(Var),
    /// C -> NCHW.
    ChannelBroadcast(Var),
    /// NCHW -> C.
    ChannelReduceSum(Var),
    /// NCHW -> N111.
    PerSampleSum(Var),
    BroadcastPerSample(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient map produced by [`Tape::backward`]: node id -> gradient node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, if `v` was reached.
    pub fn wrt(&self, v: Var) -> Option<Var> {
        self.grads.get(v.0).copied().flatten()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a rank-1 singleton node.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Differentiation target (parameter or graph input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Fixed data: targets, masks, anything the graph treats as given.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Re-enter a value as fixed data, cutting its history.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ── elementwise binary (equal shapes, or scalar on either side) ──

    fn binary_shape(&self, context: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(sa.to_vec());
        }
        if self.value(b).is_scalar() {
            return Ok(sa.to_vec());
        }
        if self.value(a).is_scalar() {
            return Ok(sb.to_vec());
        }
        Err(Error::shape(context, format!("{sa:?}"), format!("{sb:?}")))
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor {
                shape: ta.shape().to_vec(),
                data,
            }
        } else if tb.is_scalar() {
            let s = tb.data()[0];
            let data = ta.data().iter().map(|&x| f(x, s)).collect();
            Tensor {
                shape: ta.shape().to_vec(),
                data,
            }
        } else {
            let s = ta.data()[0];
            let data = tb.data().iter().map(|&y| f(s, y)).collect();
            Tensor {
                shape: tb.shape().to_vec(),
                data,
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape("add", a, b)?;
        let value = self.zip_broadcast(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape("sub", a, b)?;
        let value = self.zip_broadcast(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape("mul", a, b)?;
        let value = self.zip_broadcast(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape("div", a, b)?;
        let value = self.zip_broadcast(a, b, |x, y| x / y);
        Ok(self.push(value, Op::Div(a, b)))
    }

    /// `a * x + b` with scalar coefficients.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| a * v + b).collect();
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        self.push(value, Op::Affine { x, a })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    // ── elementwise unary ──

    fn map_unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        self.push(value, op)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Abs(x), f64::abs)
    }

    /// Natural log; rejects non-positive inputs with the offending index.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(index) = self.value(x).data().iter().position(|&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!(
                    "argument {} is not strictly positive",
                    self.value(x).data()[index]
                ),
                index,
            });
        }
        Ok(self.map_unary(x, Op::Log(x), f64::ln))
    }

    /// Square root; rejects negative inputs with the offending index.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(index) = self.value(x).data().iter().position(|&v| v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: format!("argument {} is negative", self.value(x).data()[index]),
                index,
            });
        }
        Ok(self.map_unary(x, Op::Sqrt(x), f64::sqrt))
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Softplus(x), |v| {
            v.max(0.0) + (-v.abs()).exp().ln_1p()
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map_unary(x, Op::LeakyRelu { x, slope }, |v| {
            if v >= 0.0 {
                v
            } else {
                slope * v
            }
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        // Saturation-safe in both tails.
        self.map_unary(x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    // ── convolution family ──

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = conv2d_raw(self.value(x), self.value(k), stride, pad)?;
        Ok(self.push(value, Op::Conv2d { x, k, stride, pad }))
    }

    pub fn conv_transpose2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = conv_transpose2d_raw(self.value(x), self.value(k), stride, pad, None)?;
        Ok(self.push(value, Op::ConvT2d { x, k, stride, pad }))
    }

    fn conv_transpose2d_sized(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let value = conv_transpose2d_raw(self.value(x), self.value(k), stride, pad, Some(out_hw))?;
        Ok(self.push(value, Op::ConvT2d { x, k, stride, pad }))
    }

    fn conv2d_weight_grad(
        &mut self,
        x: Var,
        dy: Var,
        stride: usize,
        pad: usize,
        kh: usize,
        kw: usize,
    ) -> Result<Var> {
        let value = conv2d_weight_grad_raw(self.value(x), self.value(dy), stride, pad, kh, kw)?;
        Ok(self.push(value, Op::WeightGrad { x, dy, stride, pad }))
    }

    // ── structure ──

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("n/h/w {na}x{ha}x{wa}"),
                format!("{nb}x{hb}x{wb}"),
            ));
        }
        let ta = self.value(a);
        let tb = self.value(b);
        let plane = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            data.extend_from_slice(&ta.data()[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&tb.data()[n * cb * plane..(n + 1) * cb * plane]);
        }
        let value = Tensor {
            shape: vec![na, ca + cb, ha, wa],
            data,
        };
        Ok(self.push(value, Op::ConcatC(a, b)))
    }

    /// Channel window `[from, to)` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if from >= to || to > c {
            return Err(Error::shape(
                "slice_channels",
                format!("window within 0..{c}"),
                format!("{from}..{to}"),
            ));
        }
        let t = self.value(x);
        let plane = h * w;
        let span = to - from;
        let mut data = Vec::with_capacity(n * span * plane);
        for b in 0..n {
            let base = (b * c + from) * plane;
            data.extend_from_slice(&t.data()[base..base + span * plane]);
        }
        let value = Tensor {
            shape: vec![n, span, h, w],
            data,
        };
        Ok(self.push(value, Op::SliceC { x, from, to }))
    }

    // ── reductions and broadcasts ──

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Degenerate("sum over empty tensor".into()));
        }
        let s = t.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x)))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Degenerate("mean over empty tensor".into()));
        }
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(m), Op::MeanAll(x)))
    }

    pub fn broadcast_full(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if !t.is_scalar() {
            return Err(Error::shape(
                "broadcast_full",
                "scalar",
                format!("{:?}", t.shape()),
            ));
        }
        let value = Tensor::full(shape, t.data()[0]);
        Ok(self.push(value, Op::BroadcastFull(x)))
    }

    /// NCHW -> NC11 spatial mean.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let t = self.value(x);
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n * c {
            data.push(t.data()[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64);
        }
        let value = Tensor {
            shape: vec![n, c, 1, 1],
            data,
        };
        Ok(self.push(value, Op::SpatialMean(x)))
    }

    pub fn spatial_sum(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let t = self.value(x);
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n * c {
            data.push(t.data()[i * plane..(i + 1) * plane].iter().sum::<f64>());
        }
        let value = Tensor {
            shape: vec![n, c, 1, 1],
            data,
        };
        Ok(self.push(value, Op::SpatialSum(x)))
    }

    /// NC11 -> NCHW replication.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c, h1, w1) = self.value(x).dims4()?;
        if h1 != 1 || w1 != 1 {
            return Err(Error::shape(
                "broadcast_spatial",
                "NC11",
                format!("{:?}", self.shape(x)),
            ));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n * c {
            data.extend(std::iter::repeat_n(t.data()[i], h * w));
        }
        let value = Tensor {
            shape: vec![n, c, h, w],
            data,
        };
        Ok(self.push(value, Op::BroadcastSpatial(x)))
    }

    /// C -> NCHW replication (per-channel scale/shift vectors).
    pub fn channel_broadcast(&mut self, x: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 1 {
            return Err(Error::shape(
                "channel_broadcast",
                "rank-1 [C]",
                format!("{:?}", t.shape()),
            ));
        }
        let c = t.shape()[0];
        let mut data = Vec::with_capacity(n * c * h * w);
        for _ in 0..n {
            for &v in t.data() {
                data.extend(std::iter::repeat_n(v, h * w));
            }
        }
        let value = Tensor {
            shape: vec![n, c, h, w],
            data,
        };
        Ok(self.push(value, Op::ChannelBroadcast(x)))
    }

    /// NCHW -> C, summing batch and spatial dims.
    pub fn channel_reduce_sum(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let t = self.value(x);
        let plane = h * w;
        let mut data = vec![0.0; c];
        for b in 0..n {
            for (ch, slot) in data.iter_mut().enumerate() {
                let base = (b * c + ch) * plane;
                *slot += t.data()[base..base + plane].iter().sum::<f64>();
            }
        }
        let value = Tensor {
            shape: vec![c],
            data,
        };
        Ok(self.push(value, Op::ChannelReduceSum(x)))
    }

    /// NCHW -> N111, summing channels and spatial dims.
    pub fn per_sample_sum(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let t = self.value(x);
        let per = c * h * w;
        let mut data = Vec::with_capacity(n);
        for b in 0..n {
            data.push(t.data()[b * per..(b + 1) * per].iter().sum::<f64>());
        }
        let value = Tensor {
            shape: vec![n, 1, 1, 1],
            data,
        };
        Ok(self.push(value, Op::PerSampleSum(x)))
    }

    /// N111 -> NCHW replication.
    pub fn broadcast_per_sample(&mut self, x: Var, c: usize, h: usize, w: usize) -> Result<Var> {
        let (n, c1, h1, w1) = self.value(x).dims4()?;
        if c1 != 1 || h1 != 1 || w1 != 1 {
            return Err(Error::shape(
                "broadcast_per_sample",
                "N111",
                format!("{:?}", self.shape(x)),
            ));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            data.extend(std::iter::repeat_n(t.data()[b], c * h * w));
        }
        let value = Tensor {
            shape: vec![n, c, h, w],
            data,
        };
        Ok(self.push(value, Op::BroadcastPerSample(x)))
    }

    // ── compositions ──

    /// Per-sample, per-channel normalization to zero mean / unit variance,
    /// then `gamma * xn + beta`. Spatial size 1x1 is rejected (the variance
    /// degenerates).
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h * w < 2 {
            return Err(Error::Degenerate(format!(
                "instance_norm on {h}x{w} spatial plane"
            )));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "instance_norm",
                    format!("{name} of shape [{c}]"),
                    format!("{:?}", self.shape(v)),
                ));
            }
        }
        let mu = self.spatial_mean(x)?;
        let mu_b = self.broadcast_spatial(mu, h, w)?;
        let centered = self.sub(x, mu_b)?;
        let sq = self.square(centered)?;
        let var = self.spatial_mean(sq)?;
        let var_eps = self.affine(var, 1.0, eps);
        let std = self.sqrt(var_eps)?;
        let std_b = self.broadcast_spatial(std, h, w)?;
        let normed = self.div(centered, std_b)?;
        let gamma_b = self.channel_broadcast(gamma, n, h, w)?;
        let beta_b = self.channel_broadcast(beta, n, h, w)?;
        let scaled = self.mul(normed, gamma_b)?;
        self.add(scaled, beta_b)
    }

    /// Inverted dropout: zero with probability `p`, survivors scaled by
    /// `1/(1-p)`. Identity when `train` is false or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngStream, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!(
                "dropout p={p} outside [0, 1)"
            )));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let shape = self.shape(x).to_vec();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| if rng.uniform() >= p { keep } else { 0.0 })
            .collect();
        let mask = self.constant(Tensor { shape, data: mask });
        self.mul(x, mask)
    }

    // ── backward ──

    /// Collapse a broadcasted gradient back onto a parent's shape (only the
    /// scalar-broadcast case needs work).
    fn reduce_to(&mut self, g: Var, parent: Var) -> Result<Var> {
        if self.shape(g) == self.shape(parent) {
            return Ok(g);
        }
        if self.value(parent).is_scalar() {
            let s = self.sum_all(g)?;
            if self.shape(s) != self.shape(parent) {
                // Scalars are always shaped [1] in this engine.
                return Err(Error::Tape(format!(
                    "scalar parent shape {:?}",
                    self.shape(parent)
                )));
            }
            return Ok(s);
        }
        Err(Error::Tape(format!(
            "cannot reduce gradient of shape {:?} to {:?}",
            self.shape(g),
            self.shape(parent)
        )))
    }

    fn accumulate(&mut self, slot: &mut Option<Var>, v: Var) -> Result<()> {
        *slot = Some(match *slot {
            None => v,
            Some(prev) => self.add(prev, v)?,
        });
        Ok(())
    }

    /// Reverse pass from a scalar root. Gradient tensors are appended to this
    /// same tape, so any scalar formed from them can be differentiated again.
    /// Forward values recorded before the call are never touched.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::shape(
                "backward",
                "scalar root",
                format!("{:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Var>> = vec![None; self.nodes.len()];
        let seed = self.constant(Tensor::scalar(1.0));
        grads[root.0] = Some(seed);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id] else { continue };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    let ga = self.reduce_to(g, a)?;
                    self.accumulate(&mut grads[a.0], ga)?;
                    let gb = self.reduce_to(g, b)?;
                    self.accumulate(&mut grads[b.0], gb)?;
                }
                Op::Sub(a, b) => {
                    let ga = self.reduce_to(g, a)?;
                    self.accumulate(&mut grads[a.0], ga)?;
                    let ng = self.neg(g);
                    let gb = self.reduce_to(ng, b)?;
                    self.accumulate(&mut grads[b.0], gb)?;
                }
                Op::Mul(a, b) => {
                    let gxb = self.mul(g, b)?;
                    let ga = self.reduce_to(gxb, a)?;
                    self.accumulate(&mut grads[a.0], ga)?;
                    let gxa = self.mul(g, a)?;
                    let gb = self.reduce_to(gxa, b)?;
                    self.accumulate(&mut grads[b.0], gb)?;
                }
                Op::Div(a, b) => {
                    let out = Var(id);
                    let ga_full = self.div(g, b)?;
                    let ga = self.reduce_to(ga_full, a)?;
                    self.accumulate(&mut grads[a.0], ga)?;
                    // d/db (a/b) = -out/b
                    let ob = self.div(out, b)?;
                    let gb_full = self.mul(g, ob)?;
                    let gb_neg = self.neg(gb_full);
                    let gb = self.reduce_to(gb_neg, b)?;
                    self.accumulate(&mut grads[b.0], gb)?;
                }
                Op::Affine { x, a } => {
                    let gx = self.affine(g, a, 0.0);
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::Abs(x) => {
                    // signum is locally constant; captured as fixed data.
                    let sign: Vec<f64> = self
                        .value(x)
                        .data()
                        .iter()
                        .map(|&v| if v >= 0.0 { 1.0 } else { -1.0 })
                        .collect();
                    let shape = self.shape(x).to_vec();
                    let mask = self.constant(Tensor { shape, data: sign });
                    let gx = self.mul(g, mask)?;
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::Log(x) => {
                    let gx = self.div(g, x)?;
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::Sqrt(x) => {
                    let out = Var(id);
                    let two_y = self.affine(out, 2.0, 0.0);
                    let gx = self.div(g, two_y)?;
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::Softplus(x) => {
                    let s = self.sigmoid(x);
                    let gx = self.mul(g, s)?;
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::Relu(x) => {
                    let mask: Vec<f64> = self
                        .value(x)
                        .data()
                        .iter()
                        .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                        .collect();
                    let shape = self.shape(x).to_vec();
                    let mask = self.constant(Tensor { shape, data: mask });
                    let gx = self.mul(g, mask)?;
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::LeakyRelu { x, slope } => {
                    let mask: Vec<f64> = self
                        .value(x)
                        .data()
                        .iter()
                        .map(|&v| if v >= 0.0 { 1.0 } else { slope })
                        .collect();
                    let shape = self.shape(x).to_vec();
                    let mask = self.constant(Tensor { shape, data: mask });
                    let gx = self.mul(g, mask)?;
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::Tanh(x) => {
                    let out = Var(id);
                    let y2 = self.square(out)?;
                    let one_minus = self.affine(y2, -1.0, 1.0);
                    let gx = self.mul(g, one_minus)?;
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::Sigmoid(x) => {
                    let out = Var(id);
                    let one_minus = self.affine(out, -1.0, 1.0);
                    let dydx = self.mul(out, one_minus)?;
                    let gx = self.mul(g, dydx)?;
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::Conv2d { x, k, stride, pad } => {
                    let (_, _, h, w) = self.value(x).dims4()?;
                    let (_, _, kh, kw) = self.value(k).dims4()?;
                    let gx = self.conv_transpose2d_sized(g, k, stride, pad, (h, w))?;
                    self.accumulate(&mut grads[x.0], gx)?;
                    let gk = self.conv2d_weight_grad(x, g, stride, pad, kh, kw)?;
                    self.accumulate(&mut grads[k.0], gk)?;
                }
                Op::ConvT2d { x, k, stride, pad } => {
                    let (_, _, kh, kw) = self.value(k).dims4()?;
                    let gx = self.conv2d(g, k, stride, pad)?;
                    if self.shape(gx) != self.shape(x) {
                        return Err(Error::Tape("conv_transpose2d backward shape drift".into()));
                    }
                    self.accumulate(&mut grads[x.0], gx)?;
                    let gk = self.conv2d_weight_grad(g, x, stride, pad, kh, kw)?;
                    self.accumulate(&mut grads[k.0], gk)?;
                }
                Op::WeightGrad { x, dy, stride, pad } => {
                    // Trilinear form: with the upstream kernel-shaped gradient
                    // as the kernel, the input and output-gradient roles swap
                    // back through the other two conv primitives.
                    let (_, _, h, w) = self.value(x).dims4()?;
                    let gx = self.conv_transpose2d_sized(dy, g, stride, pad, (h, w))?;
                    self.accumulate(&mut grads[x.0], gx)?;
                    let gdy = self.conv2d(x, g, stride, pad)?;
                    if self.shape(gdy) != self.shape(dy) {
                        return Err(Error::Tape("weight_grad backward shape drift".into()));
                    }
                    self.accumulate(&mut grads[dy.0], gdy)?;
                }
                Op::ConcatC(a, b) => {
                    let ca = self.value(a).dims4()?.1;
                    let cb = self.value(b).dims4()?.1;
                    let ga = self.slice_channels(g, 0, ca)?;
                    self.accumulate(&mut grads[a.0], ga)?;
                    let gb = self.slice_channels(g, ca, ca + cb)?;
                    self.accumulate(&mut grads[b.0], gb)?;
                }
                Op::SliceC { x, from, to } => {
                    let (n, c, h, w) = self.value(x).dims4()?;
                    let mut gx = g;
                    if from > 0 {
                        let zeros = self.constant(Tensor::zeros(&[n, from, h, w]));
                        gx = self.concat_channels(zeros, gx)?;
                    }
                    if to < c {
                        let zeros = self.constant(Tensor::zeros(&[n, c - to, h, w]));
                        gx = self.concat_channels(gx, zeros)?;
                    }
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::SumAll(x) => {
                    let shape = self.shape(x).to_vec();
                    let gx = self.broadcast_full(g, &shape)?;
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::MeanAll(x) => {
                    let shape = self.shape(x).to_vec();
                    let numel = self.value(x).numel() as f64;
                    let gb = self.broadcast_full(g, &shape)?;
                    let gx = self.affine(gb, 1.0 / numel, 0.0);
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::BroadcastFull(x) => {
                    let gx = self.sum_all(g)?;
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::SpatialMean(x) => {
                    let (_, _, h, w) = self.value(x).dims4()?;
                    let gb = self.broadcast_spatial(g, h, w)?;
                    let gx = self.affine(gb, 1.0 / (h * w) as f64, 0.0);
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::SpatialSum(x) => {
                    let (_, _, h, w) = self.value(x).dims4()?;
                    let gx = self.broadcast_spatial(g, h, w)?;
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::BroadcastSpatial(x) => {
                    let gx = self.spatial_sum(g)?;
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::ChannelBroadcast(x) => {
                    let gx = self.channel_reduce_sum(g)?;
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::ChannelReduceSum(x) => {
                    let (n, _, h, w) = self.value(x).dims4()?;
                    let gx = self.channel_broadcast(g, n, h, w)?;
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::PerSampleSum(x) => {
                    let (_, c, h, w) = self.value(x).dims4()?;
                    let gx = self.broadcast_per_sample(g, c, h, w)?;
                    self.accumulate(&mut grads[x.0], gx)?;
                }
                Op::BroadcastPerSample(x) => {
                    let gx = self.per_sample_sum(g)?;
                    self.accumulate(&mut grads[x.0], gx)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}
