//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends a node holding its output value; [`Graph::backward`]
//! walks the tape in reverse. Loss-like ops delegate to the `f64` kernels in
//! [`crate::losses`] and [`crate::correlation`] so that the training path and
//! the gradient-checked reference share one implementation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{self, ConvSpec, Geometry};
use super::tensor::Tensor;
use crate::correlation::{self, CorrelationParams};
use crate::losses::{self, SsimConstants};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const NORM_EPS: f32 = 1e-5;

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Geometry,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f32>,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Sigmoid {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    Combine {
        terms: Vec<(Var, f32)>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ChannelGate {
        x: Var,
        gate: Var,
    },
    SpatialGate {
        x: Var,
        gate: Var,
    },
    SoftmaxChannels {
        x: Var,
    },
    Lcem {
        gamma: Var,
        others: [Var; 4],
    },
    KlLogits {
        p: Var,
        q: Var,
    },
    Dice {
        probs: Var,
        target: Vec<f64>,
    },
    Ssim {
        x: Var,
        target: Vec<f64>,
        constants: SsimConstants,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn from_f64(shape: &[usize], v: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, v.into_iter().map(|x| x as f32).collect()).expect("shape preserved")
}

impl Graph {
    /// `training` enables dropout; `seed` drives the dropout masks.
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; gradients are never propagated into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn parameter(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        assert_eq!(xs.len(), 4, "conv3d input must be [C, D, H, W]");
        assert_eq!(ws[1], xs[0], "conv3d channel mismatch");
        let geom = Geometry::new(xs[0], ws[0], spec, [xs[1], xs[2], xs[3]]);
        let out = conv::forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let [d, h, wd] = geom.output;
        let value = Tensor::from_vec(&[geom.cout, d, h, wd], out).expect("conv output");
        let ng = self.any_grad(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].needs_grad);
        self.push(value, Op::Conv { x, w, b, geom }, ng)
    }

    /// Per-channel normalization over spatial positions, no affine terms.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, n) = (t.channels(), t.per_channel());
        let mut out = t.clone();
        let mut inv_std = Vec::with_capacity(c);
        for ch in out.data_mut().chunks_mut(n) {
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + NORM_EPS as f64).sqrt();
            for v in ch.iter_mut() {
                *v = ((*v as f64 - mean) * is) as f32;
            }
            inv_std.push(is as f32);
        }
        debug_assert_eq!(inv_std.len(), c);
        let ng = self.any_grad(&[x]);
        self.push(out, Op::InstanceNorm { x, inv_std }, ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.any_grad(&[x]);
        self.push(out, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid { x }, ng)
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, x: Var, rate: f32) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let mask: Vec<f32> = (0..n)
            .map(|_| {
                if self.rng.random::<f32>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Weighted sum of equally shaped tensors.
    pub fn combine(&mut self, terms: &[(Var, f32)]) -> Var {
        assert!(!terms.is_empty());
        let mut out = Tensor::zeros(self.value(terms[0].0).shape());
        for &(v, c) in terms {
            let t = self.value(v);
            assert_eq!(t.shape(), out.shape(), "combine shape mismatch");
            for (o, x) in out.data_mut().iter_mut().zip(t.data()) {
                *o += c * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.any_grad(&vars);
        self.push(
            out,
            Op::Combine {
                terms: terms.to_vec(),
            },
            ng,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.combine(&[(a, 1.0), (b, 1.0)])
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]).shape().to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &first[1..], "concat spatial mismatch");
            channels += t.channels();
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = channels;
        let out = Tensor::from_vec(&shape, data).expect("concat");
        let ng = self.any_grad(parts);
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            ng,
        )
    }

    /// Nearest-neighbour up-sampling by an integer factor on every spatial axis.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let t = self.value(x);
        let c = t.channels();
        let [d, h, w] = t.dims3();
        let (od, oh, ow) = (d * factor, h * factor, w * factor);
        let mut out = Tensor::zeros(&[c, od, oh, ow]);
        let src = t.data();
        let dst = out.data_mut();
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let srow = ((ch * d + z / factor) * h + y / factor) * w;
                    let drow = ((ch * od + z) * oh + y) * ow;
                    for xo in 0..ow {
                        dst[drow + xo] = src[srow + xo / factor];
                    }
                }
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Upsample { x, factor }, ng)
    }

    /// `[C, ...] -> [C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.per_channel();
        let data = t
            .data()
            .chunks(n)
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32)
            .collect::<Vec<_>>();
        let out = Tensor::from_vec(&[t.channels()], data).expect("pool");
        let ng = self.any_grad(&[x]);
        self.push(out, Op::GlobalAvgPool { x }, ng)
    }

    /// `w: [out, in]`, `b: [out]`, `x: [in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (nout, nin) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.len(), nin, "linear input mismatch");
        let data = (0..nout)
            .map(|o| {
                let row = &wv.data()[o * nin..(o + 1) * nin];
                bv.data()[o] + row.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f32>()
            })
            .collect();
        let out = Tensor::from_vec(&[nout], data).expect("linear");
        let ng = self.any_grad(&[x, w, b]);
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    /// `x[c, s] * gate[c]`
    pub fn channel_gate(&mut self, x: Var, gate: Var) -> Var {
        let (t, g) = (self.value(x), self.value(gate));
        assert_eq!(g.len(), t.channels(), "channel gate length");
        let n = t.per_channel();
        let mut out = t.clone();
        for (ch, gv) in out.data_mut().chunks_mut(n).zip(g.data()) {
            for v in ch {
                *v *= gv;
            }
        }
        let ng = self.any_grad(&[x, gate]);
        self.push(out, Op::ChannelGate { x, gate }, ng)
    }

    /// `x[c, s] * gate[0, s]`
    pub fn spatial_gate(&mut self, x: Var, gate: Var) -> Var {
        let (t, g) = (self.value(x), self.value(gate));
        let n = t.per_channel();
        assert_eq!(g.len(), n, "spatial gate size");
        let mut out = t.clone();
        for ch in out.data_mut().chunks_mut(n) {
            for (v, gv) in ch.iter_mut().zip(g.data()) {
                *v *= gv;
            }
        }
        let ng = self.any_grad(&[x, gate]);
        self.push(out, Op::SpatialGate { x, gate }, ng)
    }

    /// Softmax across channels at every voxel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, n) = (t.channels(), t.per_channel());
        let mut out = t.clone();
        let src = t.data();
        let dst = out.data_mut();
        for s in 0..n {
            let m = (0..c).map(|k| src[k * n + s]).fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for k in 0..c {
                let e = (src[k * n + s] - m).exp();
                dst[k * n + s] = e;
                z += e;
            }
            for k in 0..c {
                dst[k * n + s] /= z;
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(out, Op::SoftmaxChannels { x }, ng)
    }

    /// Linear correlated representation from four source maps; `gamma` is the
    /// flat `[α | β | γ | δ | σ]` vector of length `5·C`.
    pub fn lcem(&mut self, gamma: Var, others: [Var; 4]) -> Var {
        let shape = self.value(others[0]).shape().to_vec();
        let c = shape[0];
        let params = CorrelationParams::from_flat(&to_f64(self.value(gamma)), c)
            .expect("gamma length is 5·C");
        let maps: Vec<Vec<f64>> = others.iter().map(|&v| to_f64(self.value(v))).collect();
        let refs = [&maps[0][..], &maps[1][..], &maps[2][..], &maps[3][..]];
        let out = correlation::lcem_forward_flat(&params, refs, c).expect("lcem shapes");
        let mut vars = others.to_vec();
        vars.push(gamma);
        let ng = self.any_grad(&vars);
        self.push(from_f64(&shape, out), Op::Lcem { gamma, others }, ng)
    }

    /// `KL(softmax(p) ‖ softmax(q))` over all elements.
    pub fn kl_logits(&mut self, p: Var, q: Var) -> Var {
        let (pv, qv) = (to_f64(self.value(p)), to_f64(self.value(q)));
        let loss = correlation::kl_from_logits(&pv, &qv);
        let ng = self.any_grad(&[p, q]);
        self.push(Tensor::scalar(loss as f32), Op::KlLogits { p, q }, ng)
    }

    /// Mean foreground soft-Dice loss; `target` is a one-hot map with the
    /// same `[classes, ...]` layout as `probs`.
    pub fn dice_loss(&mut self, probs: Var, target: &Tensor) -> Var {
        let pv = self.value(probs);
        assert_eq!(pv.shape(), target.shape(), "dice target shape");
        let classes = pv.channels();
        let target = to_f64(target);
        let loss = losses::dice_loss_flat(&to_f64(pv), &target, classes);
        let ng = self.any_grad(&[probs]);
        self.push(Tensor::scalar(loss as f32), Op::Dice { probs, target }, ng)
    }

    pub fn ssim_loss(&mut self, x: Var, target: &Tensor, constants: SsimConstants) -> Var {
        assert_eq!(self.value(x).len(), target.len(), "ssim shape");
        let target = to_f64(target);
        let loss = losses::ssim_loss_flat(&to_f64(self.value(x)), &target, constants);
        let ng = self.any_grad(&[x]);
        self.push(
            Tensor::scalar(loss as f32),
            Op::Ssim {
                x,
                target,
                constants,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar. Gradients are retained for leaves only.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let cg = conv::backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    geom,
                    self.wants(*x),
                );
                if let Some(dx) = cg.input {
                    let t = Tensor::from_vec(self.value(*x).shape(), dx).expect("dx");
                    self.accumulate(grads, *x, t);
                }
                let dw = Tensor::from_vec(self.value(*w).shape(), cg.weight).expect("dw");
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    let db = Tensor::from_vec(self.value(*b).shape(), cg.bias).expect("db");
                    self.accumulate(grads, *b, db);
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let y = &node.value;
                let n = y.per_channel();
                let mut dx = Tensor::zeros(y.shape());
                for (c, is) in inv_std.iter().enumerate() {
                    let ys = &y.data()[c * n..(c + 1) * n];
                    let gs = &g.data()[c * n..(c + 1) * n];
                    let mean_g = gs.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                    let mean_gy =
                        gs.iter().zip(ys).map(|(&a, &b)| (a * b) as f64).sum::<f64>() / n as f64;
                    for ((d, &gv), &yv) in dx.data_mut()[c * n..(c + 1) * n].iter_mut().zip(gs).zip(ys) {
                        *d = (*is as f64 * (gv as f64 - mean_g - yv as f64 * mean_gy)) as f32;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *d *= slope;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (1.0 - y);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let mut dx = g.clone();
                for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                    *d *= m;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Combine { terms } => {
                for &(v, c) in terms {
                    let mut dv = g.clone();
                    if c != 1.0 {
                        dv.scale(c);
                    }
                    self.accumulate(grads, v, dv);
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    let n = self.value(p).len();
                    let dp = Tensor::from_vec(shape, g.data()[offset..offset + n].to_vec())
                        .expect("concat slice");
                    offset += n;
                    self.accumulate(grads, p, dp);
                }
            }
            Op::Upsample { x, factor } => {
                let xv = self.value(*x);
                let c = xv.channels();
                let [d, h, w] = xv.dims3();
                let (od, oh, ow) = (d * factor, h * factor, w * factor);
                let mut dx = Tensor::zeros(xv.shape());
                let dst = dx.data_mut();
                let src = g.data();
                for ch in 0..c {
                    for z in 0..od {
                        for y in 0..oh {
                            let drow = ((ch * d + z / factor) * h + y / factor) * w;
                            let srow = ((ch * od + z) * oh + y) * ow;
                            for xo in 0..ow {
                                dst[drow + xo / factor] += src[srow + xo];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let n = xv.per_channel();
                let mut dx = Tensor::zeros(xv.shape());
                for (ch, gv) in dx.data_mut().chunks_mut(n).zip(g.data()) {
                    ch.fill(gv / n as f32);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (nout, nin) = (wv.shape()[0], wv.shape()[1]);
                let mut dx = Tensor::zeros(xv.shape());
                let mut dw = Tensor::zeros(wv.shape());
                for o in 0..nout {
                    let go = g.data()[o];
                    for k in 0..nin {
                        dx.data_mut()[k] += go * wv.data()[o * nin + k];
                        dw.data_mut()[o * nin + k] = go * xv.data()[k];
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, g.clone());
            }
            Op::ChannelGate { x, gate } => {
                let (xv, gv) = (self.value(*x), self.value(*gate));
                let n = xv.per_channel();
                let mut dx = g.clone();
                let mut dg = Tensor::zeros(gv.shape());
                for c in 0..xv.channels() {
                    let gs = &g.data()[c * n..(c + 1) * n];
                    let xs = &xv.data()[c * n..(c + 1) * n];
                    dg.data_mut()[c] = gs.iter().zip(xs).map(|(a, b)| (a * b) as f64).sum::<f64>() as f32;
                    for d in &mut dx.data_mut()[c * n..(c + 1) * n] {
                        *d *= gv.data()[c];
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gate, dg);
            }
            Op::SpatialGate { x, gate } => {
                let (xv, gv) = (self.value(*x), self.value(*gate));
                let n = xv.per_channel();
                let mut dx = g.clone();
                let mut dg = Tensor::zeros(gv.shape());
                for c in 0..xv.channels() {
                    let range = c * n..(c + 1) * n;
                    for s in 0..n {
                        dg.data_mut()[s] += g.data()[range.start + s] * xv.data()[range.start + s];
                    }
                    for (d, gg) in dx.data_mut()[range].iter_mut().zip(gv.data()) {
                        *d *= gg;
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gate, dg);
            }
            Op::SoftmaxChannels { x } => {
                let y = &node.value;
                let (c, n) = (y.channels(), y.per_channel());
                let mut dx = Tensor::zeros(y.shape());
                for s in 0..n {
                    let dot: f32 = (0..c).map(|k| g.data()[k * n + s] * y.data()[k * n + s]).sum();
                    for k in 0..c {
                        let idx = k * n + s;
                        dx.data_mut()[idx] = y.data()[idx] * (g.data()[idx] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Lcem { gamma, others } => {
                let shape = self.value(others[0]).shape().to_vec();
                let c = shape[0];
                let params = CorrelationParams::from_flat(&to_f64(self.value(*gamma)), c).expect("gamma");
                let maps: Vec<Vec<f64>> = others.iter().map(|&v| to_f64(self.value(v))).collect();
                let refs = [&maps[0][..], &maps[1][..], &maps[2][..], &maps[3][..]];
                let lg = correlation::lcem_backward_flat(&params, refs, &to_f64(g), c);
                self.accumulate(grads, *gamma, from_f64(self.value(*gamma).shape(), lg.params.to_flat()));
                for (v, d) in others.iter().zip(lg.sources) {
                    self.accumulate(grads, *v, from_f64(&shape, d));
                }
            }
            Op::KlLogits { p, q } => {
                let (pv, qv) = (to_f64(self.value(*p)), to_f64(self.value(*q)));
                let (mut dp, mut dq) = correlation::kl_from_logits_grad(&pv, &qv);
                let up = g.item() as f64;
                dp.iter_mut().chain(dq.iter_mut()).for_each(|v| *v *= up);
                self.accumulate(grads, *p, from_f64(self.value(*p).shape(), dp));
                self.accumulate(grads, *q, from_f64(self.value(*q).shape(), dq));
            }
            Op::Dice { probs, target } => {
                let pv = self.value(*probs);
                let up = g.item() as f64;
                let mut d = losses::dice_loss_grad_flat(&to_f64(pv), target, pv.channels());
                d.iter_mut().for_each(|v| *v *= up);
                self.accumulate(grads, *probs, from_f64(pv.shape(), d));
            }
            Op::Ssim { x, target, constants } => {
                let xv = self.value(*x);
                let up = g.item() as f64;
                let mut d = losses::ssim_loss_grad_flat(&to_f64(xv), target, *constants);
                d.iter_mut().for_each(|v| *v *= up);
                self.accumulate(grads, *x, from_f64(xv.shape(), d));
            }
        }
    }
}
