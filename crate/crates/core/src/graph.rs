//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! read from a borrowed [`ParamStore`] and enter the tape once per graph, so
//! weights reused across recursion steps accumulate their gradients.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::kernels::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Relu(Var),
    Prelu(Var, Var),
    Abs(Var),
    Concat(Vec<Var>),
    GlobalAvg(Var),
    GlobalMax(Var, Vec<usize>),
    ChannelMean(Var),
    ChannelMax(Var, Vec<usize>),
    Upsample(Var, usize),
    SumAll(Var),
    SmoothL1 {
        pred: Var,
        target: Tensor<T>,
        weight: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    tags: Vec<(String, Var)>,
}

fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element strides of `shape` when read as `out`, with zero on broadcast axes.
fn broadcast_strides(shape: Shape, out: Shape) -> [usize; 4] {
    let dense = [
        shape[1] * shape[2] * shape[3],
        shape[2] * shape[3],
        shape[3],
        1,
    ];
    let mut s = [0; 4];
    for d in 0..4 {
        s[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { dense[d] };
    }
    s
}

fn zip_broadcast<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out: Shape,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape() == out && b.shape() == out {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(out, data);
    }
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(out.iter().product());
    for n in 0..out[0] {
        for c in 0..out[1] {
            for y in 0..out[2] {
                let ra = n * sa[0] + c * sa[1] + y * sa[2];
                let rb = n * sb[0] + c * sb[1] + y * sb[2];
                for x in 0..out[3] {
                    data.push(f(ad[ra + x * sa[3]], bd[rb + x * sb[3]]));
                }
            }
        }
    }
    Tensor::from_vec(out, data)
}

/// Sum `grad` down to `shape` along broadcast axes.
fn reduce_to<T: Real>(grad: Tensor<T>, shape: Shape) -> Tensor<T> {
    if grad.shape() == shape {
        return grad;
    }
    let gs = grad.shape();
    let st = broadcast_strides(shape, gs);
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    let mut i = 0;
    for n in 0..gs[0] {
        for c in 0..gs[1] {
            for y in 0..gs[2] {
                let r = n * st[0] + c * st[1] + y * st[2];
                for x in 0..gs[3] {
                    let o = r + x * st[3];
                    od[o] = od[o] + grad.data()[i];
                    i += 1;
                }
            }
        }
    }
    out
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Smooth-L1 penalty: quadratic below |x| = 1, linear above.
pub fn smooth_l1<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    if x.abs() < T::one() {
        half * x * x
    } else {
        x.abs() - half
    }
}

fn smooth_l1_slope<T: Real>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            tags: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Branch taken at every non-differentiable point: the sign of each
    /// ReLU, PReLU and abs input and the winner of each max reduction.
    /// Finite differences are only meaningful between evaluations that
    /// share a pattern.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::Prelu(a, _) | Op::Abs(a) => {
                    out.extend(self.value(*a).data().iter().map(|&v| usize::from(v >= T::zero())));
                }
                Op::GlobalMax(_, arg) | Op::ChannelMax(_, arg) => out.extend_from_slice(arg),
                _ => {}
            }
        }
        out
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, &[])
    }

    /// An input whose gradient is tracked and reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = self.push(value, Op::Param, &[]);
        self.param_vars.insert(id, v);
        v
    }

    /// Label a value for diagnostics.
    pub fn tag(&mut self, name: impl Into<String>, v: Var) {
        self.tags.push((name.into(), v));
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs[1], ws[1], "conv2d: input has {} channels, kernel expects {}", xs[1], ws[1]);
        assert_eq!(ws[2], ws[3], "conv2d: square kernels only");
        let geom = ConvGeometry {
            in_channels: ws[1],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            pad,
            in_h: xs[2],
            in_w: xs[3],
        };
        let value = {
            let bias = b.map(|b| self.value(b));
            conv2d_forward(self.value(x), self.value(w), bias, &geom)
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv { x, w, b, geom }, &inputs)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb)
            .unwrap_or_else(|| panic!("incompatible shapes {sa:?} and {sb:?}"));
        let value = zip_broadcast(self.value(a), self.value(b), out, f);
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).map(|v| v * k);
        self.push(value, Op::Scale(a, k), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(a), &[a])
    }

    /// Parametric ReLU with a broadcastable slope tensor.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        let out = self.shape(x);
        let value = zip_broadcast(self.value(x), self.value(slope), out, |v, a| {
            if v >= T::zero() {
                v
            } else {
                a * v
            }
        });
        self.push(value, Op::Prelu(x, slope), &[x, slope])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.abs());
        self.push(value, Op::Abs(a), &[a])
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let s0 = self.shape(parts[0]);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s[0] == s0[0] && s[2] == s0[2] && s[3] == s0[3],
                "concat: {s:?} does not match {s0:?}"
            );
            channels += s[1];
        }
        let out = [s0[0], channels, s0[2], s0[3]];
        let mut data = Vec::with_capacity(out.iter().product());
        for n in 0..s0[0] {
            for &p in parts {
                data.extend_from_slice(self.value(p).sample(n));
            }
        }
        self.push(Tensor::from_vec(out, data), Op::Concat(parts.to_vec()), parts)
    }

    /// Spatial mean per channel: N×C×H×W → N×C×1×1.
    pub fn global_avg(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let [n, c, _, _] = t.shape();
        let denom = T::from_usize(t.plane_len()).unwrap();
        let mut data = Vec::with_capacity(n * c);
        for s in 0..n {
            for ch in 0..c {
                data.push(t.plane(s, ch).iter().copied().sum::<T>() / denom);
            }
        }
        self.push(Tensor::from_vec([n, c, 1, 1], data), Op::GlobalAvg(a), &[a])
    }

    /// Spatial max per channel: N×C×H×W → N×C×1×1.
    pub fn global_max(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let [n, c, _, _] = t.shape();
        let plane = t.plane_len();
        let mut data = Vec::with_capacity(n * c);
        let mut arg = Vec::with_capacity(n * c);
        for s in 0..n {
            for ch in 0..c {
                let p = t.plane(s, ch);
                let mut best = 0;
                for (i, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = i;
                    }
                }
                data.push(p[best]);
                arg.push((s * c + ch) * plane + best);
            }
        }
        self.push(Tensor::from_vec([n, c, 1, 1], data), Op::GlobalMax(a, arg), &[a])
    }

    /// Mean over channels: N×C×H×W → N×1×H×W.
    pub fn channel_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let [n, c, h, w] = t.shape();
        let denom = T::from_usize(c).unwrap();
        let mut out = Tensor::zeros([n, 1, h, w]);
        for s in 0..n {
            let dst = &mut out.data_mut()[s * h * w..(s + 1) * h * w];
            for ch in 0..c {
                for (d, &v) in dst.iter_mut().zip(t.plane(s, ch)) {
                    *d = *d + v;
                }
            }
            dst.iter_mut().for_each(|d| *d = *d / denom);
        }
        self.push(out, Op::ChannelMean(a), &[a])
    }

    /// Max over channels: N×C×H×W → N×1×H×W.
    pub fn channel_max(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let [n, c, h, w] = t.shape();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * plane);
        let mut arg = Vec::with_capacity(n * plane);
        for s in 0..n {
            for i in 0..plane {
                let mut best = 0;
                let mut bv = t.plane(s, 0)[i];
                for ch in 1..c {
                    let v = t.plane(s, ch)[i];
                    if v > bv {
                        bv = v;
                        best = ch;
                    }
                }
                data.push(bv);
                arg.push((s * c + best) * plane + i);
            }
        }
        self.push(Tensor::from_vec([n, 1, h, w], data), Op::ChannelMax(a, arg), &[a])
    }

    /// Nearest-neighbour spatial upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Var {
        if factor == 1 {
            return a;
        }
        let t = self.value(a);
        let [n, c, h, w] = t.shape();
        let (ho, wo) = (h * factor, w * factor);
        let mut data = Vec::with_capacity(n * c * ho * wo);
        for s in 0..n {
            for ch in 0..c {
                let p = t.plane(s, ch);
                for y in 0..ho {
                    let row = &p[(y / factor) * w..(y / factor + 1) * w];
                    for x in 0..wo {
                        data.push(row[x / factor]);
                    }
                }
            }
        }
        self.push(
            Tensor::from_vec([n, c, ho, wo], data),
            Op::Upsample(a, factor),
            &[a],
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    /// `Σ weight · smooth_l1(pred − target)` as a scalar.
    pub fn smooth_l1_loss(&mut self, pred: Var, target: Tensor<T>, weight: Tensor<T>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "loss: prediction/target shape mismatch");
        assert_eq!(p.shape(), weight.shape(), "loss: prediction/weight shape mismatch");
        let total: T = p
            .data()
            .iter()
            .zip(target.data())
            .zip(weight.data())
            .map(|((&a, &b), &w)| if w == T::zero() { T::zero() } else { w * smooth_l1(a - b) })
            .sum();
        self.push(
            Tensor::scalar(total),
            Op::SmoothL1 {
                pred,
                target,
                weight,
            },
            &[pred],
        )
    }

    /// Min/max/mean/finiteness of every tagged value, one line each.
    pub fn diagnostics(&self) -> String {
        let mut out = String::new();
        for (name, v) in &self.tags {
            let t = self.value(*v);
            let (lo, hi) = t.min_max();
            let _ = writeln!(
                out,
                "{name}: shape={:?} min={:.4e} max={:.4e} mean={:.4e} finite={}",
                t.shape(),
                lo.as_f64(),
                hi.as_f64(),
                t.mean().as_f64(),
                t.all_finite()
            );
        }
        out
    }

    /// Values tagged with `name`, in recording order.
    pub fn tagged(&self, name: &str) -> Vec<Var> {
        self.tags
            .iter()
            .filter(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .collect()
    }

    /// Back-propagate from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut kept: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, g: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Input | Op::Param => {
                    kept[i] = Some(dy);
                }
                Op::Conv { x, w, b, geom } => {
                    let need_x = self.nodes[x.0].needs_grad;
                    let cg = conv2d_backward(self.value(*x), self.value(*w), &dy, geom, need_x);
                    if let Some(dx) = cg.input {
                        send(*x, dx, &mut grads);
                    }
                    send(*w, cg.weight, &mut grads);
                    if let Some(b) = b {
                        send(*b, cg.bias, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, reduce_to(dy.clone(), self.shape(*a)), &mut grads);
                    send(*b, reduce_to(dy, self.shape(*b)), &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*a, reduce_to(dy.clone(), self.shape(*a)), &mut grads);
                    send(*b, reduce_to(dy.map(|v| -v), self.shape(*b)), &mut grads);
                }
                Op::Mul(a, b) => {
                    let out = dy.shape();
                    if self.nodes[a.0].needs_grad {
                        let da = zip_broadcast(&dy, self.value(*b), out, |g, y| g * y);
                        send(*a, reduce_to(da, self.shape(*a)), &mut grads);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = zip_broadcast(&dy, self.value(*a), out, |g, x| g * x);
                        send(*b, reduce_to(db, self.shape(*b)), &mut grads);
                    }
                }
                Op::Scale(a, k) => send(*a, dy.map(|g| g * *k), &mut grads),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let dx = zip_broadcast(&dy, y, dy.shape(), |g, s| g * s * (T::one() - s));
                    send(*a, dx, &mut grads);
                }
                Op::Relu(a) => {
                    let dx = zip_broadcast(&dy, self.value(*a), dy.shape(), |g, x| {
                        if x > T::zero() {
                            g
                        } else {
                            T::zero()
                        }
                    });
                    send(*a, dx, &mut grads);
                }
                Op::Prelu(x, slope) => {
                    let xv = self.value(*x);
                    let sv = self.value(*slope);
                    let out = xv.shape();
                    if self.nodes[x.0].needs_grad {
                        let scaled = zip_broadcast(&dy, sv, out, |g, a| g * a);
                        let data = dy
                            .data()
                            .iter()
                            .zip(scaled.data())
                            .zip(xv.data())
                            .map(|((&g, &ga), &v)| if v >= T::zero() { g } else { ga })
                            .collect();
                        send(*x, Tensor::from_vec(out, data), &mut grads);
                    }
                    let ds = zip_broadcast(&dy, xv, out, |g, v| if v >= T::zero() { T::zero() } else { g * v });
                    send(*slope, reduce_to(ds, sv.shape()), &mut grads);
                }
                Op::Abs(a) => {
                    let dx = zip_broadcast(&dy, self.value(*a), dy.shape(), |g, x| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    });
                    send(*a, dx, &mut grads);
                }
                Op::Concat(parts) => {
                    let [n, _, h, w] = dy.shape();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.shape(p)[1];
                        if self.nodes[p.0].needs_grad {
                            let mut data = Vec::with_capacity(n * c * h * w);
                            for s in 0..n {
                                let sample = dy.sample(s);
                                data.extend_from_slice(&sample[offset * h * w..(offset + c) * h * w]);
                            }
                            send(p, Tensor::from_vec([n, c, h, w], data), &mut grads);
                        }
                        offset += c;
                    }
                }
                Op::GlobalAvg(a) => {
                    let s = self.shape(*a);
                    let denom = T::from_usize(s[2] * s[3]).unwrap();
                    let mut dx = Tensor::zeros(s);
                    let plane = s[2] * s[3];
                    for (k, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                        chunk.fill(dy.data()[k] / denom);
                    }
                    send(*a, dx, &mut grads);
                }
                Op::GlobalMax(a, arg) | Op::ChannelMax(a, arg) => {
                    let mut dx = Tensor::zeros(self.shape(*a));
                    for (k, &idx) in arg.iter().enumerate() {
                        dx.data_mut()[idx] = dx.data()[idx] + dy.data()[k];
                    }
                    send(*a, dx, &mut grads);
                }
                Op::ChannelMean(a) => {
                    let s = self.shape(*a);
                    let denom = T::from_usize(s[1]).unwrap();
                    let plane = s[2] * s[3];
                    let mut dx = Tensor::zeros(s);
                    for n in 0..s[0] {
                        let src = &dy.data()[n * plane..(n + 1) * plane];
                        for c in 0..s[1] {
                            let off = (n * s[1] + c) * plane;
                            for (d, &g) in dx.data_mut()[off..off + plane].iter_mut().zip(src) {
                                *d = g / denom;
                            }
                        }
                    }
                    send(*a, dx, &mut grads);
                }
                Op::Upsample(a, f) => {
                    let s = self.shape(*a);
                    let (h, w) = (s[2], s[3]);
                    let wo = w * f;
                    let mut dx = Tensor::zeros(s);
                    for nc in 0..s[0] * s[1] {
                        let src = &dy.data()[nc * h * f * wo..(nc + 1) * h * f * wo];
                        let dst = &mut dx.data_mut()[nc * h * w..(nc + 1) * h * w];
                        for y in 0..h * f {
                            for x in 0..wo {
                                let d = &mut dst[(y / f) * w + x / f];
                                *d = *d + src[y * wo + x];
                            }
                        }
                    }
                    send(*a, dx, &mut grads);
                }
                Op::SumAll(a) => {
                    let g = dy.data()[0];
                    send(*a, Tensor::full(self.shape(*a), g), &mut grads);
                }
                Op::SmoothL1 {
                    pred,
                    target,
                    weight,
                } => {
                    let g = dy.data()[0];
                    let p = self.value(*pred);
                    let data = p
                        .data()
                        .iter()
                        .zip(target.data())
                        .zip(weight.data())
                        .map(|((&a, &b), &w)| g * w * smooth_l1_slope(a - b))
                        .collect();
                    send(*pred, Tensor::from_vec(p.shape(), data), &mut grads);
                }
            }
        }
        Gradients {
            leaves: kept,
            param_vars: self.param_vars.clone(),
        }
    }
}

/// Gradients of leaf values (parameters and tracked inputs).
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a tracked input, if any flowed to it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter; `None` if it was not used or received none.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_vars.get(&id).and_then(|v| self.wrt(*v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(sum(probe ⊙ f(x)))/dx for a unary graph builder.
    fn check_unary(shape: Shape, build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_tensor(shape, &mut rng);
        let mut probe_shape = None;
        let eval = |x: Tensor<f64>, probe: Option<&Tensor<f64>>| -> (f64, Option<Tensor<f64>>, Shape) {
            let mut g = Graph::new(&store);
            let xv = g.input_with_grad(x);
            let y = build(&mut g, xv);
            let ys = g.shape(y);
            let Some(probe) = probe else { return (0.0, None, ys) };
            let p = g.input(probe.clone());
            let m = g.mul(y, p);
            let l = g.sum_all(m);
            let grads = g.backward(l);
            (g.value(l).data()[0], grads.wrt(xv).cloned(), ys)
        };
        let (_, _, ys) = eval(x0.clone(), None);
        probe_shape.get_or_insert(ys);
        let probe = rand_tensor(ys, &mut rng);
        let (_, grad, _) = eval(x0.clone(), Some(&probe));
        let grad = grad.expect("gradient reaches input");
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(xp, Some(&probe)).0 - eval(xm, Some(&probe)).0) / (2.0 * h);
            let an = grad.data()[i];
            assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "coord {i}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn branch_pattern_tracks_kinks() {
        let store = ParamStore::<f64>::new();
        let pattern = |v: [f64; 4]| {
            let mut g = Graph::new(&store);
            let x = g.input(Tensor::from_vec([1, 2, 1, 2], v.to_vec()));
            let r = g.relu(x);
            g.global_max(r);
            g.branch_pattern()
        };
        assert_eq!(pattern([-1.0, 2.0, 3.0, 0.5]), vec![0, 1, 1, 1, 1, 2]);
        // moving a value within its branch keeps the pattern
        assert_eq!(pattern([-0.5, 2.0, 3.0, 0.5]), pattern([-1.0, 2.0, 3.0, 0.5]));
        assert_ne!(pattern([0.5, 2.0, 3.0, 0.5]), pattern([-1.0, 2.0, 3.0, 0.5]));
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let s = [2, 3, 4, 5];
        check_unary(s, |g, x| g.sigmoid(x));
        check_unary(s, |g, x| g.abs(x));
        check_unary(s, |g, x| g.relu(x));
        check_unary(s, |g, x| g.scale(x, 2.5));
        check_unary(s, |g, x| g.mul(x, x));
        check_unary(s, |g, x| {
            let y = g.sigmoid(x);
            g.sub(x, y)
        });
    }

    #[test]
    fn pooling_and_reshaping_ops_match_finite_differences() {
        let s = [2, 3, 4, 5];
        check_unary(s, |g, x| g.global_avg(x));
        check_unary(s, |g, x| g.global_max(x));
        check_unary(s, |g, x| g.channel_mean(x));
        check_unary(s, |g, x| g.channel_max(x));
        check_unary(s, |g, x| g.upsample_nearest(x, 3));
        check_unary(s, |g, x| {
            let y = g.sigmoid(x);
            g.concat(&[x, y, x])
        });
        check_unary(s, |g, x| {
            let pooled = g.global_avg(x);
            g.mul(x, pooled)
        });
        check_unary(s, |g, x| {
            let m = g.channel_max(x);
            g.add(x, m)
        });
    }

    #[test]
    fn conv_and_prelu_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = store.insert("w", rand_tensor([4, 3, 3, 3], &mut rng));
        let b = store.insert("b", rand_tensor([1, 4, 1, 1], &mut rng));
        let a = store.insert("a", Tensor::scalar(0.25));
        let store = store;
        let s = [2, 3, 7, 6];
        let build = |g: &mut Graph<f64>, x: Var| {
            let wv = g.param(w);
            let bv = g.param(b);
            let av = g.param(a);
            let y = g.conv2d(x, wv, Some(bv), 2, 1);
            g.prelu(y, av)
        };
        // input gradient
        let x0 = rand_tensor(s, &mut rng);
        let eval = |x: &Tensor<f64>| {
            let mut g = Graph::new(&store);
            let xv = g.input_with_grad(x.clone());
            let y = build(&mut g, xv);
            let l = g.sum_all(y);
            let grads = g.backward(l);
            (
                g.value(l).data()[0],
                grads.wrt(xv).cloned().unwrap(),
                grads.param(w).cloned().unwrap(),
                grads.param(a).cloned().unwrap(),
            )
        };
        let (_, gx, _, ga) = eval(&x0);
        let h = 1e-6;
        for i in (0..x0.len()).step_by(7) {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() < 1e-6, "x[{i}]");
        }
        assert!(ga.data()[0].abs() > 0.0);
    }

    #[test]
    fn shared_parameter_accumulates_gradient() {
        let mut store = ParamStore::<f64>::new();
        let k = store.insert("k", Tensor::scalar(3.0));
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::full([1, 1, 2, 2], 2.0));
        let k1 = g.param(k);
        let y = g.mul(x, k1);
        let k2 = g.param(k);
        assert_eq!(k1, k2);
        let z = g.mul(y, k2);
        let l = g.sum_all(z);
        // l = Σ 2·k² over 4 pixels → dl/dk = 16k = 48
        let grads = g.backward(l);
        assert_eq!(grads.param(k).unwrap().data()[0], 48.0);
    }

    #[test]
    fn smooth_l1_loss_gradient_is_masked() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let p = g.input_with_grad(Tensor::from_vec([1, 1, 1, 3], vec![0.5, 3.0, -2.0]));
        let target = Tensor::zeros([1, 1, 1, 3]);
        let weight = Tensor::from_vec([1, 1, 1, 3], vec![1.0, 1.0, 0.0]);
        let l = g.smooth_l1_loss(p, target, weight);
        assert_eq!(g.value(l).data()[0], 0.125 + 2.5);
        let grads = g.backward(l);
        assert_eq!(grads.wrt(p).unwrap().data(), &[0.5, 1.0, 0.0]);
    }
}
