//! Tape of tensor operations with reverse-mode gradient propagation.

use std::collections::HashMap;

use crate::kernels::{self, ConvGeometry, ConvShape};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    ClampMin(Var, f64),
    Mean(Var),
    ChannelMean(Var),
    Concat(Vec<Var>),
    SliceChannels { src: Var, start: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    InstanceNorm { x: Var },
    SoftmaxChannels(Var),
    AttentionSelect { attn: Var, gens: Var },
    PoolUpsample { x: Var, scale: usize },
    BceWithLogits { x: Var, target: f64 },
    TotalVariation(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    // Per-(n, c) inverse standard deviations for instance norm.
    aux: Vec<f64>,
}

/// Gradients of a scalar w.r.t. every trainable leaf that influenced it.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }
}

/// Records tensor operations so they can be differentiated.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const IN_EPS: f64 = 1e-5;

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

    /// Trainable leaf: gradients are reported for it by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf. Gradients still flow *through* operations that
    /// mix constants with trainable values, but never *into* the constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), move |x| if x > 0.0 { x } else { slope * x })
    }

    /// `max(a, floor)`; the gradient is zero wherever the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::ClampMin(a, floor), move |x| x.max(floor))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Weighted sum of one-element tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of no terms");
        let mut acc = self.scale(terms[0].0, terms[0].1);
        for &(v, w) in &terms[1..] {
            let s = self.scale(v, w);
            acc = self.add(acc, s);
        }
        acc
    }

    /// `[N, C, H, W] -> [N, 1, H, W]` mean over channels.
    pub fn channel_mean(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        let src = self.value(a).data();
        let hw = h * w;
        let mut out = vec![0.0; n * hw];
        for b in 0..n {
            let dst = &mut out[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let plane = &src[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (d, s) in dst.iter_mut().zip(plane) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|v| *v /= c as f64);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec(&[n, 1, h, w], out), Op::ChannelMean(a), rg)
    }

    /// Channel-wise concatenation of NCHW tensors with equal N, H, W.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of no tensors");
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            assert!(
                pn == n && ph == h && pw == w,
                "concat spatial/batch mismatch: {:?} vs {:?}",
                self.value(parts[0]).shape(),
                self.value(p).shape()
            );
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::from_vec(&[n, total_c, h, w], out),
            Op::Concat(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_channels(&mut self, src: Var, start: usize, len: usize) -> Var {
        let value = self.value(src).channels(start, len);
        let rg = self.rg(&[src]);
        self.push(value, Op::SliceChannels { src, start }, rg)
    }

    fn conv_shape(&self, x: Var, out_channels: usize, out_h: usize, out_w: usize, geom: ConvGeometry) -> ConvShape {
        let (n, c, h, w) = self.value(x).dims4();
        ConvShape {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels,
            out_h,
            out_w,
            geom,
        }
    }

    /// 2-D convolution; `w` is `[out_c, in_c, k, k]`, `b` is `[out_c]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Var {
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        assert_eq!(ws[2], ws[3], "only square kernels are supported");
        let (_, c, h, wd) = self.value(x).dims4();
        assert_eq!(ws[1], c, "conv weight expects {} input channels, got {}", ws[1], c);
        let geom = ConvGeometry::new(ws[2], stride, padding);
        let oh = geom.conv_out(h).expect("convolution input smaller than kernel");
        let ow = geom.conv_out(wd).expect("convolution input smaller than kernel");
        let s = self.conv_shape(x, ws[0], oh, ow, geom);
        let bias = b.map(|b| self.value(b).data());
        if let Some(bias) = bias {
            assert_eq!(bias.len(), ws[0], "bias length mismatch");
        }
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), bias, s);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(
            Tensor::from_vec(&[s.batch, ws[0], oh, ow], out),
            Op::Conv2d { x, w, b, geom },
            rg,
        )
    }

    /// Transposed 2-D convolution; `w` is `[in_c, out_c, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Var {
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        let (_, c, h, wd) = self.value(x).dims4();
        assert_eq!(ws[0], c, "transposed conv weight expects {} input channels, got {}", ws[0], c);
        let geom = ConvGeometry::new(ws[2], stride, padding);
        let (oh, ow) = (geom.transpose_out(h), geom.transpose_out(wd));
        let s = self.conv_shape(x, ws[1], oh, ow, geom);
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv_transpose2d_forward(self.value(x).data(), self.value(w).data(), bias, s);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(
            Tensor::from_vec(&[s.batch, ws[1], oh, ow], out),
            Op::ConvTranspose2d { x, w, b, geom },
            rg,
        )
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (i, (plane, dst)) in src.chunks(hw).zip(out.chunks_mut(hw)).enumerate() {
            debug_assert!(i < n * c);
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + IN_EPS).sqrt();
            for (d, s) in dst.iter_mut().zip(plane) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[x]);
        let var = self.push(Tensor::from_vec(&[n, c, h, w], out), Op::InstanceNorm { x }, rg);
        self.nodes[var.0].aux = inv_std;
        var
    }

    /// Softmax across the channel axis, independently at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(src[base + ch * hw + p]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (src[base + ch * hw + p] - m).exp();
                    out[base + ch * hw + p] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[base + ch * hw + p] /= z;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&[n, c, h, w], out), Op::SoftmaxChannels(x), rg)
    }

    /// `Σ_i attn[:, i] * gens[:, i*C..(i+1)*C]` with single-channel weights
    /// broadcast over the `C` channels of each generation.
    pub fn attention_select(&mut self, attn: Var, gens: Var) -> Var {
        let (n, k, h, w) = self.value(attn).dims4();
        let (gn, gc, gh, gw) = self.value(gens).dims4();
        assert!(gn == n && gh == h && gw == w, "attention/generation shape mismatch");
        assert!(k > 0 && gc % k == 0, "generation channels {gc} not a multiple of {k} maps");
        let c = gc / k;
        let hw = h * w;
        let a = self.value(attn).data();
        let g = self.value(gens).data();
        let mut out = vec![0.0; n * c * hw];
        for b in 0..n {
            for i in 0..k {
                let am = &a[(b * k + i) * hw..(b * k + i + 1) * hw];
                for ch in 0..c {
                    let gm = &g[((b * k + i) * c + ch) * hw..((b * k + i) * c + ch + 1) * hw];
                    let dst = &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    for p in 0..hw {
                        dst[p] += am[p] * gm[p];
                    }
                }
            }
        }
        let rg = self.rg(&[attn, gens]);
        self.push(Tensor::from_vec(&[n, c, h, w], out), Op::AttentionSelect { attn, gens }, rg)
    }

    /// Average pooling with square window `scale` and stride `scale`,
    /// followed by nearest-neighbour upsampling back to the input size.
    pub fn pool_upsample(&mut self, x: Var, scale: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(scale > 0 && h % scale == 0 && w % scale == 0, "pool scale {scale} must divide {h}x{w}");
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let hw = h * w;
        let area = (scale * scale) as f64;
        for plane in 0..n * c {
            let s = &src[plane * hw..(plane + 1) * hw];
            let d = &mut out[plane * hw..(plane + 1) * hw];
            for by in 0..h / scale {
                for bx in 0..w / scale {
                    let mut acc = 0.0;
                    for y in by * scale..(by + 1) * scale {
                        for x in bx * scale..(bx + 1) * scale {
                            acc += s[y * w + x];
                        }
                    }
                    let m = acc / area;
                    for y in by * scale..(by + 1) * scale {
                        for x in bx * scale..(bx + 1) * scale {
                            d[y * w + x] = m;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&[n, c, h, w], out), Op::PoolUpsample { x, scale }, rg)
    }

    /// Mean binary cross-entropy of logits against a constant target,
    /// evaluated as `max(x,0) - x*t + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(&mut self, x: Var, target: f64) -> Var {
        let t = self.value(x);
        let loss = t
            .data()
            .iter()
            .map(|&v| v.max(0.0) - v * target + (-v.abs()).exp().ln_1p())
            .sum::<f64>()
            / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(loss), Op::BceWithLogits { x, target }, rg)
    }

    /// Anisotropic total variation: the mean of all vertical and horizontal
    /// absolute neighbour differences.
    pub fn total_variation(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(h >= 2 && w >= 2, "total variation needs at least 2x2 images");
        let src = self.value(x).data();
        let hw = h * w;
        let mut acc = 0.0;
        for plane in 0..n * c {
            let s = &src[plane * hw..(plane + 1) * hw];
            for y in 0..h {
                for xx in 0..w {
                    if y + 1 < h {
                        acc += (s[(y + 1) * w + xx] - s[y * w + xx]).abs();
                    }
                    if xx + 1 < w {
                        acc += (s[y * w + xx + 1] - s[y * w + xx]).abs();
                    }
                }
            }
        }
        let count = (n * c * ((h - 1) * w + h * (w - 1))) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(acc / count), Op::TotalVariation(x), rg)
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(self.value(loss).shape(), vec![1.0]));
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.grads.insert(Var(idx), g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        out
    }

    fn accum(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], var: Var) -> Option<&'a mut Tensor> {
        if !self.nodes[var.0].requires_grad {
            return None;
        }
        let shape = self.value(var).shape().to_vec();
        Some(grads[var.0].get_or_insert_with(|| Tensor::zeros(&shape)))
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, g.zip_map(vb, |d, x| d * x));
                self.accum(grads, *b, g.zip_map(va, |d, x| d * x));
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                self.accum(grads, *a, g.zip_map(vb, |d, x| d / x));
                if self.requires_grad(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = g.zip_map(y, |d, q| d * q);
                    self.accum(grads, *b, t.zip_map(vb, |v, x| -v / x));
                }
            }
            Op::Scale(a, f) => self.accum(grads, *a, g.map(|d| d * f)),
            Op::Abs(a) => {
                let va = self.value(*a);
                self.accum(grads, *a, g.zip_map(va, |d, x| d * sign(x)));
            }
            Op::Log(a) => {
                let va = self.value(*a);
                self.accum(grads, *a, g.zip_map(va, |d, x| d / x));
            }
            Op::Tanh(a) => self.accum(grads, *a, g.zip_map(y, |d, t| d * (1.0 - t * t))),
            Op::Sigmoid(a) => self.accum(grads, *a, g.zip_map(y, |d, s| d * s * (1.0 - s))),
            Op::Relu(a) => {
                let va = self.value(*a);
                self.accum(grads, *a, g.zip_map(va, |d, x| if x > 0.0 { d } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                let va = self.value(*a);
                self.accum(grads, *a, g.zip_map(va, |d, x| if x > 0.0 { d } else { d * slope }));
            }
            Op::ClampMin(a, floor) => {
                let va = self.value(*a);
                self.accum(grads, *a, g.zip_map(va, |d, x| if x > *floor { d } else { 0.0 }));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let d = g.item() / va.len() as f64;
                self.accum(grads, *a, Tensor::full(va.shape(), d));
            }
            Op::ChannelMean(a) => {
                let (n, c, h, w) = self.value(*a).dims4();
                let hw = h * w;
                let mut out = vec![0.0; n * c * hw];
                for b in 0..n {
                    let gp = &g.data()[b * hw..(b + 1) * hw];
                    for ch in 0..c {
                        let dst = &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        for (d, s) in dst.iter_mut().zip(gp) {
                            *d = s / c as f64;
                        }
                    }
                }
                self.accum(grads, *a, Tensor::from_vec(&[n, c, h, w], out));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.requires_grad(p) {
                        self.accum(grads, p, g.channels(start, pc));
                    }
                    start += pc;
                }
            }
            Op::SliceChannels { src, start } => {
                if let Some(dst) = self.slot(grads, *src) {
                    let (n, c, h, w) = dst.dims4();
                    let len = g.shape()[1];
                    let hw = h * w;
                    for b in 0..n {
                        let from = &g.data()[b * len * hw..(b + 1) * len * hw];
                        let base = (b * c + start) * hw;
                        for (d, s) in dst.data_mut()[base..base + len * hw].iter_mut().zip(from) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (_, oc, oh, ow) = y.dims4();
                let s = self.conv_shape(*x, oc, oh, ow, *geom);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = self.slot(grads, *x).map(|t| std::mem::take(t));
                let mut dw = self.slot(grads, *w).map(|t| std::mem::take(t));
                let mut db = b.and_then(|b| self.slot(grads, b).map(|t| std::mem::take(t)));
                kernels::conv2d_backward(
                    xv,
                    wv,
                    g.data(),
                    s,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                restore(grads, *x, dx);
                restore(grads, *w, dw);
                if let Some(b) = b {
                    restore(grads, *b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (_, oc, oh, ow) = y.dims4();
                let s = self.conv_shape(*x, oc, oh, ow, *geom);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = self.slot(grads, *x).map(|t| std::mem::take(t));
                let mut dw = self.slot(grads, *w).map(|t| std::mem::take(t));
                let mut db = b.and_then(|b| self.slot(grads, b).map(|t| std::mem::take(t)));
                kernels::conv_transpose2d_backward(
                    xv,
                    wv,
                    g.data(),
                    s,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                restore(grads, *x, dx);
                restore(grads, *w, dw);
                if let Some(b) = b {
                    restore(grads, *b, db);
                }
            }
            Op::InstanceNorm { x } => {
                let (n, c, h, w) = y.dims4();
                let hw = h * w;
                let mut out = vec![0.0; n * c * hw];
                for (i, inv_std) in node.aux.iter().enumerate() {
                    let gy = &g.data()[i * hw..(i + 1) * hw];
                    let yy = &y.data()[i * hw..(i + 1) * hw];
                    let mean_g = gy.iter().sum::<f64>() / hw as f64;
                    let mean_gy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                    for p in 0..hw {
                        out[i * hw + p] = inv_std * (gy[p] - mean_g - yy[p] * mean_gy);
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(&[n, c, h, w], out));
            }
            Op::SoftmaxChannels(x) => {
                let (n, c, h, w) = y.dims4();
                let hw = h * w;
                let (gy, yy) = (g.data(), y.data());
                let mut out = vec![0.0; n * c * hw];
                for b in 0..n {
                    let base = b * c * hw;
                    for p in 0..hw {
                        let dot: f64 = (0..c).map(|ch| gy[base + ch * hw + p] * yy[base + ch * hw + p]).sum();
                        for ch in 0..c {
                            let i = base + ch * hw + p;
                            out[i] = yy[i] * (gy[i] - dot);
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(&[n, c, h, w], out));
            }
            Op::AttentionSelect { attn, gens } => {
                let (n, k, h, w) = self.value(*attn).dims4();
                let gc = self.value(*gens).shape()[1];
                let c = gc / k;
                let hw = h * w;
                let a = self.value(*attn).data();
                let gv = self.value(*gens).data();
                let gy = g.data();
                if self.requires_grad(*attn) {
                    let mut da = vec![0.0; n * k * hw];
                    for b in 0..n {
                        for i in 0..k {
                            let dst = &mut da[(b * k + i) * hw..(b * k + i + 1) * hw];
                            for ch in 0..c {
                                let gm = &gv[((b * k + i) * c + ch) * hw..][..hw];
                                let go = &gy[(b * c + ch) * hw..][..hw];
                                for p in 0..hw {
                                    dst[p] += go[p] * gm[p];
                                }
                            }
                        }
                    }
                    self.accum(grads, *attn, Tensor::from_vec(&[n, k, h, w], da));
                }
                if self.requires_grad(*gens) {
                    let mut dg = vec![0.0; n * gc * hw];
                    for b in 0..n {
                        for i in 0..k {
                            let am = &a[(b * k + i) * hw..][..hw];
                            for ch in 0..c {
                                let go = &gy[(b * c + ch) * hw..][..hw];
                                let dst = &mut dg[((b * k + i) * c + ch) * hw..][..hw];
                                for p in 0..hw {
                                    dst[p] = am[p] * go[p];
                                }
                            }
                        }
                    }
                    self.accum(grads, *gens, Tensor::from_vec(&[n, gc, h, w], dg));
                }
            }
            Op::PoolUpsample { x, scale } => {
                // The operator is a symmetric averaging projection, so its
                // adjoint is itself.
                let (n, c, h, w) = y.dims4();
                let hw = h * w;
                let area = (scale * scale) as f64;
                let mut out = vec![0.0; n * c * hw];
                for plane in 0..n * c {
                    let s = &g.data()[plane * hw..(plane + 1) * hw];
                    let d = &mut out[plane * hw..(plane + 1) * hw];
                    for by in 0..h / scale {
                        for bx in 0..w / scale {
                            let mut acc = 0.0;
                            for yy in by * scale..(by + 1) * scale {
                                for xx in bx * scale..(bx + 1) * scale {
                                    acc += s[yy * w + xx];
                                }
                            }
                            let m = acc / area;
                            for yy in by * scale..(by + 1) * scale {
                                for xx in bx * scale..(bx + 1) * scale {
                                    d[yy * w + xx] = m;
                                }
                            }
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(&[n, c, h, w], out));
            }
            Op::BceWithLogits { x, target } => {
                let xv = self.value(*x);
                let scale = g.item() / xv.len() as f64;
                self.accum(grads, *x, xv.map(|v| (sigmoid(v) - target) * scale));
            }
            Op::TotalVariation(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let count = (n * c * ((h - 1) * w + h * (w - 1))) as f64;
                let scale = g.item() / count;
                let src = self.value(*x).data();
                let mut out = vec![0.0; src.len()];
                for plane in 0..n * c {
                    let s = &src[plane * hw..(plane + 1) * hw];
                    let d = &mut out[plane * hw..(plane + 1) * hw];
                    for yy in 0..h {
                        for xx in 0..w {
                            let i = yy * w + xx;
                            if yy + 1 < h {
                                let sg = sign(s[i + w] - s[i]) * scale;
                                d[i + w] += sg;
                                d[i] -= sg;
                            }
                            if xx + 1 < w {
                                let sg = sign(s[i + 1] - s[i]) * scale;
                                d[i + 1] += sg;
                                d[i] -= sg;
                            }
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(&[n, c, h, w], out));
            }
        }
    }
}

fn restore(grads: &mut [Option<Tensor>], var: Var, value: Option<Tensor>) {
    if let Some(v) = value {
        grads[var.0] = Some(v);
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
