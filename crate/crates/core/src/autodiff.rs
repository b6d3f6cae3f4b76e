//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients
//! only into nodes that transitively depend on a leaf created with
//! `needs_grad = true`.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{self, axpy, gemm_acc, gemm_at_acc, gemm_bt_acc};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) struct TriSampleCache {
    pub points: Vec<[f64; 3]>,
    pub dims: TriDims,
}

/// `(slices, channels, height, width)` of one tri-grid sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriDims {
    pub slices: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct CompositeCache {
    pub rays: usize,
    pub samples: usize,
    pub delta: f64,
    pub background: [f64; 3],
    /// transmittance before each sample, `rays × (samples + 1)`
    pub trans: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Square(Var),
    Rsqrt(Var),
    Exp(Var),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Mean(Var),
    SumGroups(Var, usize),
    Reshape(Var),
    Linear(Var, Var, Option<Var>),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ChannelBias(Var, Var),
    ChannelScale(Var, Var),
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Upsample2x(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, inv_std: Vec<f64> },
    ChannelNormalize { x: Var, eps: f64 },
    Scatter { x: Var, index: Vec<usize> },
    TriSample { grid: Var, cache: Box<TriSampleCache> },
    Composite { sigma: Var, color: Var, cache: Box<CompositeCache> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zero-filled when nothing flowed into `v`.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::from_vec(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Recording of a differentiable computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    // [N, C, rest...] -> (N, C, prod(rest))
    let n = shape[0];
    let c = if shape.len() > 1 { shape[1] } else { 1 };
    let s: usize = if shape.len() > 2 { shape[2..].iter().product() } else { 1 };
    (n, c, s)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn im2col(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let p = ho * wo;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let p = ho * wo;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = c * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Up to 24 `(flat offset of channel 0, weight)` taps of a point on the three
/// planes; channel `c` lives at `offset + c·H·W`.
pub(crate) fn trigrid_taps(p: &[f64; 3], dims: TriDims, out: &mut Vec<(usize, f64)>) {
    out.clear();
    let [x, y, z] = *p;
    if !(x.abs() <= 1.0 && y.abs() <= 1.0 && z.abs() <= 1.0) {
        return;
    }
    let TriDims { slices, channels, height, width } = dims;
    // plane 0: XY (u=x, v=y, slice along z); plane 1: XZ (u=x, v=z, slice along y);
    // plane 2: ZY (u=z, v=y, slice along x)
    let coords = [(x, y, z), (x, z, y), (z, y, x)];
    let hw = height * width;
    for (plane, &(u, v, s)) in coords.iter().enumerate() {
        let (u0, u1, fu) = lerp_index(u, width);
        let (v0, v1, fv) = lerp_index(v, height);
        let (s0, s1, fs) = lerp_index(s, slices);
        for (si, ws) in [(s0, 1.0 - fs), (s1, fs)] {
            let sbase = (plane * slices + si) * channels * hw;
            for (vi, wv) in [(v0, 1.0 - fv), (v1, fv)] {
                for (ui, wu) in [(u0, 1.0 - fu), (u1, fu)] {
                    let wgt = ws * wv * wu;
                    if wgt != 0.0 {
                        out.push((sbase + vi * width + ui, wgt));
                    }
                }
            }
        }
    }
}

/// Cell-centred linear interpolation index on `[-1, 1]` split into `n` cells,
/// clamped to the outermost centres.
#[inline]
pub(crate) fn lerp_index(coord: f64, n: usize) -> (usize, usize, f64) {
    let f = (coord + 1.0) * 0.5 * n as f64 - 0.5;
    let f = f.clamp(0.0, (n - 1) as f64);
    let i0 = math::floor(f) as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, f - i0 as f64)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf with no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, needs_grad: bool) -> Var {
        self.push(t, Op::Leaf, needs_grad)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(v, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_vec(va.shape(), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `x^(-1/2)`
    pub fn rsqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Rsqrt(a), |x| 1.0 / math::sqrt(x))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), math::exp)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), math::softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), math::sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), math::tanh)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x >= 0.0 { x } else { slope * x })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Sums contiguous groups of `group` elements; output shape is the input
    /// shape with its trailing axes collapsed so that `len / group` remain.
    pub fn sum_groups(&mut self, a: Var, group: usize, out_shape: &[usize]) -> Var {
        let v = self.value(a);
        assert_eq!(v.len() % group, 0);
        let data: Vec<f64> = v.data().chunks(group).map(|c| c.iter().sum()).collect();
        let t = Tensor::from_vec(out_shape, data).expect("sum_groups shape");
        let ng = self.ng(a);
        self.push(t, Op::SumGroups(a, group), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape");
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// `x[N, in] · wᵀ + b` with `w[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xs, ws) = (self.shape(x), self.shape(w));
        assert_eq!(xs.len(), 2, "linear input must be 2-d");
        let (n, fin) = (xs[0], xs[1]);
        let fout = ws[0];
        assert_eq!(ws[1], fin, "linear weight mismatch");
        let mut out = vec![0.0; n * fout];
        if fout >= 8 {
            let wv = self.value(w).data();
            let mut wt = vec![0.0; fin * fout];
            for o in 0..fout {
                for i in 0..fin {
                    wt[i * fout + o] = wv[o * fin + i];
                }
            }
            gemm_acc(self.value(x).data(), &wt, &mut out, n, fin, fout);
        } else {
            gemm_bt_acc(self.value(x).data(), self.value(w).data(), &mut out, n, fout, fin);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), fout);
            for row in out.chunks_mut(fout) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.map(|b| self.ng(b)).unwrap_or(false);
        self.push(Tensor::from_vec(&[n, fout], out).unwrap(), Op::Linear(x, w, b), ng)
    }

    /// 2-d convolution without bias, square kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv input must be NCHW");
        assert_eq!(ws.len(), 4, "conv weight must be OIKK");
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], ci, "conv channel mismatch");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let p = ho * wo;
        let kk = ci * k * k;
        let mut out = vec![0.0; n * co * p];
        let mut cols = vec![0.0; kk * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for b in 0..n {
            im2col(&xv[b * ci * h * wd..(b + 1) * ci * h * wd], ci, h, wd, k, stride, pad, ho, wo, &mut cols);
            gemm_acc(wv, &cols, &mut out[b * co * p..(b + 1) * co * p], co, kk, p);
        }
        let ng = self.ng(x) || self.ng(w);
        let t = Tensor::from_vec(&[n, co, ho, wo], out).unwrap();
        self.push(t, Op::Conv2d { x, w, stride, pad }, ng)
    }

    /// `x[N, C, ...] + b[C]`
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let (n, c, s) = dims3(self.shape(x));
        assert_eq!(self.value(b).len(), c, "bias length");
        let mut t = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for i in 0..n {
            for (ch, bb) in bv.iter().enumerate() {
                let off = (i * c + ch) * s;
                t.data_mut()[off..off + s].iter_mut().for_each(|v| *v += bb);
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(t, Op::ChannelBias(x, b), ng)
    }

    /// `x[N, C, ...] * s[N, C]`
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Var {
        let (n, c, sp) = dims3(self.shape(x));
        assert_eq!(self.value(s).len(), n * c, "channel scale length");
        let mut t = self.value(x).clone();
        let sv = self.value(s).data().to_vec();
        for (j, f) in sv.iter().enumerate() {
            t.data_mut()[j * sp..(j + 1) * sp].iter_mut().for_each(|v| *v *= f);
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(t, Op::ChannelScale(x, s), ng)
    }

    /// `x[N, C, ...] * scale[C] + shift[C]`
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (n, c, s) = dims3(self.shape(x));
        assert_eq!(self.value(scale).len(), c, "affine scale length");
        assert_eq!(self.value(shift).len(), c, "affine shift length");
        let mut t = self.value(x).clone();
        let sc = self.value(scale).data().to_vec();
        let sh = self.value(shift).data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * s;
                t.data_mut()[off..off + s].iter_mut().for_each(|v| *v = *v * sc[ch] + sh[ch]);
            }
        }
        let ng = self.ng(x) || self.ng(scale) || self.ng(shift);
        self.push(t, Op::ChannelAffine { x, scale, shift }, ng)
    }

    /// Nearest-neighbour 2× upsampling of NCHW.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; nc * 4 * h * w];
        for j in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[j * 4 * h * w + y * 2 * w + xx] = xv[j * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        let t = Tensor::from_vec(&[xs[0], xs[1], 2 * h, 2 * w], out).unwrap();
        self.push(t, Op::Upsample2x(x), ng)
    }

    /// 2×2 average pooling of NCHW with even spatial size.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; nc * ho * wo];
        for j in 0..nc {
            for y in 0..ho {
                for xx in 0..wo {
                    let b = j * h * w;
                    out[j * ho * wo + y * wo + xx] = 0.25
                        * (xv[b + 2 * y * w + 2 * xx]
                            + xv[b + 2 * y * w + 2 * xx + 1]
                            + xv[b + (2 * y + 1) * w + 2 * xx]
                            + xv[b + (2 * y + 1) * w + 2 * xx + 1]);
                }
            }
        }
        let ng = self.ng(x);
        let t = Tensor::from_vec(&[xs[0], xs[1], ho, wo], out).unwrap();
        self.push(t, Op::AvgPool2(x), ng)
    }

    /// `[N, C, ...] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, s) = dims3(self.shape(x));
        let out: Vec<f64> =
            self.value(x).data().chunks(s).map(|ch| ch.iter().sum::<f64>() / s as f64).collect();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[n, c], out).unwrap(), Op::GlobalAvgPool(x), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch");
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let t = Tensor::from_vec(&shape, out).unwrap();
        self.push(t, Op::Concat { parts: parts.to_vec(), axis }, ng)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert!(start + len <= xs[axis], "slice out of range");
        let (outer, a, inner) = split_axis(&xs, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * a + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, out).unwrap(), Op::Slice { x, axis, start }, ng)
    }

    /// Training-mode batch normalisation over `[N, C, ...]`; returns the output
    /// together with the per-channel batch mean and biased variance.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let (n, c, s) = dims3(self.shape(x));
        let m = (n * s) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                mean[ch] += xv[(b * c + ch) * s..(b * c + ch + 1) * s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for b in 0..n {
            for ch in 0..c {
                for &v in &xv[(b * c + ch) * s..(b * c + ch + 1) * s] {
                    var[ch] += (v - mean[ch]) * (v - mean[ch]);
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = xv.to_vec();
        for b in 0..n {
            for ch in 0..c {
                for v in &mut out[(b * c + ch) * s..(b * c + ch + 1) * s] {
                    *v = g[ch] * (*v - mean[ch]) * inv_std[ch] + bt[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let t = Tensor::from_vec(self.shape(x), out).unwrap();
        let v = self.push(t, Op::BatchNorm { x, gamma, beta, inv_std }, ng);
        (v, mean, var)
    }

    /// Unit-normalises every `[n, :, s]` fibre across channels.
    pub fn channel_normalize(&mut self, x: Var, eps: f64) -> Var {
        let (n, c, s) = dims3(self.shape(x));
        let mut t = self.value(x).clone();
        let d = t.data_mut();
        for b in 0..n {
            for p in 0..s {
                let mut ss = 0.0;
                for ch in 0..c {
                    ss += d[(b * c + ch) * s + p] * d[(b * c + ch) * s + p];
                }
                let r = 1.0 / math::sqrt(ss + eps);
                for ch in 0..c {
                    d[(b * c + ch) * s + p] *= r;
                }
            }
        }
        let ng = self.ng(x);
        self.push(t, Op::ChannelNormalize { x, eps }, ng)
    }

    /// Places row `i` of `x[m, k]` at row `index[i]` of a zero `[rows, k]` output.
    pub fn scatter_rows(&mut self, x: Var, index: Vec<usize>, rows: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let k = xs[1];
        assert_eq!(xs[0], index.len());
        let mut out = vec![0.0; rows * k];
        let xv = self.value(x).data();
        for (i, &r) in index.iter().enumerate() {
            out[r * k..(r + 1) * k].copy_from_slice(&xv[i * k..(i + 1) * k]);
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[rows, k], out).unwrap(), Op::Scatter { x, index }, ng)
    }

    /// Tri-grid feature lookup for one sample. `grid` holds `3·D·C` channels of
    /// `H×W` (layout plane, slice, channel); output is `[points, C]`, the sum of
    /// the three plane interpolants. Points outside `[-1, 1]³` read zero.
    pub fn trigrid_sample(&mut self, grid: Var, dims: TriDims, points: Vec<[f64; 3]>) -> Var {
        let gv = self.value(grid).data();
        assert_eq!(gv.len(), 3 * dims.slices * dims.channels * dims.height * dims.width);
        let c = dims.channels;
        let hw = dims.height * dims.width;
        let mut out = vec![0.0; points.len() * c];
        let mut taps = Vec::with_capacity(24);
        for (i, p) in points.iter().enumerate() {
            trigrid_taps(p, dims, &mut taps);
            let row = &mut out[i * c..(i + 1) * c];
            for &(off, wgt) in &taps {
                for (ch, r) in row.iter_mut().enumerate() {
                    *r += wgt * gv[off + ch * hw];
                }
            }
        }
        let ng = self.ng(grid);
        let t = Tensor::from_vec(&[points.len(), c], out).unwrap();
        self.push(t, Op::TriSample { grid, cache: Box::new(TriSampleCache { points, dims }) }, ng)
    }

    /// Emission-absorption compositing of `rays × samples` densities and
    /// colours at uniform spacing `delta`. Output `[3, rays]` colour.
    pub fn composite(
        &mut self,
        sigma: Var,
        color: Var,
        rays: usize,
        samples: usize,
        delta: f64,
        background: [f64; 3],
    ) -> Var {
        let sv = self.value(sigma).data();
        let cv = self.value(color).data();
        assert_eq!(sv.len(), rays * samples);
        assert_eq!(cv.len(), rays * samples * 3);
        let mut trans = vec![0.0; rays * (samples + 1)];
        let mut out = vec![0.0; 3 * rays];
        for r in 0..rays {
            let mut t = 1.0;
            let mut acc = [0.0; 3];
            trans[r * (samples + 1)] = 1.0;
            for i in 0..samples {
                let k = r * samples + i;
                let next = t * math::exp(-sv[k] * delta);
                let w = t - next;
                for ch in 0..3 {
                    acc[ch] += w * cv[k * 3 + ch];
                }
                t = next;
                trans[r * (samples + 1) + i + 1] = t;
            }
            for ch in 0..3 {
                out[ch * rays + r] = acc[ch] + t * background[ch];
            }
        }
        let ng = self.ng(sigma) || self.ng(color);
        let cache = CompositeCache { rays, samples, delta, background, trans };
        let t = Tensor::from_vec(&[3, rays], out).unwrap();
        self.push(t, Op::Composite { sigma, color, cache: Box::new(cache) }, ng)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        self.backward_with(out, Tensor::scalar(1.0))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Gradients {
        let n = out.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        assert_eq!(seed.len(), self.value(out).len(), "seed shape");
        grads[out.0] = Some(seed.into_data());
        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Gradients { grads, shapes }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(1.0, g, gb);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(-1.0, g, gb);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(*s, g, ga);
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(1.0, g, ga);
                }
            }
            Op::Square(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gi), xi) in ga.iter_mut().zip(g).zip(val(*a)) {
                        *o += 2.0 * xi * gi;
                    }
                }
            }
            Op::Rsqrt(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += -0.5 * yi * yi * yi * gi;
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += yi * gi;
                    }
                }
            }
            Op::Softplus(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gi), xi) in ga.iter_mut().zip(g).zip(val(*a)) {
                        *o += math::sigmoid(*xi) * gi;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += yi * (1.0 - yi) * gi;
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += (1.0 - yi * yi) * gi;
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gi), xi) in ga.iter_mut().zip(g).zip(val(*a)) {
                        *o += if *xi >= 0.0 { *gi } else { slope * gi };
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::SumGroups(a, group) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (chunk, gi) in ga.chunks_mut(*group).zip(g) {
                        chunk.iter_mut().for_each(|o| *o += gi);
                    }
                }
            }
            Op::Linear(x, w, b) => {
                let xs = self.nodes[x.0].value.shape();
                let (n, fin) = (xs[0], xs[1]);
                let fout = node.value.shape()[1];
                if let Some(gx) = self.acc(grads, *x) {
                    gemm_acc(g, val(*w), gx, n, fout, fin);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    gemm_at_acc(g, val(*x), gw, n, fout, fin);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for row in g.chunks(fout) {
                            axpy(1.0, row, gb);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let ws = self.nodes[w.0].value.shape().to_vec();
                let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (co, k) = (ws[0], ws[2]);
                let os = node.value.shape();
                let (ho, wo) = (os[2], os[3]);
                let p = ho * wo;
                let kk = ci * k * k;
                let need_x = self.nodes[x.0].needs_grad;
                let need_w = self.nodes[w.0].needs_grad;
                let xv = val(*x);
                let wv = val(*w);
                let mut cols = vec![0.0; kk * p];
                let mut dcols = vec![0.0; kk * p];
                let mut dw = if need_w { vec![0.0; co * kk] } else { Vec::new() };
                let mut dx = if need_x { vec![0.0; n * ci * h * wd] } else { Vec::new() };
                for b in 0..n {
                    let gb = &g[b * co * p..(b + 1) * co * p];
                    if need_w {
                        im2col(&xv[b * ci * h * wd..(b + 1) * ci * h * wd], ci, h, wd, k, *stride, *pad, ho, wo, &mut cols);
                        gemm_bt_acc(gb, &cols, &mut dw, co, kk, p);
                    }
                    if need_x {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        gemm_at_acc(wv, gb, &mut dcols, co, kk, p);
                        col2im(&dcols, ci, h, wd, k, *stride, *pad, ho, wo, &mut dx[b * ci * h * wd..(b + 1) * ci * h * wd]);
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    axpy(1.0, &dw, gw);
                }
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(1.0, &dx, gx);
                }
            }
            Op::ChannelBias(x, b) => {
                let (n, c, s) = dims3(node.value.shape());
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(1.0, g, gx);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for bi in 0..n {
                        for ch in 0..c {
                            gb[ch] += g[(bi * c + ch) * s..(bi * c + ch + 1) * s].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::ChannelScale(x, sc) => {
                let (n, c, s) = dims3(node.value.shape());
                let sv = val(*sc);
                let xv = val(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for j in 0..n * c {
                        axpy(sv[j], &g[j * s..(j + 1) * s], &mut gx[j * s..(j + 1) * s]);
                    }
                }
                if let Some(gs) = self.acc(grads, *sc) {
                    for j in 0..n * c {
                        gs[j] += math::dot(&g[j * s..(j + 1) * s], &xv[j * s..(j + 1) * s]);
                    }
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (n, c, s) = dims3(node.value.shape());
                let sc = val(*scale);
                let xv = val(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * s;
                            axpy(sc[ch], &g[off..off + s], &mut gx[off..off + s]);
                        }
                    }
                }
                if let Some(gs) = self.acc(grads, *scale) {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * s;
                            gs[ch] += math::dot(&g[off..off + s], &xv[off..off + s]);
                        }
                    }
                }
                if let Some(gh) = self.acc(grads, *shift) {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * s;
                            gh[ch] += g[off..off + s].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Upsample2x(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let xs = self.nodes[x.0].value.shape();
                    let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                    for j in 0..nc {
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                gx[j * h * w + (yy / 2) * w + xx / 2] += g[j * 4 * h * w + yy * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::AvgPool2(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let xs = self.nodes[x.0].value.shape();
                    let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                    let (ho, wo) = (h / 2, w / 2);
                    for j in 0..nc {
                        for yy in 0..ho {
                            for xx in 0..wo {
                                let gv = 0.25 * g[j * ho * wo + yy * wo + xx];
                                let b = j * h * w;
                                gx[b + 2 * yy * w + 2 * xx] += gv;
                                gx[b + 2 * yy * w + 2 * xx + 1] += gv;
                                gx[b + (2 * yy + 1) * w + 2 * xx] += gv;
                                gx[b + (2 * yy + 1) * w + 2 * xx + 1] += gv;
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let (_, _, s) = dims3(self.nodes[x.0].value.shape());
                    for (chunk, gi) in gx.chunks_mut(s).zip(g) {
                        let v = gi / s as f64;
                        chunk.iter_mut().for_each(|o| *o += v);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut off = 0;
                let total = node.value.shape()[*axis] * inner;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis] * inner;
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..outer {
                            axpy(1.0, &g[o * total + off..o * total + off + len], &mut gp[o * len..(o + 1) * len]);
                        }
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (outer, a, inner) = split_axis(&xs, *axis);
                let len = node.value.shape()[*axis];
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let base = (o * a + start) * inner;
                        axpy(1.0, &g[o * len * inner..(o + 1) * len * inner], &mut gx[base..base + len * inner]);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, inv_std } => {
                let (n, c, s) = dims3(node.value.shape());
                let m = (n * s) as f64;
                let gam = val(*gamma);
                let xv = val(*x);
                let mut mean = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        mean[ch] += xv[(b * c + ch) * s..(b * c + ch + 1) * s].iter().sum::<f64>() / m;
                    }
                }
                let xhat = |j: usize, ch: usize| (xv[j] - mean[ch]) * inv_std[ch];
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for j in (b * c + ch) * s..(b * c + ch + 1) * s {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat(j, ch);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    axpy(1.0, &sum_gx, gg);
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    axpy(1.0, &sum_g, gb);
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch] / m;
                            for j in (b * c + ch) * s..(b * c + ch + 1) * s {
                                gx[j] += k * (m * g[j] - sum_g[ch] - xhat(j, ch) * sum_gx[ch]);
                            }
                        }
                    }
                }
            }
            Op::ChannelNormalize { x, eps } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let (n, c, s) = dims3(node.value.shape());
                    let xv = &self.nodes[x.0].value.data();
                    for b in 0..n {
                        for p in 0..s {
                            let mut ss = 0.0;
                            let mut gy = 0.0;
                            for ch in 0..c {
                                let j = (b * c + ch) * s + p;
                                ss += xv[j] * xv[j];
                                gy += g[j] * y[j];
                            }
                            let r = 1.0 / math::sqrt(ss + eps);
                            for ch in 0..c {
                                let j = (b * c + ch) * s + p;
                                gx[j] += r * (g[j] - y[j] * gy);
                            }
                        }
                    }
                }
            }
            Op::Scatter { x, index } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let k = node.value.shape()[1];
                    for (i, &r) in index.iter().enumerate() {
                        axpy(1.0, &g[r * k..(r + 1) * k], &mut gx[i * k..(i + 1) * k]);
                    }
                }
            }
            Op::TriSample { grid, cache } => {
                if let Some(gg) = self.acc(grads, *grid) {
                    let c = cache.dims.channels;
                    let hw = cache.dims.height * cache.dims.width;
                    let mut taps = Vec::with_capacity(24);
                    for (i, p) in cache.points.iter().enumerate() {
                        trigrid_taps(p, cache.dims, &mut taps);
                        let row = &g[i * c..(i + 1) * c];
                        for &(off, wgt) in &taps {
                            for (ch, r) in row.iter().enumerate() {
                                gg[off + ch * hw] += wgt * r;
                            }
                        }
                    }
                }
            }
            Op::Composite { sigma, color, cache } => {
                let CompositeCache { rays, samples, delta, background, trans } = &**cache;
                let (rays, samples, delta) = (*rays, *samples, *delta);
                let cv = val(*color);
                if self.nodes[color.0].needs_grad {
                    let gc = self.acc(grads, *color).unwrap();
                    for r in 0..rays {
                        for i in 0..samples {
                            let k = r * samples + i;
                            let w = trans[r * (samples + 1) + i] - trans[r * (samples + 1) + i + 1];
                            for ch in 0..3 {
                                gc[k * 3 + ch] += w * g[ch * rays + r];
                            }
                        }
                    }
                }
                if let Some(gs) = self.acc(grads, *sigma) {
                    for r in 0..rays {
                        let gr = [g[r], g[rays + r], g[2 * rays + r]];
                        let tb = r * (samples + 1);
                        let t_final = trans[tb + samples];
                        let mut suffix = t_final * (background[0] * gr[0] + background[1] * gr[1] + background[2] * gr[2]);
                        for i in (0..samples).rev() {
                            let k = r * samples + i;
                            let cg = cv[k * 3] * gr[0] + cv[k * 3 + 1] * gr[1] + cv[k * 3 + 2] * gr[2];
                            gs[k] += delta * (trans[tb + i + 1] * cg - suffix);
                            let w = trans[tb + i] - trans[tb + i + 1];
                            suffix += w * cg;
                        }
                    }
                }
            }
        }
    }
}
