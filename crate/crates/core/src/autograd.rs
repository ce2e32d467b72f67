//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! through [`Graph::param`], which creates at most one leaf per parameter, so
//! a weight used twice accumulates both gradient contributions.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};
use crate::wavelet::{haar_forward_plane, haar_inverse_plane, note_dwt_call};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn same(k: usize) -> Self {
        Self { stride: 1, pad: k / 2, groups: 1 }
    }

    pub const fn strided(stride: usize, pad: usize) -> Self {
        Self { stride, pad, groups: 1 }
    }

    pub const fn depthwise(k: usize, channels: usize) -> Self {
        Self { stride: 1, pad: k / 2, groups: channels }
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }
}

enum Op {
    Leaf,
    Param,
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    MeanHw(Var),
    MaxHw(Var, Vec<usize>),
    SoftmaxC(Var),
    Concat(Vec<Var>),
    SliceC { x: Var, start: usize },
    Dwt(Var),
    Idwt(Var),
    PixelShuffle(Var, usize),
    AvgPool(Var, usize),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Clamp { x: Var, lo: f64, hi: f64 },
    L1 { x: Var, target: Tensor },
    WeightedSum { x: Var, weights: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    macs: u64,
    conv_macs: u64,
}

/// Gradients of one backward pass, indexed by graph variable.
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.per_node[v.0].as_ref()
    }

    /// Gradients for every parameter of `store`, zero where unused.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, t)| {
                self.param_vars
                    .get(&id)
                    .and_then(|v| self.per_node[v.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

fn broadcast_shape(a: [usize; 4], b: [usize; 4]) -> Result<[usize; 4]> {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

fn strides(shape: [usize; 4], out: [usize; 4]) -> [usize; 4] {
    let full = [shape[1] * shape[2] * shape[3], shape[2] * shape[3], shape[3], 1];
    let mut s = [0; 4];
    for d in 0..4 {
        s[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { full[d] };
    }
    s
}

/// Visits every output index of a broadcast binary op with the matching
/// flat indices into both operands.
fn for_each_broadcast(
    a: [usize; 4],
    b: [usize; 4],
    out: [usize; 4],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = strides(a, out);
    let sb = strides(b, out);
    let mut o = 0;
    for n in 0..out[0] {
        for c in 0..out[1] {
            for y in 0..out[2] {
                let ra = n * sa[0] + c * sa[1] + y * sa[2];
                let rb = n * sb[0] + c * sb[1] + y * sb[2];
                for x in 0..out[3] {
                    f(o, ra + x * sa[3], rb + x * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    let p = ho * wo;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((ci * kh + ky) * kw + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let p = ho * wo;
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[((ci * kh + ky) * kw + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(spec: ConvSpec, kh: usize, kw: usize) -> bool {
    kh == 1 && kw == 1 && spec.stride == 1 && spec.pad == 0
}

fn conv_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let [n, _, h, wd] = x.shape();
    let [cout, cin_g, kh, kw] = w.shape();
    let g = spec.groups;
    let cout_g = cout / g;
    let (ho, wo) = spec.output_size(h, wd, kh, kw);
    let p = ho * wo;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let kdim = cin_g * kh * kw;
    if cin_g == 1 && cout_g == 1 {
        depthwise_forward(x, w, spec, &mut out);
    } else {
        let pointwise = is_pointwise(spec, kh, kw);
        let mut col = if pointwise { Vec::new() } else { vec![0.0; kdim * p] };
        for s in 0..n {
            for gi in 0..g {
                let xs = &x.sample(s)[gi * cin_g * h * wd..(gi + 1) * cin_g * h * wd];
                let wg = &w.data()[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
                let dst_start = (s * cout + gi * cout_g) * p;
                let dst = &mut out.data_mut()[dst_start..dst_start + cout_g * p];
                if pointwise {
                    gemm(cout_g, kdim, p, 1.0, wg, false, xs, false, 0.0, dst);
                } else {
                    im2col(xs, cin_g, h, wd, kh, kw, spec, ho, wo, &mut col);
                    gemm(cout_g, kdim, p, 1.0, wg, false, &col, false, 0.0, dst);
                }
            }
        }
    }
    if let Some(b) = b {
        for s in 0..n {
            for c in 0..cout {
                let bias = b.data()[c];
                for v in out.plane_mut(s, c) {
                    *v += bias;
                }
            }
        }
    }
    out
}

fn depthwise_forward(x: &Tensor, w: &Tensor, spec: ConvSpec, out: &mut Tensor) {
    let [n, c, h, wd] = x.shape();
    let [_, _, kh, kw] = w.shape();
    let [_, _, ho, wo] = out.shape();
    let pad = spec.pad as isize;
    for s in 0..n {
        for ch in 0..c {
            let src = x.plane(s, ch);
            let k = &w.data()[ch * kh * kw..(ch + 1) * kh * kw];
            let dst = out.plane_mut(s, ch);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        let iy = (oy * spec.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * wd..];
                        for kx in 0..kw {
                            let ix = (ox * spec.stride + kx) as isize - pad;
                            if ix >= 0 && ix < wd as isize {
                                acc += k[ky * kw + kx] * row[ix as usize];
                            }
                        }
                    }
                    dst[oy * wo + ox] = acc;
                }
            }
        }
    }
}

fn depthwise_backward(
    x: &Tensor,
    w: &Tensor,
    spec: ConvSpec,
    dout: &Tensor,
    mut dx: Option<&mut Tensor>,
    mut dw: Option<&mut Tensor>,
) {
    let [n, c, h, wd] = x.shape();
    let [_, _, kh, kw] = w.shape();
    let [_, _, ho, wo] = dout.shape();
    let pad = spec.pad as isize;
    for s in 0..n {
        for ch in 0..c {
            let src = x.plane(s, ch);
            let g = dout.plane(s, ch);
            let k = &w.data()[ch * kh * kw..(ch + 1) * kh * kw];
            let mut dk = vec![0.0; kh * kw];
            let mut dplane = dx.as_ref().map(|_| vec![0.0; h * wd]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = g[oy * wo + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ky in 0..kh {
                        let iy = (oy * spec.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * spec.stride + kx) as isize - pad;
                            if ix >= 0 && ix < wd as isize {
                                let i = iy as usize * wd + ix as usize;
                                dk[ky * kw + kx] += go * src[i];
                                if let Some(dp) = dplane.as_mut() {
                                    dp[i] += go * k[ky * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(dw) = dw.as_deref_mut() {
                for (a, b) in dw.data_mut()[ch * kh * kw..(ch + 1) * kh * kw].iter_mut().zip(&dk) {
                    *a += b;
                }
            }
            if let (Some(dx), Some(dp)) = (dx.as_deref_mut(), dplane) {
                for (a, b) in dx.plane_mut(s, ch).iter_mut().zip(&dp) {
                    *a += b;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    spec: ConvSpec,
    dout: &Tensor,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let [n, cin, h, wd] = x.shape();
    let [cout, cin_g, kh, kw] = w.shape();
    let g = spec.groups;
    let cout_g = cout / g;
    let [_, _, ho, wo] = dout.shape();
    let p = ho * wo;
    let kdim = cin_g * kh * kw;
    let mut dx = need_dx.then(|| Tensor::zeros([n, cin, h, wd]));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let db = need_db.then(|| {
        let mut db = Tensor::zeros([1, cout, 1, 1]);
        for s in 0..n {
            for c in 0..cout {
                db.data_mut()[c] += dout.plane(s, c).iter().sum::<f64>();
            }
        }
        db
    });
    if cin_g == 1 && cout_g == 1 {
        depthwise_backward(x, w, spec, dout, dx.as_mut(), dw.as_mut());
        return (dx, dw, db);
    }
    let pointwise = is_pointwise(spec, kh, kw);
    let mut col = if pointwise { Vec::new() } else { vec![0.0; kdim * p] };
    let mut dcol = if pointwise || !need_dx { Vec::new() } else { vec![0.0; kdim * p] };
    for s in 0..n {
        for gi in 0..g {
            let xoff = gi * cin_g * h * wd;
            let xs = &x.sample(s)[xoff..xoff + cin_g * h * wd];
            let wg = &w.data()[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
            let gstart = (s * cout + gi * cout_g) * p;
            let gout = &dout.data()[gstart..gstart + cout_g * p];
            if !pointwise && need_dw {
                im2col(xs, cin_g, h, wd, kh, kw, spec, ho, wo, &mut col);
            }
            if let Some(dw) = dw.as_mut() {
                let dwg = &mut dw.data_mut()[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
                let src: &[f64] = if pointwise { xs } else { &col };
                gemm(cout_g, p, kdim, 1.0, gout, false, src, true, 1.0, dwg);
            }
            if let Some(dx) = dx.as_mut() {
                let per = cin * h * wd;
                let dxs = &mut dx.data_mut()[s * per + xoff..s * per + xoff + cin_g * h * wd];
                if pointwise {
                    gemm(kdim, cout_g, p, 1.0, wg, true, gout, false, 1.0, dxs);
                } else {
                    gemm(kdim, cout_g, p, 1.0, wg, true, gout, false, 0.0, &mut dcol);
                    col2im(&dcol, cin_g, h, wd, kh, kw, spec, ho, wo, dxs);
                }
            }
        }
    }
    (dx, dw, db)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new(), macs: 0, conv_macs: 0 }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Multiply-accumulate operations executed so far (convolutions,
    /// attention products and Haar transforms).
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// The convolution share of [`Graph::macs`].
    pub fn conv_macs(&self) -> u64 {
        self.conv_macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let [n, cin, h, wd] = self.shape(x);
        let [cout, cin_g, kh, kw] = self.shape(w);
        if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(Error::shape(format!(
                "groups {} incompatible with {cin}->{cout}",
                spec.groups
            )));
        }
        if cin / spec.groups != cin_g {
            return Err(Error::shape(format!(
                "conv weight expects {} input channels per group, input has {}",
                cin_g,
                cin / spec.groups
            )));
        }
        if h + 2 * spec.pad < kh || wd + 2 * spec.pad < kw || spec.stride == 0 {
            return Err(Error::shape(format!("conv {kh}x{kw} on {h}x{wd} input")));
        }
        if let Some(b) = b {
            if self.shape(b) != [1, cout, 1, 1] {
                return Err(Error::shape("conv bias shape"));
            }
        }
        let out = conv_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        );
        let [_, _, ho, wo] = out.shape();
        let conv = (n * cout * cin_g * kh * kw * ho * wo) as u64;
        self.macs += conv;
        self.conv_macs += conv;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { x, w, b, spec }, rg))
    }

    fn broadcast(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb)?;
        let mut out = Tensor::zeros(out_shape);
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let o = out.data_mut();
            if sa == sb {
                for i in 0..o.len() {
                    o[i] = f(da[i], db[i]);
                }
            } else {
                for_each_broadcast(sa, sb, out_shape, |io, ia, ib| o[io] = f(da[ia], db[ib]));
            }
        }
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        let rg = self.rg(a);
        self.push(out, Op::Offset(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Normalizes over channels at every pixel, then applies a per-channel
    /// affine map (`gamma`, `beta` shaped 1×C×1×1).
    pub fn layer_norm_c(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if self.shape(gamma) != [1, c, 1, 1] || self.shape(beta) != [1, c, 1, 1] {
            return Err(Error::shape("layer norm affine shape"));
        }
        let hw = h * w;
        let xv = self.value(x);
        let mut xhat = Tensor::zeros([n, c, h, w]);
        let mut inv_std = vec![0.0; n * hw];
        let mut out = Tensor::zeros([n, c, h, w]);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        for s in 0..n {
            let base = s * c * hw;
            for p in 0..hw {
                let mut mean = 0.0;
                for ch in 0..c {
                    mean += xv.data()[base + ch * hw + p];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ch in 0..c {
                    let d = xv.data()[base + ch * hw + p] - mean;
                    var += d * d;
                }
                var /= c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[s * hw + p] = inv;
                for ch in 0..c {
                    let i = base + ch * hw + p;
                    let xh = (xv.data()[i] - mean) * inv;
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = xh * gv[ch] + bv[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Global average over H×W.
    pub fn mean_hw(&mut self, a: Var) -> Var {
        let [n, c, h, w] = self.shape(a);
        let mut out = Tensor::zeros([n, c, 1, 1]);
        let inv = 1.0 / (h * w) as f64;
        for s in 0..n {
            for ch in 0..c {
                out.data_mut()[s * c + ch] = self.value(a).plane(s, ch).iter().sum::<f64>() * inv;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::MeanHw(a), rg)
    }

    /// Global max over H×W.
    pub fn max_hw(&mut self, a: Var) -> Var {
        let [n, c, _, _] = self.shape(a);
        let mut out = Tensor::zeros([n, c, 1, 1]);
        let mut arg = vec![0; n * c];
        for s in 0..n {
            for ch in 0..c {
                let plane = self.value(a).plane(s, ch);
                let (mut bi, mut bv) = (0, f64::NEG_INFINITY);
                for (i, &v) in plane.iter().enumerate() {
                    if v > bv {
                        bv = v;
                        bi = i;
                    }
                }
                out.data_mut()[s * c + ch] = bv;
                arg[s * c + ch] = bi;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::MaxHw(a, arg), rg)
    }

    /// Softmax across the channel axis at every (n, y, x).
    pub fn softmax_c(&mut self, a: Var) -> Var {
        let [n, c, h, w] = self.shape(a);
        let hw = h * w;
        let src = self.value(a);
        let mut out = Tensor::zeros([n, c, h, w]);
        for s in 0..n {
            for p in 0..hw {
                let idx = |ch: usize| (s * c + ch) * hw + p;
                let m = (0..c).map(|ch| src.data()[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (src.data()[idx(ch)] - m).exp();
                    out.data_mut()[idx(ch)] = e;
                    z += e;
                }
                for ch in 0..c {
                    out.data_mut()[idx(ch)] /= z;
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxC(a), rg)
    }

    pub fn concat_c(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::shape("empty concat"))?);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(Error::shape(format!("concat of {first:?} and {s:?}")));
            }
            c_total += s[1];
        }
        let [n, _, h, w] = first;
        let hw = h * w;
        let mut out = Tensor::zeros([n, c_total, h, w]);
        for s in 0..n {
            let mut off = 0;
            for &p in parts {
                let c = self.shape(p)[1];
                let src = self.value(p).sample(s);
                let dst = (s * c_total + off) * hw;
                out.data_mut()[dst..dst + c * hw].copy_from_slice(src);
                off += c;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_c(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if start + len > c || len == 0 {
            return Err(Error::shape(format!("channel slice {start}+{len} of {c}")));
        }
        let hw = h * w;
        let mut out = Tensor::zeros([n, len, h, w]);
        for s in 0..n {
            let src = (s * c + start) * hw;
            out.data_mut()[s * len * hw..(s + 1) * len * hw]
                .copy_from_slice(&self.value(x).data()[src..src + len * hw]);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceC { x, start }, rg))
    }

    /// Haar analysis of every channel. Output channels are band-major:
    /// `[ll(C), lh(C), hl(C), hh(C)]` at half resolution.
    pub fn dwt(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("dwt needs even size, got {h}x{w}")));
        }
        note_dwt_call();
        let out = dwt_tensor(self.value(x));
        self.macs += (4 * n * c * h * w) as u64;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dwt(x), rg))
    }

    pub fn idwt(&mut self, x: Var) -> Result<Var> {
        let c4 = self.shape(x)[1];
        if c4 % 4 != 0 {
            return Err(Error::shape("idwt needs a multiple of 4 channels"));
        }
        let out = idwt_tensor(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(out, Op::Idwt(x), rg))
    }

    /// Rearranges N×(C·r²)×H×W into N×C×(H·r)×(W·r).
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let [n, cr, h, w] = self.shape(x);
        if cr % (r * r) != 0 {
            return Err(Error::shape("pixel shuffle channel count"));
        }
        let c = cr / (r * r);
        let mut out = Tensor::zeros([n, c, h * r, w * r]);
        let src = self.value(x);
        for s in 0..n {
            for ch in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let plane = src.plane(s, ch * r * r + i * r + j);
                        let dst = out.plane_mut(s, ch);
                        for y in 0..h {
                            for xx in 0..w {
                                dst[(y * r + i) * w * r + xx * r + j] = plane[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::PixelShuffle(x, r), rg))
    }

    /// Non-overlapping k×k average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(format!("avg pool {k} on {h}x{w}")));
        }
        let (ho, wo) = (h / k, w / k);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let inv = 1.0 / (k * k) as f64;
        for s in 0..n {
            for ch in 0..c {
                let src = self.value(x).plane(s, ch).to_vec();
                let dst = out.plane_mut(s, ch);
                for y in 0..h {
                    for xx in 0..w {
                        dst[(y / k) * wo + xx / k] += src[y * w + xx] * inv;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool(x, k), rg))
    }

    /// Multi-head scaled dot-product attention. Queries are the pixels of
    /// `q` (N×C×H×W), keys/values the pixels of `k`/`v` (N×C×h×w); the
    /// output has the shape of `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let [n, c, hq, wq] = self.shape(q);
        let [nk, ck, hk, wk] = self.shape(k);
        if self.shape(v) != [nk, ck, hk, wk] || nk != n || ck != c {
            return Err(Error::shape("attention q/k/v shapes"));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::shape(format!("{heads} heads do not divide width {c}")));
        }
        let dh = c / heads;
        let (tq, tk) = (hq * wq, hk * wk);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros([n, c, hq, wq]);
        let mut probs = vec![0.0; n * heads * tq * tk];
        for s in 0..n {
            for hd in 0..heads {
                let qs = &self.value(q).sample(s)[hd * dh * tq..(hd + 1) * dh * tq];
                let ks = &self.value(k).sample(s)[hd * dh * tk..(hd + 1) * dh * tk];
                let vs = &self.value(v).sample(s)[hd * dh * tk..(hd + 1) * dh * tk];
                let p = &mut probs[(s * heads + hd) * tq * tk..][..tq * tk];
                gemm(tq, dh, tk, scale, qs, true, ks, false, 0.0, p);
                for row in p.chunks_exact_mut(tk) {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for e in row.iter_mut() {
                        *e = (*e - m).exp();
                        z += *e;
                    }
                    for e in row.iter_mut() {
                        *e /= z;
                    }
                }
                let off = (s * c + hd * dh) * tq;
                let os = &mut out.data_mut()[off..off + dh * tq];
                gemm(dh, tk, tq, 1.0, vs, false, p, true, 0.0, os);
            }
        }
        self.macs += (2 * n * tq * tk * c) as u64;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, rg))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    /// Mean absolute difference to a constant target; a 1×1×1×1 scalar.
    pub fn l1_loss(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(Error::shape(format!(
                "l1 loss between {:?} and {:?}",
                self.shape(x),
                target.shape()
            )));
        }
        let mean = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / target.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(mean), Op::L1 { x, target: target.clone() }, rg))
    }

    /// `Σ x ⊙ weights`, a smooth scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(Error::shape("weighted sum shape"));
        }
        let s = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: weights.clone() }, rg))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let keep = matches!(node.op, Op::Leaf | Op::Param);
            let g = if keep { grads[i].clone() } else { grads[i].take() };
            let Some(g) = g else { continue };
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        Gradients { per_node: grads, param_vars: self.param_vars.clone() }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn propagate(&self, op: &Op, value: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf | Op::Param => {}
            Op::Conv { x, w, b, spec } => {
                let (dx, dw, db) = conv_backward(
                    self.value(*x),
                    self.value(*w),
                    *spec,
                    &g,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let out = value.shape();
                let mut da = self.rg(*a).then(|| Tensor::zeros(sa));
                let mut db = self.rg(*b).then(|| Tensor::zeros(sb));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let gd = g.data();
                match op {
                    Op::Add(..) | Op::Sub(..) => {
                        let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                        for_each_broadcast(sa, sb, out, |io, ia, ib| {
                            if let Some(da) = da.as_mut() {
                                da.data_mut()[ia] += gd[io];
                            }
                            if let Some(db) = db.as_mut() {
                                db.data_mut()[ib] += sign * gd[io];
                            }
                        });
                    }
                    _ => {
                        for_each_broadcast(sa, sb, out, |io, ia, ib| {
                            if let Some(da) = da.as_mut() {
                                da.data_mut()[ia] += gd[io] * vb[ib];
                            }
                            if let Some(db) = db.as_mut() {
                                db.data_mut()[ib] += gd[io] * va[ia];
                            }
                        });
                    }
                }
                if let Some(da) = da {
                    self.accumulate(grads, *a, da);
                }
                if let Some(db) = db {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, s) => {
                let mut g = g;
                g.scale(*s);
                self.accumulate(grads, *a, g);
            }
            Op::Offset(a) => self.accumulate(grads, *a, g),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(x.data()).map(|(g, &x)| g * gelu_grad(x)).collect(),
                )
                .expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(value.data()).map(|(g, &y)| g * y * (1.0 - y)).collect(),
                )
                .expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )
                .expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let [n, c, h, w] = xhat.shape();
                let hw = h * w;
                let gv = self.value(*gamma).data();
                let mut dx = Tensor::zeros(xhat.shape());
                let mut dgamma = Tensor::zeros([1, c, 1, 1]);
                let mut dbeta = Tensor::zeros([1, c, 1, 1]);
                let (gd, xh) = (g.data(), xhat.data());
                for s in 0..n {
                    let base = s * c * hw;
                    for p in 0..hw {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for ch in 0..c {
                            let i = base + ch * hw + p;
                            let dxh = gd[i] * gv[ch];
                            sum_d += dxh;
                            sum_dx += dxh * xh[i];
                            dgamma.data_mut()[ch] += gd[i] * xh[i];
                            dbeta.data_mut()[ch] += gd[i];
                        }
                        let inv = inv_std[s * hw + p];
                        let cf = c as f64;
                        for ch in 0..c {
                            let i = base + ch * hw + p;
                            let dxh = gd[i] * gv[ch];
                            dx.data_mut()[i] = inv / cf * (cf * dxh - sum_d - xh[i] * sum_dx);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::MeanHw(a) => {
                let [n, c, h, w] = self.shape(*a);
                let inv = 1.0 / (h * w) as f64;
                let mut d = Tensor::zeros([n, c, h, w]);
                for s in 0..n {
                    for ch in 0..c {
                        let gv = g.data()[s * c + ch] * inv;
                        d.plane_mut(s, ch).fill(gv);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MaxHw(a, arg) => {
                let [n, c, _, _] = self.shape(*a);
                let mut d = Tensor::zeros(self.shape(*a));
                for s in 0..n {
                    for ch in 0..c {
                        d.plane_mut(s, ch)[arg[s * c + ch]] = g.data()[s * c + ch];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxC(a) => {
                let [n, c, h, w] = value.shape();
                let hw = h * w;
                let mut d = Tensor::zeros(value.shape());
                for s in 0..n {
                    for p in 0..hw {
                        let idx = |ch: usize| (s * c + ch) * hw + p;
                        let dot: f64 = (0..c).map(|ch| value.data()[idx(ch)] * g.data()[idx(ch)]).sum();
                        for ch in 0..c {
                            let y = value.data()[idx(ch)];
                            d.data_mut()[idx(ch)] = y * (g.data()[idx(ch)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Concat(parts) => {
                let [n, c_total, h, w] = value.shape();
                let hw = h * w;
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.rg(p) {
                        let mut d = Tensor::zeros([n, c, h, w]);
                        for s in 0..n {
                            let src = (s * c_total + off) * hw;
                            d.data_mut()[s * c * hw..(s + 1) * c * hw]
                                .copy_from_slice(&g.data()[src..src + c * hw]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    off += c;
                }
            }
            Op::SliceC { x, start } => {
                let [n, c, h, w] = self.shape(*x);
                let len = value.shape()[1];
                let hw = h * w;
                let mut d = Tensor::zeros([n, c, h, w]);
                for s in 0..n {
                    let dst = (s * c + start) * hw;
                    d.data_mut()[dst..dst + len * hw]
                        .copy_from_slice(&g.data()[s * len * hw..(s + 1) * len * hw]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Dwt(x) => self.accumulate(grads, *x, idwt_tensor(&g)),
            Op::Idwt(x) => self.accumulate(grads, *x, dwt_tensor(&g)),
            Op::PixelShuffle(x, r) => {
                let r = *r;
                let [n, cr, h, w] = self.shape(*x);
                let c = cr / (r * r);
                let mut d = Tensor::zeros([n, cr, h, w]);
                for s in 0..n {
                    for ch in 0..c {
                        let src = g.plane(s, ch).to_vec();
                        for i in 0..r {
                            for j in 0..r {
                                let dst = d.plane_mut(s, ch * r * r + i * r + j);
                                for y in 0..h {
                                    for xx in 0..w {
                                        dst[y * w + xx] = src[(y * r + i) * w * r + xx * r + j];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::AvgPool(x, k) => {
                let k = *k;
                let [n, c, h, w] = self.shape(*x);
                let wo = w / k;
                let inv = 1.0 / (k * k) as f64;
                let mut d = Tensor::zeros([n, c, h, w]);
                for s in 0..n {
                    for ch in 0..c {
                        let src = g.plane(s, ch).to_vec();
                        let dst = d.plane_mut(s, ch);
                        for y in 0..h {
                            for xx in 0..w {
                                dst[y * w + xx] = src[(y / k) * wo + xx / k] * inv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let [n, c, hq, wq] = self.shape(*q);
                let [_, _, hk, wk] = self.shape(*k);
                let heads = *heads;
                let dh = c / heads;
                let (tq, tk) = (hq * wq, hk * wk);
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(self.shape(*q));
                let mut dk = Tensor::zeros(self.shape(*k));
                let mut dv = Tensor::zeros(self.shape(*v));
                let mut dp = vec![0.0; tq * tk];
                for s in 0..n {
                    for hd in 0..heads {
                        let p = &probs[(s * heads + hd) * tq * tk..][..tq * tk];
                        let qo = (s * c + hd * dh) * tq;
                        let ko = (s * c + hd * dh) * tk;
                        let go = &g.data()[qo..qo + dh * tq];
                        let qs = &self.value(*q).data()[qo..qo + dh * tq];
                        let ks = &self.value(*k).data()[ko..ko + dh * tk];
                        let vs = &self.value(*v).data()[ko..ko + dh * tk];
                        gemm(dh, tq, tk, 1.0, go, false, p, false, 1.0, &mut dv.data_mut()[ko..ko + dh * tk]);
                        gemm(tq, dh, tk, 1.0, go, true, vs, false, 0.0, &mut dp);
                        for (prow, drow) in p.chunks_exact(tk).zip(dp.chunks_exact_mut(tk)) {
                            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                            for (d, &pv) in drow.iter_mut().zip(prow) {
                                *d = pv * (*d - dot);
                            }
                        }
                        gemm(dh, tk, tq, scale, ks, false, &dp, true, 1.0, &mut dq.data_mut()[qo..qo + dh * tq]);
                        gemm(dh, tq, tk, scale, qs, false, &dp, false, 1.0, &mut dk.data_mut()[ko..ko + dh * tk]);
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let d = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                        .collect(),
                )
                .expect("shape");
                self.accumulate(grads, *x, d);
            }
            Op::L1 { x, target } => {
                let xv = self.value(*x);
                let s = g.item() / target.len() as f64;
                let d = Tensor::from_vec(
                    xv.shape(),
                    xv.data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, b)| {
                            let diff = a - b;
                            if diff > 0.0 {
                                s
                            } else if diff < 0.0 {
                                -s
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )
                .expect("shape");
                self.accumulate(grads, *x, d);
            }
            Op::WeightedSum { x, weights } => {
                let mut d = weights.clone();
                d.scale(g.item());
                self.accumulate(grads, *x, d);
            }
        }
    }
}

pub(crate) fn dwt_tensor(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (h2, w2) = (h / 2, w / 2);
    let q = h2 * w2;
    let mut out = Tensor::zeros([n, 4 * c, h2, w2]);
    let mut bands = vec![0.0; 4 * q];
    for s in 0..n {
        for ch in 0..c {
            let (ll, rest) = bands.split_at_mut(q);
            let (lh, rest) = rest.split_at_mut(q);
            let (hl, hh) = rest.split_at_mut(q);
            haar_forward_plane(x.plane(s, ch), h, w, ll, lh, hl, hh);
            for b in 0..4 {
                out.plane_mut(s, b * c + ch).copy_from_slice(&bands[b * q..(b + 1) * q]);
            }
        }
    }
    out
}

pub(crate) fn idwt_tensor(x: &Tensor) -> Tensor {
    let [n, c4, h2, w2] = x.shape();
    let c = c4 / 4;
    let mut out = Tensor::zeros([n, c, 2 * h2, 2 * w2]);
    for s in 0..n {
        for ch in 0..c {
            let (ll, lh, hl, hh) = (
                x.plane(s, ch).to_vec(),
                x.plane(s, c + ch).to_vec(),
                x.plane(s, 2 * c + ch).to_vec(),
                x.plane(s, 3 * c + ch).to_vec(),
            );
            haar_inverse_plane(&ll, &lh, &hl, &hh, h2, w2, out.plane_mut(s, ch));
        }
    }
    out
}
