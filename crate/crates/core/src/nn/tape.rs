//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass together with the
//! values it produced. [`Tape::backward`] walks the record in reverse and
//! accumulates adjoints; gradients reaching parameter leaves are added into a
//! caller-supplied buffer indexed like the model's parameter list.
//!
//! Layouts are row-major. Volumetric activations are `[C, D, H, W]`, where `D`
//! runs over the stacked frames.

use super::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Stride and zero padding of a 3D convolution, ordered `(depth, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv3d {
        x: Var,
        w: Var,
        spec: ConvSpec,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Silu(Var),
    Tanh(Var),
    Add(Var, Var),
    MeanDepth(Var),
    ChannelMix {
        x: Var,
        w: Var,
    },
    Softmax(Var),
    WeightedPool {
        x: Var,
        a: Var,
    },
    MeanPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf bound to model parameter `index`.
    pub fn param(&mut self, index: usize, t: Tensor) -> Var {
        self.push(t, Op::Param(index))
    }

    /// Grouped 3D cross-correlation without bias.
    /// `x: [Cin, D, H, W]`, `w: [Cout, Cin / groups, kd, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        let geo = ConvGeometry::new(xs.shape(), ws.shape(), spec);
        let mut out = vec![0.0; geo.out_len()];
        geo.forward(xs.data(), ws.data(), &mut out);
        let shape = vec![geo.cout, geo.out[0], geo.out[1], geo.out[2]];
        self.push(Tensor::from_vec(shape, out), Op::Conv3d { x, w, spec })
    }

    /// Per-channel normalisation over all remaining axes, then `gamma * xhat + beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let s = xv.len() / c;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; xv.len()];
        for ch in 0..c {
            let seg = &xv.data()[ch * s..(ch + 1) * s];
            let mean = seg.iter().sum::<f64>() / s as f64;
            let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[ch] = is;
            for (k, v) in seg.iter().enumerate() {
                let h = (v - mean) * is;
                xhat[ch * s + k] = h;
                out[ch * s + k] = g[ch] * h + b[ch];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_vec(shape, out),
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push(t, Op::Silu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_vec(shape, data), Op::Add(a, b))
    }

    /// `[C, D, H, W] -> [C, H * W]`, averaging over `D`.
    pub fn mean_depth(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [c, d, h, w] = dims4(xv.shape());
        let p = h * w;
        let mut out = vec![0.0; c * p];
        for ch in 0..c {
            for dd in 0..d {
                let src = &xv.data()[(ch * d + dd) * p..(ch * d + dd + 1) * p];
                for (o, s) in out[ch * p..(ch + 1) * p].iter_mut().zip(src) {
                    *o += s / d as f64;
                }
            }
        }
        self.push(Tensor::from_vec(vec![c, p], out), Op::MeanDepth(x))
    }

    /// `y[a, p] = sum_c w[a, c] x[c, p]` for `x: [C, P]`, `w: [A, C]`.
    pub fn channel_mix(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (c, p) = (xv.shape()[0], xv.shape()[1]);
        let a = wv.shape()[0];
        assert_eq!(wv.shape()[1], c, "channel_mix: inner dimension");
        let mut out = vec![0.0; a * p];
        for i in 0..a {
            for ch in 0..c {
                let wgt = wv.data()[i * c + ch];
                let src = &xv.data()[ch * p..(ch + 1) * p];
                for (o, s) in out[i * p..(i + 1) * p].iter_mut().zip(src) {
                    *o += wgt * s;
                }
            }
        }
        self.push(Tensor::from_vec(vec![a, p], out), Op::ChannelMix { x, w })
    }

    /// Softmax over every entry of `x`; the result is flattened to `[len]`.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = xv.data().iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let n = e.len();
        let out = e.into_iter().map(|v| v / s).collect();
        self.push(Tensor::from_vec(vec![n], out), Op::Softmax(x))
    }

    /// `y[c] = sum_p a[p] x[c, p]`.
    pub fn weighted_pool(&mut self, x: Var, a: Var) -> Var {
        let (xv, av) = (self.value(x), self.value(a));
        let (c, p) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(av.len(), p, "weighted_pool: weight count");
        let out = (0..c)
            .map(|ch| {
                xv.data()[ch * p..(ch + 1) * p]
                    .iter()
                    .zip(av.data())
                    .map(|(x, w)| x * w)
                    .sum()
            })
            .collect();
        self.push(Tensor::from_vec(vec![c], out), Op::WeightedPool { x, a })
    }

    /// `y[c] = mean_p x[c, p]`.
    pub fn mean_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, p) = (xv.shape()[0], xv.shape()[1]);
        let out = (0..c)
            .map(|ch| xv.data()[ch * p..(ch + 1) * p].iter().sum::<f64>() / p as f64)
            .collect();
        self.push(Tensor::from_vec(vec![c], out), Op::MeanPool(x))
    }

    /// `W x + b` for `x: [I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (o, i) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.len(), i, "linear: input width");
        let out = (0..o)
            .map(|r| {
                bv.data()[r]
                    + wv.data()[r * i..(r + 1) * i]
                        .iter()
                        .zip(xv.data())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        self.push(Tensor::from_vec(vec![o], out), Op::Linear { x, w, b })
    }

    /// Back-propagates `seed = dL/d(root)` and adds parameter gradients into
    /// `param_grads` (one flat buffer per model parameter).
    pub fn backward(&self, root: Var, seed: &[f64], param_grads: &mut [Vec<f64>]) {
        assert_eq!(seed.len(), self.value(root).len(), "seed length");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed.to_vec());

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    for (acc, v) in param_grads[*p].iter_mut().zip(&g) {
                        *acc += v;
                    }
                }
                Op::Conv3d { x, w, spec } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let geo = ConvGeometry::new(xv.shape(), wv.shape(), *spec);
                    let mut dx = vec![0.0; xv.len()];
                    let mut dw = vec![0.0; wv.len()];
                    geo.backward(xv.data(), wv.data(), &g, &mut dx, &mut dw);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = inv_std.len();
                    let s = g.len() / c;
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![0.0; g.len()];
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for ch in 0..c {
                        let r = ch * s..(ch + 1) * s;
                        let (gy, xh) = (&g[r.clone()], &xhat[r.clone()]);
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for (dy, h) in gy.iter().zip(xh) {
                            db[ch] += dy;
                            dg[ch] += dy * h;
                            let dxh = dy * gam[ch];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * h;
                        }
                        let k = inv_std[ch] / s as f64;
                        for ((o, dy), h) in dx[r].iter_mut().zip(gy).zip(xh) {
                            let dxh = dy * gam[ch];
                            *o = k * (s as f64 * dxh - sum_dxh - h * sum_dxh_xh);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::Silu(x) => {
                    let xv = self.value(*x).data();
                    let dx = xv
                        .iter()
                        .zip(&g)
                        .map(|(&v, dy)| {
                            let s = sigmoid(v);
                            dy * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let dx = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(y, dy)| dy * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::MeanDepth(x) => {
                    let [c, d, h, w] = dims4(self.value(*x).shape());
                    let p = h * w;
                    let mut dx = vec![0.0; c * d * p];
                    for ch in 0..c {
                        for dd in 0..d {
                            let dst = &mut dx[(ch * d + dd) * p..(ch * d + dd + 1) * p];
                            for (o, s) in dst.iter_mut().zip(&g[ch * p..(ch + 1) * p]) {
                                *o = s / d as f64;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ChannelMix { x, w } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (c, p) = (xv.shape()[0], xv.shape()[1]);
                    let a = wv.shape()[0];
                    let mut dx = vec![0.0; c * p];
                    let mut dw = vec![0.0; a * c];
                    for i in 0..a {
                        let gy = &g[i * p..(i + 1) * p];
                        for ch in 0..c {
                            let wgt = wv.data()[i * c + ch];
                            let xs = &xv.data()[ch * p..(ch + 1) * p];
                            let mut acc = 0.0;
                            for ((o, dy), xval) in dx[ch * p..(ch + 1) * p].iter_mut().zip(gy).zip(xs) {
                                *o += wgt * dy;
                                acc += dy * xval;
                            }
                            dw[i * c + ch] = acc;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let dot: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
                    let dx = y.iter().zip(&g).map(|(yv, dy)| yv * (dy - dot)).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::WeightedPool { x, a } => {
                    let (xv, av) = (self.value(*x), self.value(*a));
                    let (c, p) = (xv.shape()[0], xv.shape()[1]);
                    let mut dx = vec![0.0; c * p];
                    let mut da = vec![0.0; p];
                    for ch in 0..c {
                        let xs = &xv.data()[ch * p..(ch + 1) * p];
                        for k in 0..p {
                            dx[ch * p + k] = av.data()[k] * g[ch];
                            da[k] += g[ch] * xs[k];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *a, da);
                }
                Op::MeanPool(x) => {
                    let xv = self.value(*x);
                    let (c, p) = (xv.shape()[0], xv.shape()[1]);
                    let mut dx = vec![0.0; c * p];
                    for ch in 0..c {
                        dx[ch * p..(ch + 1) * p].fill(g[ch] / p as f64);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (o, i) = (wv.shape()[0], wv.shape()[1]);
                    let mut dx = vec![0.0; i];
                    let mut dw = vec![0.0; o * i];
                    for r in 0..o {
                        for k in 0..i {
                            dx[k] += wv.data()[r * i + k] * g[r];
                            dw[r * i + k] = g[r] * xv.data()[k];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, g);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dims4(shape: &[usize]) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "expected a [C, D, H, W] tensor, got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

/// Output extent of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

struct ConvGeometry {
    cin: usize,
    cout: usize,
    groups: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
    spec: ConvSpec,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], spec: ConvSpec) -> Self {
        let [cin, d, h, wd] = dims4(x);
        assert_eq!(w.len(), 5, "conv kernel must be 5-dimensional");
        let cout = w[0];
        assert_eq!(cin % spec.groups, 0, "groups must divide input channels");
        assert_eq!(cout % spec.groups, 0, "groups must divide output channels");
        assert_eq!(w[1], cin / spec.groups, "kernel input channels");
        let input = [d, h, wd];
        let kernel = [w[2], w[3], w[4]];
        let out = std::array::from_fn(|k| {
            conv_out_len(input[k], kernel[k], spec.stride[k], spec.padding[k])
        });
        Self {
            cin,
            cout,
            groups: spec.groups,
            input,
            kernel,
            out,
            spec,
        }
    }

    fn out_len(&self) -> usize {
        self.cout * self.out.iter().product::<usize>()
    }

    /// Output indices `o` along `axis` whose input `o * s + k - p` is in range.
    fn valid(&self, axis: usize, k: usize) -> std::ops::Range<usize> {
        let s = self.spec.stride[axis] as isize;
        let p = self.spec.padding[axis] as isize;
        let n = self.input[axis] as isize;
        let k = k as isize;
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        let hi = (n - 1 + p - k).div_euclid(s) + 1;
        let hi = hi.min(self.out[axis] as isize);
        if hi <= lo {
            0..0
        } else {
            lo as usize..hi as usize
        }
    }

    /// Calls `f(out_row_offset, in_row_offset, ow_range, iw_first)` for every
    /// (output channel, input channel, kernel tap, output row) combination.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, std::ops::Range<usize>, usize)) {
        let cin_g = self.cin / self.groups;
        let cout_g = self.cout / self.groups;
        let [kd, kh, kw] = self.kernel;
        let [id, ih, iw] = self.input;
        let [od, oh, ow] = self.out;
        let [sd, sh, sw] = self.spec.stride;
        let [pd, ph, pw] = self.spec.padding;
        for oc in 0..self.cout {
            let g = oc / cout_g;
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                for a in 0..kd {
                    let rd = self.valid(0, a);
                    for b in 0..kh {
                        let rh = self.valid(1, b);
                        for c in 0..kw {
                            let rw = self.valid(2, c);
                            if rw.is_empty() {
                                continue;
                            }
                            let widx = (((oc * cin_g + icg) * kd + a) * kh + b) * kw + c;
                            let iw0 = rw.start * sw + c - pw;
                            for o_d in rd.clone() {
                                let i_d = o_d * sd + a - pd;
                                for o_h in rh.clone() {
                                    let i_h = o_h * sh + b - ph;
                                    let out_row = ((oc * od + o_d) * oh + o_h) * ow;
                                    let in_row = ((ic * id + i_d) * ih + i_h) * iw;
                                    f(widx, out_row, in_row, sw, rw.clone(), iw0);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        self.for_each_row(|widx, out_row, in_row, sw, rw, iw0| {
            let wv = w[widx];
            let n = rw.len();
            let dst = &mut out[out_row + rw.start..out_row + rw.end];
            if sw == 1 {
                let src = &x[in_row + iw0..in_row + iw0 + n];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += wv * s;
                }
            } else {
                for (j, o) in dst.iter_mut().enumerate() {
                    *o += wv * x[in_row + iw0 + j * sw];
                }
            }
        });
    }

    fn backward(&self, x: &[f64], w: &[f64], dy: &[f64], dx: &mut [f64], dw: &mut [f64]) {
        self.for_each_row(|widx, out_row, in_row, sw, rw, iw0| {
            let wv = w[widx];
            let n = rw.len();
            let gy = &dy[out_row + rw.start..out_row + rw.end];
            let mut acc = 0.0;
            if sw == 1 {
                let xs = &x[in_row + iw0..in_row + iw0 + n];
                let dxs = &mut dx[in_row + iw0..in_row + iw0 + n];
                for ((d, g), xv) in dxs.iter_mut().zip(gy).zip(xs) {
                    *d += wv * g;
                    acc += g * xv;
                }
            } else {
                for (j, g) in gy.iter().enumerate() {
                    let i = in_row + iw0 + j * sw;
                    dx[i] += wv * g;
                    acc += g * x[i];
                }
            }
            dw[widx] += acc;
        });
    }
}
