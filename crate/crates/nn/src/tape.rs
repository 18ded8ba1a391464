//! Define-by-run tape. Every op appends a node holding its forward value;
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients.
//!
//! Conventions: images are `[n, c, h, w]`, feature vectors `[n, f]`, all
//! arrays are kept in standard (C) layout.

use std::collections::HashMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};

use crate::conv::{col2im, im2col, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Silu(Var),
    Add(Var, Var),
    Modulate {
        h: Var,
        scale: Var,
        shift: Var,
    },
    Concat(Var, Var),
    Narrow {
        x: Var,
        start: usize,
    },
    Upsample2(Var),
    GlobalAvgPool(Var),
    /// Pure permutation; `perm[out] = in`.
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    param_of: HashMap<usize, ParamId>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
    param_of: HashMap<usize, ParamId>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients sorted by parameter id.
    pub fn params(&self) -> Vec<(ParamId, &ArrayD<T>)> {
        let mut out: Vec<_> = self
            .param_of
            .iter()
            .filter_map(|(&node, &pid)| self.grads[node].as_ref().map(|g| (pid, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

fn dims4(a: &ArrayD<impl Sized>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected [n, c, h, w], got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn dims2(a: &ArrayD<impl Sized>) -> (usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 2, "expected [n, f], got {s:?}");
    (s[0], s[1])
}

fn slice<T>(a: &ArrayD<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}

fn slice_mut<T>(a: &mut ArrayD<T>) -> &mut [T] {
    a.as_slice_mut().expect("standard layout")
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_of: HashMap::new(),
        }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: ArrayD<T>) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.push(value, Op::Leaf, false)
    }

    /// Input leaf whose gradient is wanted (e.g. for gradient checks).
    pub fn input_with_grad(&mut self, value: ArrayD<T>) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.push(value, Op::Leaf, true)
    }

    /// Brings a parameter onto the tape once; later calls reuse the node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.params.insert(id, v);
        self.param_of.insert(v.0, id);
        v
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = dims4(self.value(x));
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], c, "conv input channels");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let co = ws[0];
        let g = ConvGeom {
            c,
            h,
            w: wd,
            k: ws[2],
            stride,
            pad,
        };
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = ArrayD::<T>::zeros(IxDyn(&[n, co, oh, ow]));
        {
            let xv = slice(self.value(x));
            let wm = self
                .value(w)
                .view()
                .into_shape_with_order((co, g.col_rows()))
                .unwrap();
            let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
            let out_s = slice_mut(&mut out);
            let img_len = c * h * wd;
            let out_len = co * oh * ow;
            for i in 0..n {
                im2col(&xv[i * img_len..(i + 1) * img_len], g, &mut cols);
                let cm = ArrayView2::from_shape((g.col_rows(), g.col_cols()), &cols).unwrap();
                let mut om = ArrayViewMut2::from_shape(
                    (co, oh * ow),
                    &mut out_s[i * out_len..(i + 1) * out_len],
                )
                .unwrap();
                general_mat_mul(T::one(), &wm, &cm, T::zero(), &mut om);
            }
            if let Some(b) = b {
                let bv = slice(self.value(b));
                for (chunk, &bias) in out_s.chunks_mut(oh * ow).zip(bv.iter().cycle()) {
                    for o in chunk {
                        *o += bias;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, f) = dims2(self.value(x));
        let (o, wf) = dims2(self.value(w));
        assert_eq!(f, wf, "linear input features");
        let mut out = Array2::<T>::zeros((n, o));
        {
            let xm = self.value(x).view().into_shape_with_order((n, f)).unwrap();
            let wm = self.value(w).view().into_shape_with_order((o, f)).unwrap();
            general_mat_mul(T::one(), &xm, &wm.t(), T::zero(), &mut out);
            if let Some(b) = b {
                let bv = slice(self.value(b));
                for mut row in out.rows_mut() {
                    for (r, &bb) in row.iter_mut().zip(bv) {
                        *r += bb;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out.into_dyn(), Op::Linear { x, w, b }, needs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        assert!(groups > 0 && c % groups == 0, "channels {c} not divisible by {groups} groups");
        let cg = c / groups;
        let m = cg * h * w;
        let eps = T::cast(eps);
        let xv = slice(self.value(x));
        let gv = slice(self.value(gamma));
        let bv = slice(self.value(beta));
        let mut out = vec![T::zero(); xv.len()];
        let mut mean = Vec::with_capacity(n * groups);
        let mut rstd = Vec::with_capacity(n * groups);
        let mf = T::cast(m);
        for i in 0..n {
            for gi in 0..groups {
                let off = (i * c + gi * cg) * h * w;
                let seg = &xv[off..off + m];
                let mu = seg.iter().copied().sum::<T>() / mf;
                let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / mf;
                let rs = T::one() / (var + eps).sqrt();
                mean.push(mu);
                rstd.push(rs);
                for cc in 0..cg {
                    let ch = gi * cg + cc;
                    let o = off + cc * h * w;
                    for j in 0..h * w {
                        out[o + j] = (xv[o + j] - mu) * rs * gv[ch] + bv[ch];
                    }
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            needs,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * sigmoid(v));
        let needs = self.needs(x);
        self.push(out, Op::Silu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let out = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    /// `h * (1 + scale) + shift` with `scale`, `shift` of shape `[n, c]`
    /// broadcast over the spatial dims of `h: [n, c, h, w]`.
    pub fn modulate(&mut self, h: Var, scale: Var, shift: Var) -> Var {
        let (n, c, hh, ww) = dims4(self.value(h));
        assert_eq!(self.value(scale).shape(), &[n, c], "modulation scale shape");
        assert_eq!(self.value(shift).shape(), &[n, c], "modulation shift shape");
        let hw = hh * ww;
        let mut out = self.value(h).clone();
        {
            let sv = slice(self.value(scale));
            let bv = slice(self.value(shift));
            for (k, chunk) in slice_mut(&mut out).chunks_mut(hw).enumerate() {
                let s = T::one() + sv[k];
                let b = bv[k];
                for v in chunk {
                    *v = *v * s + b;
                }
            }
        }
        let needs = self.needs(h) || self.needs(scale) || self.needs(shift);
        self.push(out, Op::Modulate { h, scale, shift }, needs)
    }

    /// Concatenation along axis 1 (channels or features).
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat shapes")
            .as_standard_layout()
            .into_owned();
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Concat(a, b), needs)
    }

    /// Slice `[start, start + len)` along axis 1.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self
            .value(x)
            .slice_axis(Axis(1), (start..start + len).into())
            .as_standard_layout()
            .into_owned();
        let needs = self.needs(x);
        self.push(out, Op::Narrow { x, start }, needs)
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let xv = slice(self.value(x));
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c, 2 * h, 2 * w]), out).unwrap();
        let needs = self.needs(x);
        self.push(out, Op::Upsample2(x), needs)
    }

    /// `[n, c, h, w] -> [n, c f^2, h / f, w / f]`, moving each `f x f` block
    /// into channels.
    pub fn space_to_depth(&mut self, x: Var, f: usize) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        assert!(h % f == 0 && w % f == 0, "spatial dims must divide by {f}");
        let (oh, ow) = (h / f, w / f);
        let mut perm = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for dy in 0..f {
                    for dx in 0..f {
                        for y in 0..oh {
                            for xx in 0..ow {
                                perm.push(((b * c + ch) * h + y * f + dy) * w + xx * f + dx);
                            }
                        }
                    }
                }
            }
        }
        self.permute(x, perm, &[n, c * f * f, oh, ow])
    }

    /// Inverse of [`Tape::space_to_depth`].
    pub fn depth_to_space(&mut self, x: Var, f: usize) -> Var {
        let (n, cf, h, w) = dims4(self.value(x));
        assert!(cf % (f * f) == 0, "channels must divide by {}", f * f);
        let c = cf / (f * f);
        let (oh, ow) = (h * f, w * f);
        let mut perm = Vec::with_capacity(n * cf * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let k = ch * f * f + (y % f) * f + xx % f;
                        perm.push(((b * cf + k) * h + y / f) * w + xx / f);
                    }
                }
            }
        }
        self.permute(x, perm, &[n, c, oh, ow])
    }

    fn permute(&mut self, x: Var, perm: Vec<usize>, shape: &[usize]) -> Var {
        let xv = slice(self.value(x));
        let out: Vec<T> = perm.iter().map(|&i| xv[i]).collect();
        let out = ArrayD::from_shape_vec(IxDyn(shape), out).unwrap();
        let needs = self.needs(x);
        self.push(out, Op::Permute { x, perm }, needs)
    }

    /// Mean over the spatial dims: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let inv = T::one() / T::cast(h * w);
        let out: Vec<T> = slice(self.value(x))
            .chunks(h * w)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c]), out).unwrap();
        let needs = self.needs(x);
        self.push(out, Op::GlobalAvgPool(x), needs)
    }

    /// Reverse pass from `root`, seeded with `dL/droot`.
    pub fn backward(&self, root: Var, seed: ArrayD<T>) -> Gradients<T> {
        assert_eq!(
            seed.shape(),
            self.value(root).shape(),
            "seed must match root shape"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed.as_standard_layout().into_owned());
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            param_of: self.param_of.clone(),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.back_conv(*x, *w, *b, *stride, *pad, g, grads),
            Op::Linear { x, w, b } => {
                let (n, f) = dims2(self.value(*x));
                let (o, _) = dims2(self.value(*w));
                let gm = g.view().into_shape_with_order((n, o)).unwrap();
                if self.needs(*x) {
                    let wm = self.value(*w).view().into_shape_with_order((o, f)).unwrap();
                    let mut dx = Array2::<T>::zeros((n, f));
                    general_mat_mul(T::one(), &gm, &wm, T::zero(), &mut dx);
                    accum(grads, *x, dx.into_dyn());
                }
                if self.needs(*w) {
                    let xm = self.value(*x).view().into_shape_with_order((n, f)).unwrap();
                    let mut dw = Array2::<T>::zeros((o, f));
                    general_mat_mul(T::one(), &gm.t(), &xm, T::zero(), &mut dw);
                    accum(grads, *w, dw.into_dyn());
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        accum(grads, *b, gm.sum_axis(Axis(0)).into_dyn());
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let (n, c, h, w) = dims4(self.value(*x));
                let cg = c / groups;
                let hw = h * w;
                let m = T::cast(cg * hw);
                let xv = slice(self.value(*x));
                let gv = slice(self.value(*gamma));
                let gs = slice(g);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for gi in 0..*groups {
                        let k = i * groups + gi;
                        let (mu, rs) = (mean[k], rstd[k]);
                        let off = (i * c + gi * cg) * hw;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            for j in 0..hw {
                                let p = off + cc * hw + j;
                                let xhat = (xv[p] - mu) * rs;
                                dgamma[ch] += gs[p] * xhat;
                                dbeta[ch] += gs[p];
                                let d = gs[p] * gv[ch];
                                sum_d += d;
                                sum_dx += d * xhat;
                            }
                        }
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            for j in 0..hw {
                                let p = off + cc * hw + j;
                                let xhat = (xv[p] - mu) * rs;
                                let d = gs[p] * gv[ch];
                                dx[p] = rs / m * (m * d - sum_d - xhat * sum_dx);
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    accum(grads, *x, ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap());
                }
                if self.needs(*gamma) {
                    let shape = self.value(*gamma).raw_dim();
                    accum(grads, *gamma, ArrayD::from_shape_vec(shape, dgamma).unwrap());
                }
                if self.needs(*beta) {
                    let shape = self.value(*beta).raw_dim();
                    accum(grads, *beta, ArrayD::from_shape_vec(shape, dbeta).unwrap());
                }
            }
            Op::Silu(x) => {
                if self.needs(*x) {
                    let mut d = self.value(*x).mapv(|v| {
                        let s = sigmoid(v);
                        s * (T::one() + v * (T::one() - s))
                    });
                    d *= g;
                    accum(grads, *x, d);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accum(grads, *b, g.clone());
                }
            }
            Op::Modulate { h, scale, shift } => {
                let (n, c, hh, ww) = dims4(self.value(*h));
                let hw = hh * ww;
                let hv = slice(self.value(*h));
                let sv = slice(self.value(*scale));
                let gs = slice(g);
                if self.needs(*h) {
                    let mut dh = g.clone();
                    for (k, chunk) in slice_mut(&mut dh).chunks_mut(hw).enumerate() {
                        let s = T::one() + sv[k];
                        for v in chunk {
                            *v *= s;
                        }
                    }
                    accum(grads, *h, dh);
                }
                let mut ds = vec![T::zero(); n * c];
                let mut db = vec![T::zero(); n * c];
                for k in 0..n * c {
                    let gg = &gs[k * hw..(k + 1) * hw];
                    let hh = &hv[k * hw..(k + 1) * hw];
                    ds[k] = gg.iter().zip(hh).map(|(&a, &b)| a * b).sum();
                    db[k] = gg.iter().copied().sum();
                }
                if self.needs(*scale) {
                    accum(grads, *scale, ArrayD::from_shape_vec(IxDyn(&[n, c]), ds).unwrap());
                }
                if self.needs(*shift) {
                    accum(grads, *shift, ArrayD::from_shape_vec(IxDyn(&[n, c]), db).unwrap());
                }
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).shape()[1];
                if self.needs(*a) {
                    let ga = g.slice_axis(Axis(1), (0..ca).into()).as_standard_layout().into_owned();
                    accum(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = g.slice_axis(Axis(1), (ca..).into()).as_standard_layout().into_owned();
                    accum(grads, *b, gb);
                }
            }
            Op::Narrow { x, start } => {
                if self.needs(*x) {
                    let mut dx = ArrayD::<T>::zeros(self.value(*x).raw_dim());
                    let len = g.shape()[1];
                    dx.slice_axis_mut(Axis(1), (*start..*start + len).into())
                        .assign(g);
                    accum(grads, *x, dx);
                }
            }
            Op::Upsample2(x) => {
                if self.needs(*x) {
                    let (n, c, h, w) = dims4(self.value(*x));
                    let gs = slice(g);
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for p in 0..n * c {
                        let src = &gs[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut dx[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                            }
                        }
                    }
                    accum(grads, *x, ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap());
                }
            }
            Op::Permute { x, perm } => {
                if self.needs(*x) {
                    let mut dx = ArrayD::zeros(self.value(*x).raw_dim());
                    let d = slice_mut(&mut dx);
                    for (&i, &gv) in perm.iter().zip(slice(g)) {
                        d[i] = gv;
                    }
                    accum(grads, *x, dx);
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.needs(*x) {
                    let (n, c, h, w) = dims4(self.value(*x));
                    let inv = T::one() / T::cast(h * w);
                    let gs = slice(g);
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for (k, chunk) in dx.chunks_mut(h * w).enumerate() {
                        chunk.fill(gs[k] * inv);
                    }
                    accum(grads, *x, ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap());
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn back_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) {
        let (n, c, h, wd) = dims4(self.value(x));
        let ws = self.value(w).shape();
        let (co, k) = (ws[0], ws[2]);
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
        };
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        let gs = slice(g);
        let out_len = co * ncol;
        if let Some(b) = b {
            if self.needs(b) {
                let mut db = vec![T::zero(); co];
                for (kk, chunk) in gs.chunks(ncol).enumerate() {
                    db[kk % co] += chunk.iter().copied().sum::<T>();
                }
                accum(grads, b, ArrayD::from_shape_vec(IxDyn(&[co]), db).unwrap());
            }
        }
        let need_w = self.needs(w);
        let need_x = self.needs(x);
        if !need_w && !need_x {
            return;
        }
        let xv = slice(self.value(x));
        let wm = self
            .value(w)
            .view()
            .into_shape_with_order((co, rows))
            .unwrap();
        let img_len = c * h * wd;
        let mut cols = vec![T::zero(); rows * ncol];
        let mut dcols = Array2::<T>::zeros((rows, ncol));
        let mut dw = Array2::<T>::zeros((co, rows));
        let mut dx = if need_x {
            vec![T::zero(); n * img_len]
        } else {
            Vec::new()
        };
        for i in 0..n {
            let gm = ArrayView2::from_shape((co, ncol), &gs[i * out_len..(i + 1) * out_len]).unwrap();
            if need_w {
                im2col(&xv[i * img_len..(i + 1) * img_len], geom, &mut cols);
                let cm = ArrayView2::from_shape((rows, ncol), &cols).unwrap();
                general_mat_mul(T::one(), &gm, &cm.t(), T::one(), &mut dw);
            }
            if need_x {
                general_mat_mul(T::one(), &wm.t(), &gm, T::zero(), &mut dcols);
                col2im(
                    dcols.as_slice().unwrap(),
                    geom,
                    &mut dx[i * img_len..(i + 1) * img_len],
                );
            }
        }
        if need_w {
            let shape = self.value(w).raw_dim();
            accum(
                grads,
                w,
                dw.into_shape_with_order(shape).unwrap(),
            );
        }
        if need_x {
            accum(
                grads,
                x,
                ArrayD::from_shape_vec(IxDyn(&[n, c, h, wd]), dx).unwrap(),
            );
        }
    }
}

fn accum<T: Real>(grads: &mut [Option<ArrayD<T>>], v: Var, delta: ArrayD<T>) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    /// Scalar objective `sum(out * probe)` so the seed is `probe`.
    fn check_grad<F>(inputs: Vec<ArrayD<f64>>, build: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.input_with_grad(a.clone())).collect();
        let out = build(&mut tape, &vars);
        let probe = rand_array(tape.value(out).shape(), &mut rng);
        let grads = tape.backward(out, probe.clone());
        let objective = |ins: &[ArrayD<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|a| t.input_with_grad(a.clone())).collect();
            let o = build(&mut t, &vs);
            (t.value(o) * &probe).sum()
        };
        let h = 1e-6;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v).expect("gradient present");
            for idx in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k} index {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for stride in [1, 2] {
            let x = rand_array(&[2, 2, 5, 6], &mut rng);
            let w = rand_array(&[3, 2, 3, 3], &mut rng);
            let b = rand_array(&[3], &mut rng);
            check_grad(vec![x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, 1));
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_array(&[3, 4], &mut rng);
        let w = rand_array(&[5, 4], &mut rng);
        let b = rand_array(&[5], &mut rng);
        check_grad(vec![x, w, b], |t, v| t.linear(v[0], v[1], Some(v[2])));
    }

    #[test]
    fn group_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_array(&[2, 4, 3, 3], &mut rng);
        let g = rand_array(&[4], &mut rng);
        let b = rand_array(&[4], &mut rng);
        check_grad(vec![x, g, b], |t, v| t.group_norm(v[0], v[1], v[2], 2, 1e-5));
    }

    #[test]
    fn elementwise_and_shape_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = rand_array(&[2, 3, 2, 2], &mut rng);
        let s = rand_array(&[2, 3], &mut rng);
        let b = rand_array(&[2, 3], &mut rng);
        check_grad(vec![h.clone(), s, b], |t, v| {
            let m = t.modulate(v[0], v[1], v[2]);
            t.silu(m)
        });
        let a = rand_array(&[2, 3, 2, 2], &mut rng);
        check_grad(vec![h.clone(), a], |t, v| {
            let c = t.concat(v[0], v[1]);
            let u = t.upsample2(c);
            let p = t.global_avg_pool(u);
            let n = t.narrow(p, 1, 4);
            let q = t.narrow(p, 0, 4);
            t.add(n, q)
        });
        let x = rand_array(&[2, 2, 4, 6], &mut rng);
        check_grad(vec![x], |t, v| {
            let d = t.space_to_depth(v[0], 2);
            let s = t.silu(d);
            t.depth_to_space(s, 2)
        });
    }

    #[test]
    fn space_to_depth_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_array(&[2, 3, 4, 4], &mut rng);
        let mut t = Tape::new();
        let v = t.input(x.clone());
        let d = t.space_to_depth(v, 2);
        assert_eq!(t.value(d).shape(), &[2, 12, 2, 2]);
        assert_eq!(t.value(d)[[1, 2 * 4 + 3, 1, 0]], x[[1, 2, 3, 1]]);
        let back = t.depth_to_space(d, 2);
        assert_eq!(t.value(back), &x);
    }

    #[test]
    fn param_reused_once_and_frozen_params_get_no_grad() {
        let mut store = ParamStore::<f64>::new();
        let w = store.ones("w", &[1, 2]);
        let f = store.ones("f", &[1, 2]);
        store.set_frozen(f, true);
        let mut tape = Tape::new();
        let x = tape.input(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 2.0]).unwrap());
        let a = tape.param(&store, w);
        let a2 = tape.param(&store, w);
        assert_eq!(a, a2);
        let fv = tape.param(&store, f);
        let y1 = tape.linear(x, a, None);
        let y2 = tape.linear(x, fv, None);
        let y = tape.add(y1, y2);
        let g = tape.backward(y, ArrayD::ones(IxDyn(&[1, 1])));
        let pg = g.params();
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].0, w);
        assert_eq!(pg[0].1.as_slice().unwrap(), &[1.0, 2.0]);
    }
}
