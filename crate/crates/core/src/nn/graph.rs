//! Tape-based reverse-mode differentiation over NCHW tensors.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep. Parameters are
//! borrowed, never copied, into the tape.

use std::collections::BTreeMap;

use super::tensor::{gemm, Mat, ParamSet, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p, T> {
    Owned(Vec<T>),
    Borrowed(&'p [T]),
}

impl<T> Value<'_, T> {
    fn as_slice(&self) -> &[T] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(s) => s,
        }
    }
}

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
        stats: Vec<(T, T)>,
    },
    Silu(Var),
    Add(Var, Var),
    Scale(Var, T),
    ScaleShift {
        x: Var,
        ss: Var,
    },
    Upsample2x(Var),
    Concat(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    ChannelMix {
        y: Var,
        e: Var,
    },
    RowCombo {
        table: Var,
        coeffs: Vec<Vec<(usize, T)>>,
    },
    SelectRows {
        a: Var,
        null: Var,
        mask: Vec<bool>,
    },
    ScalarLoss {
        x: Var,
        grad: Vec<T>,
    },
}

struct Node<'p, T> {
    shape: Vec<usize>,
    value: Value<'p, T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
    record: bool,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

fn silu_grad<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] =
                                plane[iy as usize * w + ix as usize] + row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

impl<'p, T: Real> Graph<'p, T> {
    /// A graph that records operations for `backward`.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
            params: BTreeMap::new(),
        }
    }

    /// A forward-only graph; nothing is kept for differentiation.
    pub fn inference() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = needs_grad && self.record;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, trainable: bool) -> Var {
        self.push(t.shape, t.data, Op::Leaf, trainable)
    }

    /// Binds every tensor of `ps` (under `prefix`) as a borrowed leaf.
    pub fn bind(&mut self, ps: &'p ParamSet<T>, prefix: &str, trainable: bool) {
        for (name, t) in ps.iter() {
            self.nodes.push(Node {
                shape: t.shape.clone(),
                value: Value::Borrowed(&t.data),
                op: Op::Leaf,
                needs_grad: trainable && self.record,
            });
            let v = Var(self.nodes.len() - 1);
            self.params.insert(format!("{prefix}{name}"), v);
        }
    }

    pub fn p(&self, name: &str) -> Var {
        *self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
        }
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Fails with the layer name if `v` holds a non-finite value.
    pub fn check_finite(&self, v: Var, layer: &str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("activation of {layer}")))
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv2d input channels");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let ckk = c * k * k;
        let hw = ho * wo;
        let mut out = vec![T::zero(); n * o * hw];
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); ckk * hw] };
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for i in 0..n {
                let xi = &xv[i * c * h * wd..(i + 1) * c * h * wd];
                let src: &[T] = if direct {
                    xi
                } else {
                    im2col(xi, c, h, wd, k, stride, pad, ho, wo, &mut cols);
                    &cols
                };
                gemm(
                    Mat::new(wv, o, ckk),
                    Mat::new(src, ckk, hw),
                    &mut out[i * o * hw..(i + 1) * o * hw],
                    T::zero(),
                );
            }
            if let Some(b) = b {
                let bv = self.value(b);
                for (j, chunk) in out.chunks_exact_mut(hw).enumerate() {
                    let bias = bv[j % o];
                    chunk.iter_mut().for_each(|v| *v = *v + bias);
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(vec![n, o, ho, wo], out, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, i) = (xs[0], xs[1]);
        let o = ws[0];
        assert_eq!(ws[1], i, "linear input width");
        let mut out = vec![T::zero(); n * o];
        gemm(
            Mat::new(self.value(x), n, i),
            Mat::new(self.value(w), o, i).t(),
            &mut out,
            T::zero(),
        );
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_exact_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, &bb)| *v = *v + bb);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(vec![n, o], out, Op::Linear { x, w, b }, ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let hw: usize = xs[2..].iter().product();
        assert_eq!(c % groups, 0, "group count must divide channels");
        let cg = c / groups;
        let m = cg * hw;
        let eps = 1e-5;
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![T::zero(); xv.len()];
        let mut stats = Vec::with_capacity(n * groups);
        for i in 0..n {
            for g in 0..groups {
                let off = (i * c + g * cg) * hw;
                let seg = &xv[off..off + m];
                let mean = seg.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64;
                let var = seg.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                let (mean_t, rstd_t) = (T::from_f64(mean), T::from_f64(rstd));
                stats.push((mean_t, rstd_t));
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let (ga, be) = (gv[ch], bv[ch]);
                    let o = off + cc * hw;
                    for j in 0..hw {
                        out[o + j] = (xv[o + j] - mean_t) * rstd_t * ga + be;
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            xs,
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            ng,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| v / (T::one() + (-v).exp()))
            .collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Silu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), ng)
    }

    /// Feature-wise modulation `x * (1 + scale) + shift` with `ss = [scale | shift]`
    /// of shape `[N, 2C]`.
    pub fn scale_shift(&mut self, x: Var, ss: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let hw: usize = xs[2..].iter().product();
        assert_eq!(self.shape(ss), [n, 2 * c], "scale_shift modulation shape");
        let xv = self.value(x);
        let sv = self.value(ss);
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let s = T::one() + sv[i * 2 * c + ch];
                let sh = sv[i * 2 * c + c + ch];
                let o = (i * c + ch) * hw;
                for j in 0..hw {
                    out[o + j] = xv[o + j] * s + sh;
                }
            }
        }
        let ng = self.ng(x) || self.ng(ss);
        self.push(xs, out, Op::ScaleShift { x, ss }, ng)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); nc * 4 * h * w];
        for p in 0..nc {
            for r in 0..2 * h {
                for c in 0..2 * w {
                    out[(p * 2 * h + r) * 2 * w + c] = xv[(p * h + r / 2) * w + c / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(vec![xs[0], xs[1], 2 * h, 2 * w], out, Op::Upsample2x(x), ng)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa[0] == sb[0] && sa[2..] == sb[2..], "concat shapes {sa:?} {sb:?}");
        let hw: usize = sa[2..].iter().product();
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&self.value(a)[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b)[i * cb * hw..(i + 1) * cb * hw]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let ng = self.ng(a) || self.ng(b);
        self.push(shape, out, Op::Concat(a, b), ng)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        assert!(start + len <= c);
        let hw: usize = xs[2..].iter().product();
        let mut out = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            out.extend_from_slice(&self.value(x)[(i * c + start) * hw..(i * c + start + len) * hw]);
        }
        let mut shape = xs.clone();
        shape[1] = len;
        let ng = self.ng(x);
        self.push(shape, out, Op::SliceChannels { x, start }, ng)
    }

    /// Per-pixel product `out[n, :, p] = y[n, :, p] @ e` for `y: [N, K, H, W]`, `e: [K, C]`.
    pub fn channel_mix(&mut self, y: Var, e: Var) -> Var {
        let ys = self.shape(y).to_vec();
        let es = self.shape(e).to_vec();
        let (n, k) = (ys[0], ys[1]);
        let hw: usize = ys[2..].iter().product();
        assert_eq!(es[0], k, "channel_mix rows");
        let co = es[1];
        let mut out = vec![T::zero(); n * co * hw];
        for i in 0..n {
            gemm(
                Mat::new(self.value(e), k, co).t(),
                Mat::new(&self.value(y)[i * k * hw..(i + 1) * k * hw], k, hw),
                &mut out[i * co * hw..(i + 1) * co * hw],
                T::zero(),
            );
        }
        let mut shape = ys.clone();
        shape[1] = co;
        let ng = self.ng(y) || self.ng(e);
        self.push(shape, out, Op::ChannelMix { y, e }, ng)
    }

    /// Output row `b` is `Σ coeff * table[row]` over `coeffs[b]`.
    pub fn row_combo(&mut self, table: Var, coeffs: Vec<Vec<(usize, f64)>>) -> Var {
        let ts = self.shape(table).to_vec();
        let d = ts[1];
        let coeffs: Vec<Vec<(usize, T)>> = coeffs
            .into_iter()
            .map(|r| r.into_iter().map(|(i, c)| (i, T::from_f64(c))).collect())
            .collect();
        let tv = self.value(table);
        let mut out = vec![T::zero(); coeffs.len() * d];
        for (b, row) in coeffs.iter().enumerate() {
            let o = &mut out[b * d..(b + 1) * d];
            for &(i, c) in row {
                assert!(i < ts[0], "row index out of range");
                for (ov, &tv) in o.iter_mut().zip(&tv[i * d..(i + 1) * d]) {
                    *ov = *ov + c * tv;
                }
            }
        }
        let ng = self.ng(table);
        self.push(vec![coeffs.len(), d], out, Op::RowCombo { table, coeffs }, ng)
    }

    /// Replaces rows of `a` where `mask` holds with the vector `null`.
    pub fn select_rows(&mut self, a: Var, null: Var, mask: Vec<bool>) -> Var {
        let s = self.shape(a).to_vec();
        let d = s[1];
        assert_eq!(self.value(null).len(), d);
        assert_eq!(mask.len(), s[0]);
        let mut out = self.value(a).to_vec();
        for (b, &m) in mask.iter().enumerate() {
            if m {
                out[b * d..(b + 1) * d].copy_from_slice(self.value(null));
            }
        }
        let ng = self.ng(a) || self.ng(null);
        self.push(s, out, Op::SelectRows { a, null, mask }, ng)
    }

    /// Scalar node whose derivative with respect to `x` was computed by the caller.
    pub fn scalar_loss(&mut self, x: Var, value: T, grad: Vec<T>) -> Var {
        assert_eq!(grad.len(), self.value(x).len());
        let ng = self.ng(x);
        self.push(vec![1], vec![value], Op::ScalarLoss { x, grad }, ng)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &[T]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), target.len(), "mse sizes");
        let n = T::from_f64(xv.len() as f64);
        let two = T::from_f64(2.0);
        let mut sum = T::zero();
        let mut grad = Vec::with_capacity(xv.len());
        for (&a, &b) in xv.iter().zip(target) {
            let d = a - b;
            sum = sum + d * d;
            grad.push(two * d / n);
        }
        self.scalar_loss(x, sum / n, grad)
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(gout);
                continue;
            }
            self.backward_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Grads { grads }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.ng(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_node(&self, node: &Node<'p, T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(x);
                let ws = self.shape(w);
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[0], ws[2]);
                let (ho, wo) = (node.shape[2], node.shape[3]);
                let (ckk, hw) = (c * k * k, ho * wo);
                let direct = k == 1 && stride == 1 && pad == 0;
                let xv = self.value(x);
                let wv = self.value(w);
                let mut cols = if direct { Vec::new() } else { vec![T::zero(); ckk * hw] };
                if let Some(gw) = self.acc(grads, w) {
                    for i in 0..n {
                        let xi = &xv[i * c * h * wd..(i + 1) * c * h * wd];
                        let src: &[T] = if direct {
                            xi
                        } else {
                            im2col(xi, c, h, wd, k, stride, pad, ho, wo, &mut cols);
                            &cols
                        };
                        gemm(
                            Mat::new(&gout[i * o * hw..(i + 1) * o * hw], o, hw),
                            Mat::new(src, ckk, hw).t(),
                            gw,
                            T::one(),
                        );
                    }
                }
                if let Some(gx) = self.acc(grads, x) {
                    let mut dcols = vec![T::zero(); ckk * hw];
                    for i in 0..n {
                        let go = &gout[i * o * hw..(i + 1) * o * hw];
                        let dxi = &mut gx[i * c * h * wd..(i + 1) * c * h * wd];
                        if direct {
                            gemm(Mat::new(wv, o, ckk).t(), Mat::new(go, o, hw), dxi, T::one());
                        } else {
                            gemm(Mat::new(wv, o, ckk).t(), Mat::new(go, o, hw), &mut dcols, T::zero());
                            col2im_add(&dcols, c, h, wd, k, stride, pad, ho, wo, dxi);
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, b) {
                        for (j, chunk) in gout.chunks_exact(hw).enumerate() {
                            let s: T = chunk.iter().copied().sum();
                            gb[j % o] = gb[j % o] + s;
                        }
                    }
                }
            }
            &Op::Linear { x, w, b } => {
                let (n, i) = (self.shape(x)[0], self.shape(x)[1]);
                let o = self.shape(w)[0];
                let xv = self.value(x);
                let wv = self.value(w);
                if let Some(gw) = self.acc(grads, w) {
                    gemm(Mat::new(gout, n, o).t(), Mat::new(xv, n, i), gw, T::one());
                }
                if let Some(gx) = self.acc(grads, x) {
                    gemm(Mat::new(gout, n, o), Mat::new(wv, o, i), gx, T::one());
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, b) {
                        for row in gout.chunks_exact(o) {
                            gb.iter_mut().zip(row).for_each(|(g, &r)| *g = *g + r);
                        }
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                let xs = self.shape(x);
                let (n, c) = (xs[0], xs[1]);
                let hw: usize = xs[2..].iter().product();
                let cg = c / groups;
                let m = T::from_f64((cg * hw) as f64);
                let xv = self.value(x);
                let gv = self.value(gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let want_x = self.ng(x);
                let mut dx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
                for i in 0..n {
                    for g in 0..groups {
                        let (mean, rstd) = stats[i * groups + g];
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for cc in 0..cg {
                            let ch = g * cg + cc;
                            let o = (i * c + ch) * hw;
                            for j in 0..hw {
                                let xh = (xv[o + j] - mean) * rstd;
                                let gy = gout[o + j];
                                dgamma[ch] = dgamma[ch] + gy * xh;
                                dbeta[ch] = dbeta[ch] + gy;
                                let d = gy * gv[ch];
                                sum_d = sum_d + d;
                                sum_dx = sum_dx + d * xh;
                            }
                        }
                        if want_x {
                            for cc in 0..cg {
                                let ch = g * cg + cc;
                                let o = (i * c + ch) * hw;
                                for j in 0..hw {
                                    let xh = (xv[o + j] - mean) * rstd;
                                    let d = gout[o + j] * gv[ch];
                                    dx[o + j] = rstd * (d - sum_d / m - xh * sum_dx / m);
                                }
                            }
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, gamma) {
                    gg.iter_mut().zip(&dgamma).for_each(|(a, &b)| *a = *a + b);
                }
                if let Some(gb) = self.acc(grads, beta) {
                    gb.iter_mut().zip(&dbeta).for_each(|(a, &b)| *a = *a + b);
                }
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(&dx).for_each(|(a, &b)| *a = *a + b);
                }
            }
            &Op::Silu(x) => {
                let xv = self.value(x);
                if let Some(gx) = self.acc(grads, x) {
                    for ((g, &v), &go) in gx.iter_mut().zip(xv).zip(gout) {
                        *g = *g + go * silu_grad(v);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.acc(grads, v) {
                        g.iter_mut().zip(gout).for_each(|(g, &o)| *g = *g + o);
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(g) = self.acc(grads, a) {
                    g.iter_mut().zip(gout).for_each(|(g, &o)| *g = *g + o * s);
                }
            }
            &Op::ScaleShift { x, ss } => {
                let xs = self.shape(x);
                let (n, c) = (xs[0], xs[1]);
                let hw: usize = xs[2..].iter().product();
                let xv = self.value(x);
                let sv = self.value(ss);
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..n {
                        for ch in 0..c {
                            let s = T::one() + sv[i * 2 * c + ch];
                            let o = (i * c + ch) * hw;
                            for j in 0..hw {
                                gx[o + j] = gx[o + j] + gout[o + j] * s;
                            }
                        }
                    }
                }
                if let Some(gs) = self.acc(grads, ss) {
                    for i in 0..n {
                        for ch in 0..c {
                            let o = (i * c + ch) * hw;
                            let mut ds = T::zero();
                            let mut dsh = T::zero();
                            for j in 0..hw {
                                ds = ds + gout[o + j] * xv[o + j];
                                dsh = dsh + gout[o + j];
                            }
                            gs[i * 2 * c + ch] = gs[i * 2 * c + ch] + ds;
                            gs[i * 2 * c + c + ch] = gs[i * 2 * c + c + ch] + dsh;
                        }
                    }
                }
            }
            &Op::Upsample2x(x) => {
                let xs = self.shape(x);
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                if let Some(gx) = self.acc(grads, x) {
                    for p in 0..nc {
                        for r in 0..2 * h {
                            for c in 0..2 * w {
                                let idx = (p * h + r / 2) * w + c / 2;
                                gx[idx] = gx[idx] + gout[(p * 2 * h + r) * 2 * w + c];
                            }
                        }
                    }
                }
            }
            &Op::Concat(a, b) => {
                let sa = self.shape(a);
                let sb = self.shape(b);
                let hw: usize = sa[2..].iter().product();
                let (n, ca, cb) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..n {
                        let src = &gout[i * (ca + cb) * hw..][..ca * hw];
                        ga[i * ca * hw..(i + 1) * ca * hw]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(g, &o)| *g = *g + o);
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..n {
                        let src = &gout[(i * (ca + cb) + ca) * hw..][..cb * hw];
                        gb[i * cb * hw..(i + 1) * cb * hw]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(g, &o)| *g = *g + o);
                    }
                }
            }
            &Op::SliceChannels { x, start } => {
                let xs = self.shape(x);
                let (n, c) = (xs[0], xs[1]);
                let len = node.shape[1];
                let hw: usize = xs[2..].iter().product();
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..n {
                        let dst = &mut gx[(i * c + start) * hw..(i * c + start + len) * hw];
                        dst.iter_mut()
                            .zip(&gout[i * len * hw..(i + 1) * len * hw])
                            .for_each(|(g, &o)| *g = *g + o);
                    }
                }
            }
            &Op::ChannelMix { y, e } => {
                let ys = self.shape(y);
                let (n, k) = (ys[0], ys[1]);
                let hw: usize = ys[2..].iter().product();
                let co = self.shape(e)[1];
                let yv = self.value(y);
                let ev = self.value(e);
                if let Some(ge) = self.acc(grads, e) {
                    for i in 0..n {
                        gemm(
                            Mat::new(&yv[i * k * hw..(i + 1) * k * hw], k, hw),
                            Mat::new(&gout[i * co * hw..(i + 1) * co * hw], co, hw).t(),
                            ge,
                            T::one(),
                        );
                    }
                }
                if let Some(gy) = self.acc(grads, y) {
                    for i in 0..n {
                        gemm(
                            Mat::new(ev, k, co),
                            Mat::new(&gout[i * co * hw..(i + 1) * co * hw], co, hw),
                            &mut gy[i * k * hw..(i + 1) * k * hw],
                            T::one(),
                        );
                    }
                }
            }
            Op::RowCombo { table, coeffs } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (b, row) in coeffs.iter().enumerate() {
                        for &(i, c) in row {
                            for (g, &o) in gt[i * d..(i + 1) * d].iter_mut().zip(&gout[b * d..(b + 1) * d]) {
                                *g = *g + c * o;
                            }
                        }
                    }
                }
            }
            Op::SelectRows { a, null, mask } => {
                let d = self.shape(*a)[1];
                if let Some(ga) = self.acc(grads, *a) {
                    for (b, &m) in mask.iter().enumerate() {
                        if !m {
                            for (g, &o) in ga[b * d..(b + 1) * d].iter_mut().zip(&gout[b * d..(b + 1) * d]) {
                                *g = *g + o;
                            }
                        }
                    }
                }
                if let Some(gn) = self.acc(grads, *null) {
                    for (b, &m) in mask.iter().enumerate() {
                        if m {
                            for (g, &o) in gn.iter_mut().zip(&gout[b * d..(b + 1) * d]) {
                                *g = *g + o;
                            }
                        }
                    }
                }
            }
            Op::ScalarLoss { x, grad } => {
                let s = gout[0];
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(grad).for_each(|(g, &d)| *g = *g + s * d);
                }
            }
        }
    }

    /// Gradients of every bound trainable parameter, keyed by name.
    pub fn param_grads(&self, grads: &Grads<T>) -> BTreeMap<String, Vec<T>> {
        self.params
            .iter()
            .filter(|(_, &v)| self.ng(v))
            .map(|(n, &v)| {
                let g = grads
                    .get(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); self.value(v).len()]);
                (n.clone(), g)
            })
            .collect()
    }
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}
