//! A small tensor-level reverse-mode autodiff tape covering exactly the
//! operations the denoiser needs.
//!
//! Values are computed eagerly when an op is recorded. Ops cache what their
//! backward pass needs only when at least one input requires a gradient, so
//! inference through the same code path stays cheap.

use ndarray::{s, Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, ArrayView4, Axis, Ix2, Ix3, Ix4, IxDyn, Zip};

use crate::attention::attention_weights;

const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Silu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        cols: Vec<Array2<f64>>,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ToTokens(Var),
    FromTokens(Var),
    Upsample2(Var),
    FrameMix {
        x: Var,
        refs: Vec<Vec<(usize, f64)>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<Array2<f64>>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Array4<f64>,
        inv_std: Array2<f64>,
    },
    Mse {
        pred: Var,
        target: ArrayD<f64>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub(crate) struct Tape {
    nodes: Vec<Node>,
}

pub(crate) struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub(crate) fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

fn view2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn view3(a: &ArrayD<f64>) -> ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("rank-3 tensor")
}

fn view4(a: &ArrayD<f64>) -> ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 tensor")
}

/// Flattens all leading axes so the last axis is the feature axis.
fn as_rows(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    let last = *a.shape().last().expect("nonscalar");
    a.view()
        .into_shape_with_order((a.len() / last, last))
        .expect("contiguous tensor")
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// `im2col` with circular padding `k / 2`.
fn im2col(x: ArrayView3<f64>, k: usize, stride: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (ci, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let mut cols = Array2::<f64>::zeros((ci * k * k, ho * wo));
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let mut row = cols.row_mut((c * k + ky) * k + kx);
                let row = row.as_slice_mut().expect("standard layout");
                for oy in 0..ho {
                    let iy = ((oy * stride) as isize + ky as isize - pad).rem_euclid(h as isize) as usize;
                    for ox in 0..wo {
                        let ix = ((ox * stride) as isize + kx as isize - pad).rem_euclid(w as isize) as usize;
                        row[oy * wo + ox] = x[[c, iy, ix]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(
    dx: &mut ndarray::ArrayViewMut3<f64>,
    dcols: &Array2<f64>,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) {
    let (ci, h, w) = dx.dim();
    let pad = (k / 2) as isize;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = dcols.row((c * k + ky) * k + kx);
                for oy in 0..ho {
                    let iy = ((oy * stride) as isize + ky as isize - pad).rem_euclid(h as isize) as usize;
                    for ox in 0..wo {
                        let ix = ((ox * stride) as isize + kx as isize - pad).rem_euclid(w as isize) as usize;
                        dx[[c, iy, ix]] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

impl Tape {
    pub(crate) fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn leaf(&mut self, value: ArrayD<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub(crate) fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub(crate) fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(silu);
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    /// 2-D convolution over `[B, Ci, H, W]` with weights `[Co, Ci, k, k]`,
    /// bias `[Co]`, circular padding, and the given stride.
    pub(crate) fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xv = view4(self.value(x));
        let wv = view4(self.value(w));
        let (bsz, ci, h, wd) = xv.dim();
        let (co, wci, k, _) = wv.dim();
        assert_eq!(ci, wci, "conv input channels");
        let (ho, wo) = (h / stride, wd / stride);
        let wmat = wv.to_shape((co, ci * k * k)).expect("weight reshape").to_owned();
        let bias = self.value(b).clone().into_shape_with_order((co, 1)).expect("bias");
        let rg = self.rg(x) || self.rg(w) || self.rg(b);

        let mut out = Array4::<f64>::zeros((bsz, co, ho, wo));
        let mut cols_cache = Vec::new();
        for bi in 0..bsz {
            let cols = im2col(xv.index_axis(Axis(0), bi), k, stride, ho, wo);
            let y = wmat.dot(&cols) + &bias;
            out.index_axis_mut(Axis(0), bi)
                .assign(&y.into_shape_with_order((co, ho, wo)).expect("conv out"));
            if rg {
                cols_cache.push(cols);
            }
        }
        self.push(
            out.into_dyn(),
            Op::Conv2d { x, w, b, stride, cols: cols_cache },
            rg,
        )
    }

    /// Group normalization of `[B, C, H, W]` over `(C / groups, H, W)` with
    /// per-channel scale `gamma` and shift `beta`.
    pub(crate) fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = view4(self.value(x));
        let (bsz, c, h, w) = xv.dim();
        assert!(groups > 0 && c % groups == 0, "groups must divide channels");
        let per = c / groups;
        let n = (per * h * w) as f64;
        let gv = self.value(gamma).view().into_dimensionality::<ndarray::Ix1>().expect("gamma");
        let bv = self.value(beta).view().into_dimensionality::<ndarray::Ix1>().expect("beta");
        let mut xhat = Array4::<f64>::zeros((bsz, c, h, w));
        let mut inv_std = Array2::<f64>::zeros((bsz, groups));
        for bi in 0..bsz {
            for gi in 0..groups {
                let block = xv.slice(s![bi, gi * per..(gi + 1) * per, .., ..]);
                let mean = block.sum() / n;
                let var = block.fold(0.0, |a, v| a + (v - mean) * (v - mean)) / n;
                let is = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                inv_std[[bi, gi]] = is;
                xhat.slice_mut(s![bi, gi * per..(gi + 1) * per, .., ..])
                    .zip_mut_with(&block, |o, &v| *o = (v - mean) * is);
            }
        }
        let mut out = xhat.clone();
        for ci in 0..c {
            let (g, b) = (gv[ci], bv[ci]);
            out.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| g * v + b);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Array4::zeros((0, 0, 0, 0)), Array2::zeros((0, 0))) };
        self.push(
            out.into_dyn(),
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std },
            rg,
        )
    }

    /// Adds a per-sample, per-channel bias `[B, C]` to `[B, C, H, W]`.
    pub(crate) fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = view4(self.value(x));
        let bv = view2(self.value(b));
        assert_eq!(&xv.shape()[..2], bv.shape(), "channel bias shape");
        let mut out = xv.to_owned();
        for ((bi, c), &v) in bv.indexed_iter() {
            out.slice_mut(s![bi, c, .., ..]).mapv_inplace(|x| x + v);
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out.into_dyn(), Op::ChannelBias { x, b }, rg)
    }

    /// `x . W + b` applied along the last axis; `W` is `[Din, Dout]`.
    pub(crate) fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = view2(self.value(w));
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = wv.ncols();
        let mut y = as_rows(xv).dot(&wv);
        if let Some(b) = b {
            y += &self.value(b).view().into_dimensionality::<ndarray::Ix1>().expect("bias");
        }
        let out = y.into_shape_with_order(IxDyn(&shape)).expect("linear out");
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    /// `[B, C, H, W]` to `[B, H*W, C]`.
    pub(crate) fn to_tokens(&mut self, x: Var) -> Var {
        let xv = view4(self.value(x));
        let (b, c, h, w) = xv.dim();
        let out = xv
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, h * w, c))
            .expect("tokens");
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::ToTokens(x), rg)
    }

    /// `[B, H*W, C]` back to `[B, C, H, W]`.
    pub(crate) fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = view3(self.value(x));
        let (b, l, c) = xv.dim();
        assert_eq!(l, h * w, "token count");
        let out = xv
            .to_shape((b, h, w, c))
            .expect("tokens reshape")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .into_owned();
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::FromTokens(x), rg)
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub(crate) fn upsample2(&mut self, x: Var) -> Var {
        let xv = view4(self.value(x));
        let (b, c, h, w) = xv.dim();
        let out = Array4::from_shape_fn((b, c, 2 * h, 2 * w), |(bi, ci, y, x)| xv[[bi, ci, y / 2, x / 2]]);
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::Upsample2(x), rg)
    }

    /// Mixes the leading (frame) axis: output frame `i` is
    /// `sum_j refs[i][j].1 * x[refs[i][j].0]`, summed left to right.
    pub(crate) fn frame_mix(&mut self, x: Var, refs: Vec<Vec<(usize, f64)>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape()[0], refs.len(), "frame mix arity");
        let mut out = ArrayD::<f64>::zeros(xv.shape());
        for (i, r) in refs.iter().enumerate() {
            let mut dst = out.index_axis_mut(Axis(0), i);
            for &(j, wt) in r {
                dst.scaled_add(wt, &xv.index_axis(Axis(0), j));
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::FrameMix { x, refs }, rg)
    }

    /// Batched `softmax(Q K^T / sqrt(d)) V` over `[B, L, d]` / `[B, M, d]`.
    pub(crate) fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let (qv, kv, vv) = (view3(self.value(q)), view3(self.value(k)), view3(self.value(v)));
        let (b, l, _) = qv.dim();
        let dv = vv.dim().2;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let mut out = Array3::<f64>::zeros((b, l, dv));
        let mut cache = Vec::new();
        for bi in 0..b {
            let p = attention_weights(qv.index_axis(Axis(0), bi), kv.index_axis(Axis(0), bi));
            out.index_axis_mut(Axis(0), bi).assign(&p.dot(&vv.index_axis(Axis(0), bi)));
            if rg {
                cache.push(p);
            }
        }
        self.push(out.into_dyn(), Op::Attention { q, k, v, probs: cache }, rg)
    }

    /// Scalar `mean((pred - target)^2)`.
    pub(crate) fn mse(&mut self, pred: Var, target: ArrayD<f64>) -> Var {
        assert_eq!(self.value(pred).shape(), target.shape(), "mse shape");
        let diff = self.value(pred) - &target;
        let loss = diff.mapv(|d| d * d).mean().unwrap_or(0.0);
        let rg = self.rg(pred);
        self.push(ArrayD::from_elem(IxDyn(&[]), loss), Op::Mse { pred, target }, rg)
    }

    /// Reverse sweep from a scalar node.
    pub(crate) fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::ones(self.value(root).shape()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut contrib: Vec<(Var, ArrayD<f64>)> = Vec::new();
            let mut acc = |v: Var, d: ArrayD<f64>| {
                if self.rg(v) {
                    contrib.push((v, d));
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let mut d = g.clone();
                    d.zip_mut_with(xv, |d, &x| *d *= silu_grad(x));
                    acc(*x, d);
                }
                Op::Conv2d { x, w, b, stride, cols } => {
                    let gv = view4(&g);
                    let wv = view4(self.value(*w));
                    let (co, ci, k, _) = wv.dim();
                    let (bsz, _, ho, wo) = gv.dim();
                    let wmat = wv.to_shape((co, ci * k * k)).expect("weight reshape");
                    let mut dw = Array2::<f64>::zeros((co, ci * k * k));
                    let mut dx = Array4::<f64>::zeros(view4(self.value(*x)).raw_dim());
                    for bi in 0..bsz {
                        let gb = gv.index_axis(Axis(0), bi);
                        let gb = gb.to_shape((co, ho * wo)).expect("grad reshape");
                        if self.rg(*w) {
                            dw += &gb.dot(&cols[bi].t());
                        }
                        if self.rg(*x) {
                            let dcols = wmat.t().dot(&gb);
                            col2im_add(&mut dx.index_axis_mut(Axis(0), bi), &dcols, k, *stride, ho, wo);
                        }
                    }
                    let db = gv.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    acc(*w, dw.into_shape_with_order((co, ci, k, k)).unwrap().into_dyn());
                    acc(*b, db.into_dyn());
                    acc(*x, dx.into_dyn());
                }
                Op::ChannelBias { x, b } => {
                    let db = view4(&g).sum_axis(Axis(3)).sum_axis(Axis(2));
                    acc(*b, db.into_dyn());
                    acc(*x, g.clone());
                }
                Op::Linear { x, w, b } => {
                    let g2 = as_rows(&g);
                    let xv = self.value(*x);
                    if self.rg(*w) {
                        acc(*w, as_rows(xv).t().dot(&g2).into_dyn());
                    }
                    if let Some(b) = b {
                        acc(*b, g2.sum_axis(Axis(0)).into_dyn());
                    }
                    if self.rg(*x) {
                        let dx = g2.dot(&view2(self.value(*w)).t());
                        acc(*x, dx.into_shape_with_order(xv.raw_dim()).unwrap());
                    }
                }
                Op::ToTokens(x) => {
                    let (b, c, h, w) = view4(self.value(*x)).dim();
                    let dx = view3(&g)
                        .to_shape((b, h, w, c))
                        .unwrap()
                        .permuted_axes([0, 3, 1, 2])
                        .as_standard_layout()
                        .into_owned();
                    acc(*x, dx.into_dyn());
                }
                Op::FromTokens(x) => {
                    let (b, c, h, w) = view4(&g).dim();
                    let dx = view4(&g)
                        .permuted_axes([0, 2, 3, 1])
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((b, h * w, c))
                        .unwrap();
                    acc(*x, dx.into_dyn());
                }
                Op::Upsample2(x) => {
                    let gv = view4(&g);
                    let (b, c, h, w) = view4(self.value(*x)).dim();
                    let mut dx = Array4::<f64>::zeros((b, c, h, w));
                    for ((bi, ci, y, xx), v) in gv.indexed_iter() {
                        dx[[bi, ci, y / 2, xx / 2]] += v;
                    }
                    acc(*x, dx.into_dyn());
                }
                Op::FrameMix { x, refs } => {
                    let mut dx = ArrayD::<f64>::zeros(g.shape());
                    for (i, r) in refs.iter().enumerate() {
                        let gi = g.index_axis(Axis(0), i);
                        for &(j, wt) in r {
                            dx.index_axis_mut(Axis(0), j).scaled_add(wt, &gi);
                        }
                    }
                    acc(*x, dx);
                }
                Op::Attention { q, k, v, probs } => {
                    let (qv, kv, vv) = (view3(self.value(*q)), view3(self.value(*k)), view3(self.value(*v)));
                    let gv = view3(&g);
                    let scale = 1.0 / (qv.dim().2 as f64).sqrt();
                    let mut dq = Array3::<f64>::zeros(qv.raw_dim());
                    let mut dk = Array3::<f64>::zeros(kv.raw_dim());
                    let mut dvv = Array3::<f64>::zeros(vv.raw_dim());
                    for (bi, p) in probs.iter().enumerate() {
                        let go = gv.index_axis(Axis(0), bi);
                        dvv.index_axis_mut(Axis(0), bi).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.index_axis(Axis(0), bi).t());
                        let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                        let ds = (dp - &row_dot) * p * scale;
                        dq.index_axis_mut(Axis(0), bi).assign(&ds.dot(&kv.index_axis(Axis(0), bi)));
                        dk.index_axis_mut(Axis(0), bi).assign(&ds.t().dot(&qv.index_axis(Axis(0), bi)));
                    }
                    acc(*q, dq.into_dyn());
                    acc(*k, dk.into_dyn());
                    acc(*v, dvv.into_dyn());
                }
                Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                    let gv = view4(&g);
                    let (bsz, c, h, w) = gv.dim();
                    let per = c / groups;
                    let n = (per * h * w) as f64;
                    let gamma_v = self.value(*gamma);
                    let gxh = &gv * xhat;
                    let dgamma = gxh.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    let dbeta = gv.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    if self.rg(*x) {
                        let mut dx = Array4::<f64>::zeros((bsz, c, h, w));
                        for bi in 0..bsz {
                            for gi in 0..*groups {
                                let range = gi * per..(gi + 1) * per;
                                let mut dxh = gv.slice(s![bi, range.clone(), .., ..]).to_owned();
                                for (k, mut ch) in dxh.outer_iter_mut().enumerate() {
                                    ch *= gamma_v[[gi * per + k]];
                                }
                                let xh = xhat.slice(s![bi, range.clone(), .., ..]);
                                let m1 = dxh.sum() / n;
                                let m2 = (&dxh * &xh).sum() / n;
                                let is = inv_std[[bi, gi]];
                                Zip::from(dx.slice_mut(s![bi, range, .., ..]))
                                    .and(&dxh)
                                    .and(&xh)
                                    .for_each(|d, &a, &xv| *d = is * (a - m1 - xv * m2));
                            }
                        }
                        acc(*x, dx.into_dyn());
                    }
                    acc(*gamma, dgamma.into_dyn());
                    acc(*beta, dbeta.into_dyn());
                }
                Op::Mse { pred, target } => {
                    let n = target.len().max(1) as f64;
                    let scale = 2.0 * g.first().copied().unwrap_or(1.0) / n;
                    let d = (self.value(*pred) - target) * scale;
                    acc(*pred, d);
                }
            }
            for (v, d) in contrib {
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot => *slot = Some(d),
                }
            }
        }
        Gradients { grads }
    }
}
