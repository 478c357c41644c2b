//! Reverse-mode automatic differentiation over dense CPU arrays.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding
//! its value and the op that produced it; [`Graph::backward`] walks the tape
//! in reverse and accumulates gradients. Nodes only ever reference earlier
//! nodes, so reverse index order is a valid topological order and the
//! accumulation order is fixed, which makes gradients bit-for-bit
//! reproducible for a given forward pass.
//!
//! Convolution kernels parallelize over disjoint output planes with rayon;
//! each output element is produced by exactly one task with a fixed inner
//! summation order, so results do not depend on the thread count.

use ndarray::{ArrayD, IxDyn};
use num_traits::{Float, FromPrimitive};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Element type of graph tensors. f32 for training, f64 for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + std::fmt::Debug + std::iter::Sum + Send + Sync + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    /// 2-D convolution with per-output-channel bias, zero padding.
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// Non-overlapping k*k mean pooling.
    AvgPool {
        x: Var,
        k: usize,
    },
    /// M[b,j,c] = mean_{u,v} attn[b,j,u,v] * feat[b,c,u,v].
    AttnPool {
        feat: Var,
        attn: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    GlobalMaxPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Flatten {
        x: Var,
    },
    SoftmaxRows {
        x: Var,
    },
    /// Mean over the batch of -log softmax(logits)[label].
    CrossEntropyMean {
        logits: Var,
        labels: Vec<usize>,
    },
    /// x minus a detached constant; the constant is not kept since the
    /// gradient passes through unchanged.
    SubConst {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Square {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    /// Elementwise sum of same-shaped nodes (used for scalar loss terms).
    SumList {
        xs: Vec<Var>,
    },
    Scale {
        x: Var,
        c: T,
    },
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op<T>,
}

/// Recorded computation of one forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Graph::backward`].
///
/// Only leaf nodes retain gradients; intermediate gradients are freed as
/// soon as they have been propagated.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, if `v` influenced the loss.
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // non-finite values are allowed to flow through so a diverging run can
    // be detected and reported at the loss rather than panicking mid-forward
    fn push(&mut self, value: ArrayD<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Value of a recorded node.
    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, v: Var) -> T {
        let a = &self.nodes[v.0].value;
        assert_eq!(a.ndim(), 0, "scalar() on non-scalar node");
        a[IxDyn(&[])]
    }

    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        self.push(out, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add: shape mismatch"
        );
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add { a, b })
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Var {
        let out = avg_pool_forward(self.value(x), k);
        self.push(out, Op::AvgPool { x, k })
    }

    pub fn attn_pool(&mut self, feat: Var, attn: Var) -> Var {
        let out = attn_pool_forward(self.value(feat), self.value(attn));
        self.push(out, Op::AttnPool { feat, attn })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (bs, c, h, w) = dims4(v);
        let inv = T::from_usize(h * w).unwrap().recip();
        let s = v.as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[bs, c]));
        {
            let o = out.as_slice_mut().unwrap();
            for bi in 0..bs {
                for ci in 0..c {
                    let plane = &s[(bi * c + ci) * h * w..][..h * w];
                    o[bi * c + ci] = plane.iter().copied().sum::<T>() * inv;
                }
            }
        }
        self.push(out, Op::GlobalAvgPool { x })
    }

    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (bs, c, h, w) = dims4(v);
        let s = v.as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[bs, c]));
        {
            let o = out.as_slice_mut().unwrap();
            for bi in 0..bs {
                for ci in 0..c {
                    let plane = &s[(bi * c + ci) * h * w..][..h * w];
                    let mut m = plane[0];
                    for &p in &plane[1..] {
                        if p > m {
                            m = p;
                        }
                    }
                    o[bi * c + ci] = m;
                }
            }
        }
        self.push(out, Op::GlobalMaxPool { x })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (bs, d) = dims2(xv);
        let (d2, k) = dims2(wv);
        assert_eq!(d, d2, "linear: input dim {d} vs weight dim {d2}");
        assert_eq!(bv.len(), k, "linear: bias length");
        let xs = xv.as_slice().unwrap();
        let ws = wv.as_slice().unwrap();
        let bsl = bv.as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[bs, k]));
        {
            let o = out.as_slice_mut().unwrap();
            for bi in 0..bs {
                let xrow = &xs[bi * d..][..d];
                let orow = &mut o[bi * k..][..k];
                orow.copy_from_slice(bsl);
                for (di, &xval) in xrow.iter().enumerate() {
                    let wrow = &ws[di * k..][..k];
                    for ki in 0..k {
                        orow[ki] = orow[ki] + xval * wrow[ki];
                    }
                }
            }
        }
        self.push(out, Op::Linear { x, w, b })
    }

    /// Collapse all trailing axes into one: [B, ...] -> [B, D].
    pub fn flatten(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let bs = v.shape()[0];
        let d = v.len() / bs;
        let out = v
            .to_owned()
            .into_shape_with_order(IxDyn(&[bs, d]))
            .expect("flatten reshape");
        self.push(out, Op::Flatten { x })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows_values(self.value(x));
        self.push(out, Op::SoftmaxRows { x })
    }

    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let (bs, k) = dims2(lv);
        assert_eq!(labels.len(), bs, "cross_entropy: labels vs batch");
        assert!(labels.iter().all(|&l| l < k), "cross_entropy: label out of range");
        let ls = lv.as_slice().unwrap();
        let mut total = T::zero();
        for (bi, &label) in labels.iter().enumerate() {
            let row = &ls[bi * k..][..k];
            let mut m = row[0];
            for &v in &row[1..] {
                if v > m {
                    m = v;
                }
            }
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total = total + (lse - row[label]);
        }
        let mean = total / T::from_usize(bs).unwrap();
        let out = ArrayD::from_elem(IxDyn(&[]), mean);
        self.push(
            out,
            Op::CrossEntropyMean {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    pub fn sub_const(&mut self, x: Var, c: ArrayD<T>) -> Var {
        assert_eq!(self.value(x).shape(), c.shape(), "sub_const: shape mismatch");
        let out = self.value(x) - &c;
        self.push(out, Op::SubConst { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.abs());
        self.push(out, Op::Abs { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * v);
        self.push(out, Op::Square { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mean = v.iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        let out = ArrayD::from_elem(IxDyn(&[]), mean);
        self.push(out, Op::MeanAll { x })
    }

    pub fn sum_list(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "sum_list: empty");
        let mut out = self.value(xs[0]).to_owned();
        for &x in &xs[1..] {
            assert_eq!(out.shape(), self.value(x).shape(), "sum_list: shape mismatch");
            out = out + self.value(x);
        }
        self.push(out, Op::SumList { xs: xs.to_vec() })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).mapv(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    /// Reverse pass from a recorded scalar loss node.
    ///
    /// Fails if the node does not exist in this graph or is not a scalar,
    /// which catches backward-without-forward misuse.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Numeric(
                "backward called on a node that was never recorded by a forward pass".into(),
            ));
        }
        if !self.nodes[loss.0].value.shape().is_empty() {
            return Err(Error::Numeric(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[]), T::one()));

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) =
                        conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *pad);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Relu { x } => {
                    let mut dx = g;
                    dx.zip_mut_with(self.value(*x), |gv, &xv| {
                        if xv <= T::zero() {
                            *gv = T::zero();
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AvgPool { x, k } => {
                    accumulate(&mut grads, *x, avg_pool_backward(self.value(*x), &g, *k));
                }
                Op::AttnPool { feat, attn } => {
                    let (dfeat, dattn) =
                        attn_pool_backward(self.value(*feat), self.value(*attn), &g);
                    accumulate(&mut grads, *feat, dfeat);
                    accumulate(&mut grads, *attn, dattn);
                }
                Op::GlobalAvgPool { x } => {
                    let v = self.value(*x);
                    let (bs, c, h, w) = dims4(v);
                    let inv = T::from_usize(h * w).unwrap().recip();
                    let gs = g.as_slice().unwrap();
                    let mut dx = ArrayD::zeros(IxDyn(&[bs, c, h, w]));
                    {
                        let d = dx.as_slice_mut().unwrap();
                        for (pi, chunk) in d.chunks_mut(h * w).enumerate() {
                            let gv = gs[pi] * inv;
                            for e in chunk {
                                *e = gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GlobalMaxPool { x } => {
                    let v = self.value(*x);
                    let (bs, c, h, w) = dims4(v);
                    let vs = v.as_slice().unwrap();
                    let gs = g.as_slice().unwrap();
                    let mut dx = ArrayD::zeros(IxDyn(&[bs, c, h, w]));
                    {
                        let d = dx.as_slice_mut().unwrap();
                        for pi in 0..bs * c {
                            let plane = &vs[pi * h * w..][..h * w];
                            // grad routes to the first maximum for determinism
                            let mut arg = 0;
                            for (j, &p) in plane.iter().enumerate() {
                                if p > plane[arg] {
                                    arg = j;
                                }
                            }
                            d[pi * h * w + arg] = gs[pi];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (bs, d) = dims2(xv);
                    let (_, k) = dims2(wv);
                    let xs = xv.as_slice().unwrap();
                    let ws = wv.as_slice().unwrap();
                    let gs = g.as_slice().unwrap();
                    let mut dx = ArrayD::zeros(IxDyn(&[bs, d]));
                    let mut dw = ArrayD::zeros(IxDyn(&[d, k]));
                    let mut db = ArrayD::zeros(IxDyn(&[k]));
                    {
                        let dxs = dx.as_slice_mut().unwrap();
                        let dws = dw.as_slice_mut().unwrap();
                        let dbs = db.as_slice_mut().unwrap();
                        for bi in 0..bs {
                            let grow = &gs[bi * k..][..k];
                            let xrow = &xs[bi * d..][..d];
                            for di in 0..d {
                                let wrow = &ws[di * k..][..k];
                                let mut acc = T::zero();
                                for ki in 0..k {
                                    acc = acc + grow[ki] * wrow[ki];
                                }
                                dxs[bi * d + di] = dxs[bi * d + di] + acc;
                                let dwrow = &mut dws[di * k..][..k];
                                let xval = xrow[di];
                                for ki in 0..k {
                                    dwrow[ki] = dwrow[ki] + xval * grow[ki];
                                }
                            }
                            for ki in 0..k {
                                dbs[ki] = dbs[ki] + grow[ki];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Flatten { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    let dx = g.into_shape_with_order(IxDyn(&shape)).expect("flatten grad");
                    accumulate(&mut grads, *x, dx);
                }
                Op::SoftmaxRows { x } => {
                    // dx = s * (g - sum(g * s)) per row
                    let s = &self.nodes[i].value;
                    let (bs, k) = dims2(s);
                    let ss = s.as_slice().unwrap();
                    let gs = g.as_slice().unwrap();
                    let mut dx = ArrayD::zeros(IxDyn(&[bs, k]));
                    {
                        let d = dx.as_slice_mut().unwrap();
                        for bi in 0..bs {
                            let srow = &ss[bi * k..][..k];
                            let grow = &gs[bi * k..][..k];
                            let dot: T = srow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                            let drow = &mut d[bi * k..][..k];
                            for ki in 0..k {
                                drow[ki] = srow[ki] * (grow[ki] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropyMean { logits, labels } => {
                    let s = softmax_rows_values(self.value(*logits));
                    let (bs, k) = dims2(&s);
                    let gscale = g[IxDyn(&[])] / T::from_usize(bs).unwrap();
                    let mut dx = s;
                    {
                        let d = dx.as_slice_mut().unwrap();
                        for (bi, &label) in labels.iter().enumerate() {
                            let row = &mut d[bi * k..][..k];
                            row[label] = row[label] - T::one();
                            for e in row {
                                *e = *e * gscale;
                            }
                        }
                    }
                    accumulate(&mut grads, *logits, dx);
                }
                Op::SubConst { x, .. } => {
                    accumulate(&mut grads, *x, g);
                }
                Op::Abs { x } => {
                    let mut dx = g;
                    dx.zip_mut_with(self.value(*x), |gv, &xv| {
                        if xv < T::zero() {
                            *gv = -*gv;
                        } else if xv == T::zero() {
                            *gv = T::zero();
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Square { x } => {
                    let two = T::from_f64(2.0).unwrap();
                    let mut dx = g;
                    dx.zip_mut_with(self.value(*x), |gv, &xv| *gv = *gv * two * xv);
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanAll { x } => {
                    let v = self.value(*x);
                    let gv = g[IxDyn(&[])] / T::from_usize(v.len()).unwrap();
                    let dx = ArrayD::from_elem(IxDyn(v.shape()), gv);
                    accumulate(&mut grads, *x, dx);
                }
                Op::SumList { xs } => {
                    for &x in xs {
                        accumulate(&mut grads, x, g.clone());
                    }
                }
                Op::Scale { x, c } => {
                    let dx = g.mapv(|v| v * *c);
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<ArrayD<T>>], v: Var, delta: ArrayD<T>) {
    match &mut grads[v.0] {
        Some(acc) => *acc = &*acc + &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn dims4<T: Scalar>(a: &ArrayD<T>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected 4-d tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn dims2<T: Scalar>(a: &ArrayD<T>) -> (usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 2, "expected 2-d tensor, got shape {s:?}");
    (s[0], s[1])
}

pub(crate) fn softmax_rows_values<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
    let (bs, k) = dims2(x);
    let xs = x.as_slice().unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[bs, k]));
    {
        let o = out.as_slice_mut().unwrap();
        for bi in 0..bs {
            let row = &xs[bi * k..][..k];
            let mut m = row[0];
            for &v in &row[1..] {
                if v > m {
                    m = v;
                }
            }
            let orow = &mut o[bi * k..][..k];
            let mut sum = T::zero();
            for ki in 0..k {
                let e = (row[ki] - m).exp();
                orow[ki] = e;
                sum = sum + e;
            }
            let inv = sum.recip();
            for e in orow {
                *e = *e * inv;
            }
        }
    }
    out
}

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn conv2d_forward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    b: &ArrayD<T>,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let (bs, cin, h, wd) = dims4(x);
    let (cout, cin2, kh, kw) = dims4(w);
    assert_eq!(cin, cin2, "conv2d: input channels {cin} vs weight {cin2}");
    assert_eq!(b.len(), cout, "conv2d: bias length");
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(wd, kw, stride, pad);
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let bsl = b.as_slice().unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[bs, cout, ho, wo]));
    {
        let os = out.as_slice_mut().unwrap();
        os.par_chunks_mut(ho * wo).enumerate().for_each(|(pi, plane)| {
            let bi = pi / cout;
            let oc = pi % cout;
            for e in plane.iter_mut() {
                *e = bsl[oc];
            }
            for ic in 0..cin {
                let xplane = &xs[(bi * cin + ic) * h * wd..][..h * wd];
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = ws[((oc * cin + ic) * kh + khi) * kw + kwi];
                        for oh in 0..ho {
                            let ih = (oh * stride + khi) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[ih as usize * wd..][..wd];
                            let orow = &mut plane[oh * wo..][..wo];
                            for (ow, oe) in orow.iter_mut().enumerate() {
                                let iw = (ow * stride + kwi) as isize - pad as isize;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                *oe = *oe + wv * xrow[iw as usize];
                            }
                        }
                    }
                }
            }
        });
    }
    out
}

fn conv2d_backward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    gout: &ArrayD<T>,
    stride: usize,
    pad: usize,
) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>) {
    let (bs, cin, h, wd) = dims4(x);
    let (cout, _, kh, kw) = dims4(w);
    let (_, _, ho, wo) = dims4(gout);
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let gs = gout.as_slice().unwrap();

    let mut dx = ArrayD::zeros(IxDyn(&[bs, cin, h, wd]));
    {
        let d = dx.as_slice_mut().unwrap();
        d.par_chunks_mut(h * wd).enumerate().for_each(|(pi, plane)| {
            let bi = pi / cin;
            let ic = pi % cin;
            for oc in 0..cout {
                let gplane = &gs[(bi * cout + oc) * ho * wo..][..ho * wo];
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = ws[((oc * cin + ic) * kh + khi) * kw + kwi];
                        for oh in 0..ho {
                            let ih = (oh * stride + khi) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let grow = &gplane[oh * wo..][..wo];
                            let drow = &mut plane[ih as usize * wd..][..wd];
                            for (ow, &gv) in grow.iter().enumerate() {
                                let iw = (ow * stride + kwi) as isize - pad as isize;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                drow[iw as usize] = drow[iw as usize] + wv * gv;
                            }
                        }
                    }
                }
            }
        });
    }

    let mut dw = ArrayD::zeros(IxDyn(&[cout, cin, kh, kw]));
    {
        let d = dw.as_slice_mut().unwrap();
        d.par_chunks_mut(kh * kw).enumerate().for_each(|(pi, block)| {
            let oc = pi / cin;
            let ic = pi % cin;
            for khi in 0..kh {
                for kwi in 0..kw {
                    let mut acc = T::zero();
                    for bi in 0..bs {
                        let gplane = &gs[(bi * cout + oc) * ho * wo..][..ho * wo];
                        let xplane = &xs[(bi * cin + ic) * h * wd..][..h * wd];
                        for oh in 0..ho {
                            let ih = (oh * stride + khi) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let grow = &gplane[oh * wo..][..wo];
                            let xrow = &xplane[ih as usize * wd..][..wd];
                            for (ow, &gv) in grow.iter().enumerate() {
                                let iw = (ow * stride + kwi) as isize - pad as isize;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                acc = acc + gv * xrow[iw as usize];
                            }
                        }
                    }
                    block[khi * kw + kwi] = acc;
                }
            }
        });
    }

    let mut db = ArrayD::zeros(IxDyn(&[cout]));
    {
        let d = db.as_slice_mut().unwrap();
        for oc in 0..cout {
            let mut acc = T::zero();
            for bi in 0..bs {
                let gplane = &gs[(bi * cout + oc) * ho * wo..][..ho * wo];
                acc = acc + gplane.iter().copied().sum::<T>();
            }
            d[oc] = acc;
        }
    }

    (dx, dw, db)
}

fn avg_pool_forward<T: Scalar>(x: &ArrayD<T>, k: usize) -> ArrayD<T> {
    let (bs, c, h, w) = dims4(x);
    assert!(k >= 1 && h % k == 0 && w % k == 0, "avg_pool: {h}x{w} not divisible by {k}");
    let ho = h / k;
    let wo = w / k;
    let inv = T::from_usize(k * k).unwrap().recip();
    let xs = x.as_slice().unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[bs, c, ho, wo]));
    {
        let o = out.as_slice_mut().unwrap();
        for pi in 0..bs * c {
            let xplane = &xs[pi * h * w..][..h * w];
            let oplane = &mut o[pi * ho * wo..][..ho * wo];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = T::zero();
                    for dh in 0..k {
                        let row = &xplane[(oh * k + dh) * w + ow * k..][..k];
                        acc = acc + row.iter().copied().sum::<T>();
                    }
                    oplane[oh * wo + ow] = acc * inv;
                }
            }
        }
    }
    out
}

fn avg_pool_backward<T: Scalar>(x: &ArrayD<T>, gout: &ArrayD<T>, k: usize) -> ArrayD<T> {
    let (bs, c, h, w) = dims4(x);
    let ho = h / k;
    let wo = w / k;
    let inv = T::from_usize(k * k).unwrap().recip();
    let gs = gout.as_slice().unwrap();
    let mut dx = ArrayD::zeros(IxDyn(&[bs, c, h, w]));
    {
        let d = dx.as_slice_mut().unwrap();
        for pi in 0..bs * c {
            let gplane = &gs[pi * ho * wo..][..ho * wo];
            let dplane = &mut d[pi * h * w..][..h * w];
            for oh in 0..ho {
                for ow in 0..wo {
                    let gv = gplane[oh * wo + ow] * inv;
                    for dh in 0..k {
                        let row = &mut dplane[(oh * k + dh) * w + ow * k..][..k];
                        for e in row {
                            *e = *e + gv;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn attn_pool_forward<T: Scalar>(feat: &ArrayD<T>, attn: &ArrayD<T>) -> ArrayD<T> {
    let (bs, c, h, w) = dims4(feat);
    let (bs2, n, h2, w2) = dims4(attn);
    assert_eq!(bs, bs2, "attn_pool: batch mismatch");
    assert!(h == h2 && w == w2, "attn_pool: spatial mismatch {h}x{w} vs {h2}x{w2}");
    let inv = T::from_usize(h * w).unwrap().recip();
    let fs = feat.as_slice().unwrap();
    let asl = attn.as_slice().unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[bs, n, c]));
    {
        let o = out.as_slice_mut().unwrap();
        for bi in 0..bs {
            for j in 0..n {
                let aplane = &asl[(bi * n + j) * h * w..][..h * w];
                let orow = &mut o[(bi * n + j) * c..][..c];
                for ci in 0..c {
                    let fplane = &fs[(bi * c + ci) * h * w..][..h * w];
                    let mut acc = T::zero();
                    for (av, fv) in aplane.iter().zip(fplane) {
                        acc = acc + *av * *fv;
                    }
                    orow[ci] = acc * inv;
                }
            }
        }
    }
    out
}

fn attn_pool_backward<T: Scalar>(
    feat: &ArrayD<T>,
    attn: &ArrayD<T>,
    gout: &ArrayD<T>,
) -> (ArrayD<T>, ArrayD<T>) {
    let (bs, c, h, w) = dims4(feat);
    let (_, n, _, _) = dims4(attn);
    let inv = T::from_usize(h * w).unwrap().recip();
    let fs = feat.as_slice().unwrap();
    let asl = attn.as_slice().unwrap();
    let gs = gout.as_slice().unwrap();
    let mut dfeat = ArrayD::zeros(IxDyn(&[bs, c, h, w]));
    let mut dattn = ArrayD::zeros(IxDyn(&[bs, n, h, w]));
    {
        let df = dfeat.as_slice_mut().unwrap();
        let da = dattn.as_slice_mut().unwrap();
        for bi in 0..bs {
            for j in 0..n {
                let grow = &gs[(bi * n + j) * c..][..c];
                let aplane = &asl[(bi * n + j) * h * w..][..h * w];
                let daplane = &mut da[(bi * n + j) * h * w..][..h * w];
                for ci in 0..c {
                    let gv = grow[ci] * inv;
                    let fplane = &fs[(bi * c + ci) * h * w..][..h * w];
                    let dfplane = &mut df[(bi * c + ci) * h * w..][..h * w];
                    for p in 0..h * w {
                        dfplane[p] = dfplane[p] + gv * aplane[p];
                        daplane[p] = daplane[p] + gv * fplane[p];
                    }
                }
            }
        }
    }
    (dfeat, dattn)
}
