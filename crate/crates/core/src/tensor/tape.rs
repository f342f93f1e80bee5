use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{self, ConvGeom, GroupStats};
use super::{gemm, Mat, Scalar, Tensor};
use crate::error::{bail, Error, Result};

/// Normalization epsilon used by every group norm.
pub const GROUP_NORM_EPS: f64 = 1e-5;

enum Op<S> {
    Leaf,
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, fin: usize, fout: usize },
    GroupNorm { x: usize, gamma: usize, beta: usize, n: usize, c: usize, spatial: usize, groups: usize, stats: GroupStats<S> },
    Silu { x: usize },
    Softmax { outer: usize, len: usize, inner: usize, x: usize },
    Upsample2x { x: usize, planes: usize, h: usize, w: usize },
    AvgPool2x { x: usize, planes: usize, h: usize, w: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: S },
    AddBias { x: usize, b: usize, n: usize, c: usize, spatial: usize, per_sample: bool },
    Concat { inputs: Vec<usize>, outer: usize, widths: Vec<usize> },
    Reshape { x: usize },
    Bmm { a: usize, b: usize, batch: usize, a_dims: (usize, usize), b_dims: (usize, usize), ta: bool, tb: bool },
    Sum { x: usize },
    Mean { x: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<S>, n: usize, c: usize, p: usize },
}

struct Node<S> {
    value: Rc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Linear record of primitive operations. Node ids are assigned in push
/// order, so every node's inputs precede it.
pub struct Tape<S: Scalar = f32> {
    nodes: RefCell<Vec<Node<S>>>,
    checked: bool,
    consumed: Cell<bool>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar = f32> {
    tape: &'t Tape<S>,
    id: usize,
}

/// Result of [`Tape::backward`]: one optional gradient per recorded node.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var<'_, S>) -> Result<&Tensor<S>> {
        self.grads
            .get(var.id)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::AbsentGradient(format!("node {} is not connected to the loss", var.id)))
    }

    pub fn take(&mut self, var: Var<'_, S>) -> Option<Tensor<S>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), checked: false, consumed: Cell::new(false) }
    }

    /// A tape that rejects any non-finite intermediate value.
    pub fn checked() -> Self {
        Tape { checked: true, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_leaf(value, true)
    }

    /// Leaf treated as data.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, inputs: &[usize]) -> Result<Var<'_, S>> {
        if self.consumed.get() {
            bail!(Contract, "tape already consumed by backward");
        }
        if self.checked && !value.is_finite() {
            bail!(Numeric, "non-finite value produced by op on {:?}", value.shape());
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, S>], axis: usize) -> Result<Var<'t, S>> {
        if parts.is_empty() {
            bail!(Dimension, "concat of zero tensors");
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let shape0 = values[0].shape().to_vec();
        if axis >= shape0.len() {
            bail!(Dimension, "concat axis {axis} on rank {}", shape0.len());
        }
        let mut out_shape = shape0.clone();
        out_shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != shape0.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != shape0[d]) {
                bail!(Dimension, "concat shape mismatch {:?} vs {:?} on axis {axis}", s, shape0);
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = shape0[..axis].iter().product();
        let inner: usize = shape0[axis + 1..].iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &wd) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * wd..(o + 1) * wd]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push(Tensor::from_vec(&out_shape, data)?, Op::Concat { inputs: ids.clone(), outer, widths }, &ids)
    }

    /// Reverse accumulation from a scalar loss. Consumes the tape: later
    /// recording or a second backward is a contract error.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        if self.consumed.replace(true) {
            bail!(Contract, "backward called twice on one tape");
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", root.value.shape());
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::from_vec(root.value.shape(), vec![S::one()])?);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let want = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| &nodes[i].value;
            let mut acc = |i: usize, d: Vec<S>| {
                accumulate(&mut grads[i], nodes[i].value.shape(), d);
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) =
                        kernels::conv2d_backward(geom, val(*x).data(), val(*w).data(), g.data(), want(*x));
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if want(*w) {
                        acc(*w, dw);
                    }
                    if let Some(b) = b {
                        if want(*b) {
                            acc(*b, db);
                        }
                    }
                }
                Op::Linear { x, w, b, rows, fin, fout } => {
                    let gm = Mat::new(g.data(), *rows, *fout);
                    if want(*x) {
                        let mut dx = vec![S::zero(); rows * fin];
                        gemm(gm, Mat::new(val(*w).data(), *fout, *fin), S::zero(), &mut dx);
                        acc(*x, dx);
                    }
                    if want(*w) {
                        let mut dw = vec![S::zero(); fout * fin];
                        gemm(gm.t(), Mat::new(val(*x).data(), *rows, *fin), S::zero(), &mut dw);
                        acc(*w, dw);
                    }
                    if let Some(b) = b {
                        if want(*b) {
                            let mut db = vec![S::zero(); *fout];
                            for r in 0..*rows {
                                for (o, d) in db.iter_mut().enumerate() {
                                    *d += g.data()[r * fout + o];
                                }
                            }
                            acc(*b, db);
                        }
                    }
                }
                Op::GroupNorm { x, gamma, beta, n, c, spatial, groups, stats } => {
                    let (dx, dg, db) = kernels::group_norm_backward(
                        val(*x).data(),
                        g.data(),
                        *n,
                        *c,
                        *spatial,
                        *groups,
                        val(*gamma).data(),
                        stats,
                    );
                    if want(*x) {
                        acc(*x, dx);
                    }
                    if want(*gamma) {
                        acc(*gamma, dg);
                    }
                    if want(*beta) {
                        acc(*beta, db);
                    }
                }
                Op::Silu { x } => {
                    let d = val(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| {
                            let s = kernels::sigmoid(v);
                            gv * s * (S::one() + v * (S::one() - s))
                        })
                        .collect();
                    acc(*x, d);
                }
                Op::Softmax { outer, len, inner, x } => {
                    let d = kernels::softmax_backward(node.value.data(), g.data(), *outer, *len, *inner);
                    acc(*x, d);
                }
                Op::Upsample2x { x, planes, h, w } => {
                    acc(*x, kernels::upsample2x_backward(g.data(), *planes, *h, *w));
                }
                Op::AvgPool2x { x, planes, h, w } => {
                    acc(*x, kernels::avgpool2x_backward(g.data(), *planes, *h, *w));
                }
                Op::Add { a, b } => {
                    if want(*a) {
                        acc(*a, g.data().to_vec());
                    }
                    if want(*b) {
                        acc(*b, g.data().to_vec());
                    }
                }
                Op::Sub { a, b } => {
                    if want(*a) {
                        acc(*a, g.data().to_vec());
                    }
                    if want(*b) {
                        acc(*b, g.data().iter().map(|&v| -v).collect());
                    }
                }
                Op::Mul { a, b } => {
                    if want(*a) {
                        acc(*a, g.data().iter().zip(val(*b).data()).map(|(&gv, &bv)| gv * bv).collect());
                    }
                    if want(*b) {
                        acc(*b, g.data().iter().zip(val(*a).data()).map(|(&gv, &av)| gv * av).collect());
                    }
                }
                Op::Scale { x, c } => {
                    acc(*x, g.data().iter().map(|&v| v * *c).collect());
                }
                Op::AddBias { x, b, n, c, spatial, per_sample } => {
                    if want(*x) {
                        acc(*x, g.data().to_vec());
                    }
                    if want(*b) {
                        let mut db = vec![S::zero(); if *per_sample { n * c } else { *c }];
                        for s in 0..*n {
                            for ch in 0..*c {
                                let slot = if *per_sample { s * c + ch } else { ch };
                                let off = (s * c + ch) * spatial;
                                let mut sum = S::zero();
                                for &v in &g.data()[off..off + spatial] {
                                    sum += v;
                                }
                                db[slot] += sum;
                            }
                        }
                        acc(*b, db);
                    }
                }
                Op::Concat { inputs, outer, widths } => {
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (&inp, &wd) in inputs.iter().zip(widths) {
                        if want(inp) {
                            let mut d = Vec::with_capacity(outer * wd);
                            for o in 0..*outer {
                                d.extend_from_slice(&g.data()[o * total + offset..o * total + offset + wd]);
                            }
                            acc(inp, d);
                        }
                        offset += wd;
                    }
                }
                Op::Reshape { x } => {
                    acc(*x, g.data().to_vec());
                }
                Op::Bmm { a, b, batch, a_dims, b_dims, ta, tb } => {
                    let (ar, ac) = *a_dims;
                    let (br, bc) = *b_dims;
                    let m = if *ta { ac } else { ar };
                    let n = if *tb { br } else { bc };
                    let (av, bv) = (val(*a), val(*b));
                    let mut da = want(*a).then(|| vec![S::zero(); batch * ar * ac]);
                    let mut db = want(*b).then(|| vec![S::zero(); batch * br * bc]);
                    for i in 0..*batch {
                        let gi = Mat::new(&g.data()[i * m * n..(i + 1) * m * n], m, n);
                        let am = Mat::new(&av.data()[i * ar * ac..(i + 1) * ar * ac], ar, ac);
                        let bm = Mat::new(&bv.data()[i * br * bc..(i + 1) * br * bc], br, bc);
                        let opa = if *ta { am.t() } else { am };
                        let opb = if *tb { bm.t() } else { bm };
                        if let Some(da) = da.as_mut() {
                            let out = &mut da[i * ar * ac..(i + 1) * ar * ac];
                            if *ta {
                                gemm(opb, gi.t(), S::zero(), out);
                            } else {
                                gemm(gi, opb.t(), S::zero(), out);
                            }
                        }
                        if let Some(db) = db.as_mut() {
                            let out = &mut db[i * br * bc..(i + 1) * br * bc];
                            if *tb {
                                gemm(gi.t(), opa, S::zero(), out);
                            } else {
                                gemm(opa.t(), gi, S::zero(), out);
                            }
                        }
                    }
                    if let Some(da) = da {
                        acc(*a, da);
                    }
                    if let Some(db) = db {
                        acc(*b, db);
                    }
                }
                Op::Sum { x } => {
                    let gv = g.data()[0];
                    acc(*x, vec![gv; val(*x).numel()]);
                }
                Op::Mean { x } => {
                    let numel = val(*x).numel();
                    let gv = g.data()[0] / S::from_usize(numel).unwrap();
                    acc(*x, vec![gv; numel]);
                }
                Op::CrossEntropy { logits, targets, probs, n, c, p } => {
                    let d = kernels::cross_entropy_backward(probs, targets, *n, *c, *p, g.data()[0]);
                    acc(*logits, d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, shape: &[usize], d: Vec<S>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(d) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::from_vec(shape, d).expect("gradient matches value shape")),
    }
}

fn expect_rank<S: Scalar>(t: &Tensor<S>, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        bail!(Dimension, "{what} expects rank {rank}, got shape {:?}", t.shape());
    }
    Ok(())
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn same_tape(&self, other: &Var<'t, S>) -> Result<()> {
        if !std::ptr::eq(self.tape, other.tape) {
            bail!(Contract, "operands recorded on different tapes");
        }
        Ok(())
    }

    /// Cross-correlation of `[N,C,H,W]` with `[O,C,kh,kw]`.
    pub fn conv2d(&self, kernel: Var<'t, S>, bias: Option<Var<'t, S>>, stride: usize, pad: usize) -> Result<Self> {
        self.same_tape(&kernel)?;
        let (x, w) = (self.value(), kernel.value());
        expect_rank(&x, 4, "conv2d input")?;
        expect_rank(&w, 4, "conv2d kernel")?;
        let (xs, ws) = (x.shape(), w.shape());
        if xs[1] != ws[1] {
            bail!(Dimension, "conv2d channels: input {:?}, kernel {:?}", xs, ws);
        }
        if stride == 0 {
            bail!(Config, "conv2d stride must be at least 1");
        }
        let (hp, wp) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        if ws[2] > hp || ws[3] > wp {
            bail!(Dimension, "conv2d kernel {:?} larger than padded input {hp}x{wp}", ws);
        }
        if (hp - ws[2]) % stride != 0 || (wp - ws[3]) % stride != 0 {
            bail!(Config, "conv2d output size not exact for input {:?}, kernel {:?}, stride {stride}, pad {pad}", xs, ws);
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (hp - ws[2]) / stride + 1,
            wo: (wp - ws[3]) / stride + 1,
        };
        let bval = match bias {
            Some(b) => {
                self.same_tape(&b)?;
                let bv = b.value();
                if bv.shape() != [geom.o] {
                    bail!(Dimension, "conv2d bias {:?} for {} output channels", bv.shape(), geom.o);
                }
                Some(bv)
            }
            None => None,
        };
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), bval.as_ref().map(|b| b.data()));
        let value = Tensor::from_vec(&[geom.n, geom.o, geom.ho, geom.wo], out)?;
        let mut inputs = vec![self.id, kernel.id];
        inputs.extend(bias.map(|b| b.id));
        self.tape.push(value, Op::Conv2d { x: self.id, w: kernel.id, b: bias.map(|b| b.id), geom }, &inputs)
    }

    /// `x·Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&self, weight: Var<'t, S>, bias: Option<Var<'t, S>>) -> Result<Self> {
        self.same_tape(&weight)?;
        let (x, w) = (self.value(), weight.value());
        expect_rank(&x, 2, "linear input")?;
        expect_rank(&w, 2, "linear weight")?;
        let (rows, fin, fout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        if w.shape()[1] != fin {
            bail!(Dimension, "linear: input {:?}, weight {:?}", x.shape(), w.shape());
        }
        let mut out = vec![S::zero(); rows * fout];
        let mut beta = S::zero();
        if let Some(b) = bias {
            self.same_tape(&b)?;
            let bv = b.value();
            if bv.shape() != [fout] {
                bail!(Dimension, "linear bias {:?} for {fout} outputs", bv.shape());
            }
            for r in 0..rows {
                out[r * fout..(r + 1) * fout].copy_from_slice(bv.data());
            }
            beta = S::one();
        }
        gemm(Mat::new(x.data(), rows, fin), Mat::new(w.data(), fout, fin).t(), beta, &mut out);
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|b| b.id));
        self.tape.push(
            Tensor::from_vec(&[rows, fout], out)?,
            Op::Linear { x: self.id, w: weight.id, b: bias.map(|b| b.id), rows, fin, fout },
            &inputs,
        )
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine.
    pub fn group_norm(&self, groups: usize, gamma: Var<'t, S>, beta: Var<'t, S>) -> Result<Self> {
        let x = self.value();
        if x.rank() < 2 {
            bail!(Dimension, "group_norm needs [N, C, ...], got {:?}", x.shape());
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let spatial: usize = x.shape()[2..].iter().product();
        if groups == 0 || c % groups != 0 {
            bail!(Dimension, "group_norm: {c} channels not divisible into {groups} groups");
        }
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            bail!(Dimension, "group_norm affine shapes {:?}/{:?} for {c} channels", gv.shape(), bv.shape());
        }
        let (y, stats) = kernels::group_norm_forward(
            x.data(),
            n,
            c,
            spatial,
            groups,
            gv.data(),
            bv.data(),
            S::from_f(GROUP_NORM_EPS),
        );
        self.tape.push(
            Tensor::from_vec(x.shape(), y)?,
            Op::GroupNorm { x: self.id, gamma: gamma.id, beta: beta.id, n, c, spatial, groups, stats },
            &[self.id, gamma.id, beta.id],
        )
    }

    pub fn silu(&self) -> Result<Self> {
        let x = self.value();
        let y = x.map(|v| v * kernels::sigmoid(v));
        self.tape.push(y, Op::Silu { x: self.id }, &[self.id])
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let x = self.value();
        if axis >= x.rank() {
            bail!(Dimension, "softmax axis {axis} on shape {:?}", x.shape());
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let len = x.shape()[axis];
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let y = kernels::softmax_forward(x.data(), outer, len, inner);
        self.tape.push(Tensor::from_vec(x.shape(), y)?, Op::Softmax { outer, len, inner, x: self.id }, &[self.id])
    }

    fn planes_hw(&self, what: &str) -> Result<(Rc<Tensor<S>>, usize, usize, usize)> {
        let x = self.value();
        expect_rank(&x, 4, what)?;
        let s = x.shape();
        let planes = s[0] * s[1];
        let (h, w) = (s[2], s[3]);
        Ok((x, planes, h, w))
    }

    pub fn nearest_upsample2x(&self) -> Result<Self> {
        let (x, planes, h, w) = self.planes_hw("nearest_upsample2x")?;
        let s = x.shape();
        let y = kernels::upsample2x_forward(x.data(), planes, h, w);
        self.tape.push(
            Tensor::from_vec(&[s[0], s[1], 2 * h, 2 * w], y)?,
            Op::Upsample2x { x: self.id, planes, h, w },
            &[self.id],
        )
    }

    pub fn avgpool2x(&self) -> Result<Self> {
        let (x, planes, h, w) = self.planes_hw("avgpool2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            bail!(Dimension, "avgpool2x needs even spatial size, got {:?}", x.shape());
        }
        let s = x.shape();
        let y = kernels::avgpool2x_forward(x.data(), planes, h, w);
        self.tape.push(
            Tensor::from_vec(&[s[0], s[1], h / 2, w / 2], y)?,
            Op::AvgPool2x { x: self.id, planes, h, w },
            &[self.id],
        )
    }

    fn binary(&self, other: Var<'t, S>, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Self> {
        self.same_tape(&other)?;
        let y = self.value().zip_map(&other.value(), f)?;
        self.tape.push(y, op, &[self.id, other.id])
    }

    pub fn add(&self, other: Var<'t, S>) -> Result<Self> {
        self.binary(other, |a, b| a + b, Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(&self, other: Var<'t, S>) -> Result<Self> {
        self.binary(other, |a, b| a - b, Op::Sub { a: self.id, b: other.id })
    }

    pub fn mul(&self, other: Var<'t, S>) -> Result<Self> {
        self.binary(other, |a, b| a * b, Op::Mul { a: self.id, b: other.id })
    }

    pub fn scale(&self, c: S) -> Result<Self> {
        let y = self.value().map(|v| v * c);
        self.tape.push(y, Op::Scale { x: self.id, c }, &[self.id])
    }

    /// Adds a per-channel bias to `[N, C, ...]`. The bias is `[C]` or, for
    /// per-sample conditioning, `[N, C]`.
    pub fn add_bias(&self, bias: Var<'t, S>) -> Result<Self> {
        self.same_tape(&bias)?;
        let (x, b) = (self.value(), bias.value());
        if x.rank() < 2 {
            bail!(Dimension, "add_bias needs [N, C, ...], got {:?}", x.shape());
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let spatial: usize = x.shape()[2..].iter().product();
        let per_sample = match b.shape() {
            [bc] if *bc == c => false,
            [bn, bc] if *bn == n && *bc == c => true,
            other => bail!(Dimension, "add_bias: bias {:?} for input {:?}", other, x.shape()),
        };
        let mut y = x.as_ref().clone();
        for s in 0..n {
            for ch in 0..c {
                let bvv = b.data()[if per_sample { s * c + ch } else { ch }];
                let off = (s * c + ch) * spatial;
                for v in &mut y.data_mut()[off..off + spatial] {
                    *v += bvv;
                }
            }
        }
        self.tape.push(
            y,
            Op::AddBias { x: self.id, b: bias.id, n, c, spatial, per_sample },
            &[self.id, bias.id],
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let y = self.value().as_ref().clone().reshape(shape)?;
        self.tape.push(y, Op::Reshape { x: self.id }, &[self.id])
    }

    /// Batched matrix product over rank-3 operands, each optionally
    /// transposed in its last two axes.
    pub fn bmm(&self, other: Var<'t, S>, trans_self: bool, trans_other: bool) -> Result<Self> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        expect_rank(&a, 3, "bmm lhs")?;
        expect_rank(&b, 3, "bmm rhs")?;
        let batch = a.shape()[0];
        if b.shape()[0] != batch {
            bail!(Dimension, "bmm batch {:?} vs {:?}", a.shape(), b.shape());
        }
        let a_dims = (a.shape()[1], a.shape()[2]);
        let b_dims = (b.shape()[1], b.shape()[2]);
        let (m, k) = if trans_self { (a_dims.1, a_dims.0) } else { a_dims };
        let (k2, n) = if trans_other { (b_dims.1, b_dims.0) } else { b_dims };
        if k != k2 {
            bail!(Dimension, "bmm inner dims {:?}{} x {:?}{}", a.shape(), if trans_self { "ᵀ" } else { "" }, b.shape(), if trans_other { "ᵀ" } else { "" });
        }
        let mut out = vec![S::zero(); batch * m * n];
        for i in 0..batch {
            let am = Mat::new(&a.data()[i * a_dims.0 * a_dims.1..(i + 1) * a_dims.0 * a_dims.1], a_dims.0, a_dims.1);
            let bm = Mat::new(&b.data()[i * b_dims.0 * b_dims.1..(i + 1) * b_dims.0 * b_dims.1], b_dims.0, b_dims.1);
            let opa = if trans_self { am.t() } else { am };
            let opb = if trans_other { bm.t() } else { bm };
            gemm(opa, opb, S::zero(), &mut out[i * m * n..(i + 1) * m * n]);
        }
        self.tape.push(
            Tensor::from_vec(&[batch, m, n], out)?,
            Op::Bmm { a: self.id, b: other.id, batch, a_dims, b_dims, ta: trans_self, tb: trans_other },
            &[self.id, other.id],
        )
    }

    pub fn sum(&self) -> Result<Self> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum { x: self.id }, &[self.id])
    }

    pub fn mean(&self) -> Result<Self> {
        let m = self.value().mean();
        self.tape.push(Tensor::scalar(m), Op::Mean { x: self.id }, &[self.id])
    }

    /// Mean squared difference to `target`.
    pub fn mse(&self, target: Var<'t, S>) -> Result<Self> {
        let d = self.sub(target)?;
        d.mul(d)?.mean()
    }

    /// Mean over pixels of `-log softmax(logits)[target]` for logits
    /// `[N, C, H, W]` and targets laid out `[N, H, W]`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Self> {
        let x = self.value();
        if x.rank() < 2 {
            bail!(Dimension, "cross_entropy needs [N, C, ...] logits, got {:?}", x.shape());
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let p: usize = x.shape()[2..].iter().product();
        if targets.len() != n * p {
            bail!(Dimension, "cross_entropy: {} targets for logits {:?}", targets.len(), x.shape());
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            bail!(Contract, "target class {bad} out of range for {c} classes");
        }
        let (loss, probs) = kernels::cross_entropy_forward(x.data(), targets, n, c, p);
        self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), probs, n, c, p },
            &[self.id],
        )
    }
}
