use std::collections::HashMap;

use super::kernels::{self, Binary, ConvGeom, RoiPlan};
use super::{Element, ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// One RoI to crop: sample index, pyramid slot in the `levels` list and the
/// precomputed bilinear plan.
#[derive(Clone, Debug)]
pub struct RoiSample {
    pub batch: usize,
    pub level: usize,
    pub plan: RoiPlan,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    AdaptivePool(NodeId),
    GlobalPool(NodeId),
    Upsample(NodeId),
    Concat(Vec<NodeId>),
    Binary(NodeId, NodeId, Binary),
    ChannelScale {
        x: NodeId,
        s: NodeId,
    },
    Reshape(NodeId),
    IndexRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    RoiAlign {
        levels: Vec<NodeId>,
        rois: Vec<RoiSample>,
    },
    Sum(NodeId),
    Scale(NodeId, T),
    Bce {
        x: NodeId,
        target: Vec<T>,
        weight: Vec<T>,
    },
    SmoothL1 {
        x: NodeId,
        target: Vec<T>,
        weight: Vec<T>,
    },
    SoftmaxCe {
        x: NodeId,
        labels: Vec<usize>,
        weight: Vec<T>,
    },
}

enum Value<'p, T: Element> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

struct Node<'p, T: Element> {
    value: Value<'p, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation. Parameters are
/// borrowed from the store, never copied.
pub struct Graph<'p, T: Element> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<'p, T>>,
    params: HashMap<ParamId, NodeId>,
    macs: u64,
}

/// Result of [`Graph::backward`]: `∂loss/∂θ` for every reachable parameter
/// and for every input created with [`Graph::input_grad`].
#[derive(Debug)]
pub struct Gradients<T: Element> {
    pub params: Vec<(ParamId, Tensor<T>)>,
    pub inputs: Vec<(NodeId, Tensor<T>)>,
}

impl<T: Element> Gradients<T> {
    pub fn input(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.inputs.iter().find(|(n, _)| *n == id).map(|(_, t)| t)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}

fn sl1<T: Element>(d: T) -> T {
    if d.abs() < T::one() {
        T::of(0.5) * d * d
    } else {
        d.abs() - T::of(0.5)
    }
}

/// Smooth-L1: `0.5·x²` for `|x| < 1`, `|x| − 0.5` otherwise.
pub fn smooth_l1<T: Element>(x: T) -> T {
    sl1(x)
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            macs: 0,
        }
    }

    /// Multiply-accumulates spent in convolutions and linear layers so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Input, &[])
    }

    /// Input whose gradient is reported in [`Gradients::inputs`].
    pub fn input_grad(&mut self, t: Tensor<T>) -> NodeId {
        let id = self.push(t, Op::Input, &[]);
        self.nodes[id.0].needs_grad = true;
        id
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(self.store.value(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.params.insert(id, n);
        n
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let geom = ConvGeom { stride, pad };
        let wv = self.value(w);
        let (kh, kw) = (wv.nchw().2, wv.nchw().3);
        if !matches!(kh, 1 | 3) || !matches!(kw, 1 | 3) || !matches!(stride, 1 | 2) {
            return Err(Error::Invalid(format!("conv2d kernel {kh}x{kw} stride {stride}")));
        }
        let y = kernels::conv2d(self.value(x), wv, b.map(|b| self.value(b)), geom)?;
        self.macs += (y.len() * wv.len() / wv.dim(0)) as u64;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, geom }, &parents))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.macs += (y.dim(0) * self.value(w).len()) as u64;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(y, Op::Linear { x, w, b }, &parents))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = kernels::relu(self.value(x));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = kernels::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn adaptive_avg_pool(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let y = kernels::adaptive_avg_pool(self.value(x), oh, ow)?;
        Ok(self.push(y, Op::AdaptivePool(x), &[x]))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let y = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalPool(x), &[x]))
    }

    pub fn upsample_nearest2x(&mut self, x: NodeId) -> Result<NodeId> {
        let y = kernels::upsample_nearest2x(self.value(x))?;
        Ok(self.push(y, Op::Upsample(x), &[x]))
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&x| self.value(x)).collect();
        let y = kernels::concat_channels(&vals)?;
        Ok(self.push(y, Op::Concat(xs.to_vec()), xs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = kernels::elementwise(self.value(a), self.value(b), Binary::Add)?;
        Ok(self.push(y, Op::Binary(a, b, Binary::Add), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = kernels::elementwise(self.value(a), self.value(b), Binary::Mul)?;
        Ok(self.push(y, Op::Binary(a, b, Binary::Mul), &[a, b]))
    }

    /// Sum of a non-empty list, accumulated left to right.
    pub fn add_all(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = match xs.split_first() {
            Some(s) => s,
            None => return Err(Error::Invalid("add_all of empty list".into())),
        };
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn channel_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let y = kernels::channel_scale(self.value(x), self.value(s))?;
        Ok(self.push(y, Op::ChannelScale { x, s }, &[x, s]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    /// `[N, C, H, W] → [N, C·H·W]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let n = v.dim(0);
        let rest = v.len() / n.max(1);
        self.reshape(x, &[n, rest])
    }

    /// Gather rows (first axis) of `x`; rows may repeat.
    pub fn index_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = self.value(x);
        let rows = v.dim(0);
        let width = v.len() / rows.max(1);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return shape_err("index_rows", format!("row {bad} of {rows}"));
        }
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&v.data()[i * width..(i + 1) * width]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let y = Tensor::new(&shape, data)?;
        Ok(self.push(y, Op::IndexRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Crop every RoI from its pyramid level into `[R, C, out, out]`.
    pub fn roi_align(&mut self, levels: &[NodeId], rois: Vec<RoiSample>) -> Result<NodeId> {
        let first = match levels.first() {
            Some(&l) => self.value(l).nchw(),
            None => return Err(Error::Invalid("roi_align needs at least one level".into())),
        };
        let c = first.1;
        let out = rois.first().map(|r| r.plan.out).unwrap_or(1);
        let nb = out * out;
        let mut data = vec![T::zero(); rois.len() * c * nb];
        for (r, roi) in rois.iter().enumerate() {
            let lv = levels
                .get(roi.level)
                .map(|&l| self.value(l))
                .ok_or_else(|| Error::Invalid(format!("roi level {}", roi.level)))?;
            let (n, cc, h, w) = lv.nchw();
            if cc != c || roi.batch >= n || roi.plan.out != out {
                return shape_err("roi_align", format!("level {:?}, roi batch {}", lv.shape(), roi.batch));
            }
            let planes = &lv.data()[roi.batch * c * h * w..(roi.batch + 1) * c * h * w];
            kernels::roi_apply(&roi.plan, planes, h * w, &mut data[r * c * nb..(r + 1) * c * nb]);
        }
        let y = Tensor::new(&[rois.len(), c, out, out], data)?;
        Ok(self.push(
            y,
            Op::RoiAlign {
                levels: levels.to_vec(),
                rois,
            },
            levels,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x), &[x])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = T::of(c);
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale(x, c), &[x])
    }

    fn check_targets(&self, op: &'static str, x: NodeId, a: usize, b: usize) -> Result<()> {
        let n = self.value(x).len();
        if a != n || b != n {
            return shape_err(op, format!("{n} values vs targets {a}, weights {b}"));
        }
        Ok(())
    }

    /// `Σ wᵢ · BCE(σ(xᵢ), tᵢ)` computed from logits.
    pub fn bce_with_logits(&mut self, x: NodeId, target: Vec<T>, weight: Vec<T>) -> Result<NodeId> {
        self.check_targets("bce_with_logits", x, target.len(), weight.len())?;
        let mut acc = T::zero();
        for ((&l, &t), &w) in self.value(x).data().iter().zip(&target).zip(&weight) {
            if w != T::zero() {
                acc += w * (l.max(T::zero()) - l * t + (T::one() + (-l.abs()).exp()).ln());
            }
        }
        Ok(self.push(Tensor::scalar(acc), Op::Bce { x, target, weight }, &[x]))
    }

    /// `Σ wᵢ · smoothL1(xᵢ − tᵢ)`.
    pub fn smooth_l1(&mut self, x: NodeId, target: Vec<T>, weight: Vec<T>) -> Result<NodeId> {
        self.check_targets("smooth_l1", x, target.len(), weight.len())?;
        let mut acc = T::zero();
        for ((&v, &t), &w) in self.value(x).data().iter().zip(&target).zip(&weight) {
            if w != T::zero() {
                acc += w * sl1(v - t);
            }
        }
        Ok(self.push(Tensor::scalar(acc), Op::SmoothL1 { x, target, weight }, &[x]))
    }

    /// `Σ_r w_r · (−log softmax(x_r)[label_r])` over rows of a 2-D tensor.
    pub fn softmax_cross_entropy(&mut self, x: NodeId, labels: Vec<usize>, weight: Vec<T>) -> Result<NodeId> {
        let v = self.value(x);
        if v.shape().len() != 2 || v.dim(0) != labels.len() || weight.len() != labels.len() {
            return shape_err("softmax_cross_entropy", format!("{:?} vs {} labels", v.shape(), labels.len()));
        }
        let k = v.dim(1);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return shape_err("softmax_cross_entropy", format!("label {bad} of {k}"));
        }
        let mut acc = T::zero();
        for ((row, &l), &w) in v.data().chunks(k).zip(&labels).zip(&weight) {
            if w == T::zero() {
                continue;
            }
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&r| (r - m).exp()).sum::<T>().ln();
            acc += w * (lse - row[l]);
        }
        Ok(self.push(Tensor::scalar(acc), Op::SoftmaxCe { x, labels, weight }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return shape_err("backward", format!("loss shape {:?} is not scalar", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        let mut out = Gradients {
            params: Vec::new(),
            inputs: Vec::new(),
        };

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<Tensor<T>>>, to: NodeId, g: Tensor<T>| -> Result<()> {
                if !self.nodes[to.0].needs_grad {
                    return Ok(());
                }
                match grads[to.0].as_mut() {
                    Some(acc) => acc.add_assign(&g)?,
                    None => grads[to.0] = Some(g),
                }
                Ok(())
            };
            let needs = |n: NodeId| self.nodes[n.0].needs_grad;
            match &node.op {
                Op::Input => out.inputs.push((NodeId(i), dy)),
                Op::Param(p) => out.params.push((*p, dy)),
                Op::Conv2d { x, w, b, geom } => {
                    let g = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy,
                        *geom,
                        (needs(*x), needs(*w), b.is_some_and(needs)),
                    )?;
                    if let Some(d) = g.dx {
                        send(&mut grads, *x, d)?;
                    }
                    if let Some(d) = g.dw {
                        send(&mut grads, *w, d)?;
                    }
                    if let (Some(b), Some(d)) = (b, g.db) {
                        send(&mut grads, *b, d)?;
                    }
                }
                Op::Linear { x, w, b } => {
                    let g = kernels::linear_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy,
                        (needs(*x), needs(*w), b.is_some_and(needs)),
                    )?;
                    if let Some(d) = g.dx {
                        send(&mut grads, *x, d)?;
                    }
                    if let Some(d) = g.dw {
                        send(&mut grads, *w, d)?;
                    }
                    if let (Some(b), Some(d)) = (b, g.db) {
                        send(&mut grads, *b, d)?;
                    }
                }
                Op::Relu(x) => {
                    let y = self.value(NodeId(i));
                    let mut d = dy;
                    for (g, &v) in d.data_mut().iter_mut().zip(y.data()) {
                        if v <= T::zero() {
                            *g = T::zero();
                        }
                    }
                    send(&mut grads, *x, d)?;
                }
                Op::Sigmoid(x) => {
                    let y = self.value(NodeId(i));
                    let mut d = dy;
                    for (g, &v) in d.data_mut().iter_mut().zip(y.data()) {
                        *g *= v * (T::one() - v);
                    }
                    send(&mut grads, *x, d)?;
                }
                Op::AdaptivePool(x) => {
                    let d = kernels::adaptive_avg_pool_backward(self.value(*x).shape(), &dy);
                    send(&mut grads, *x, d)?;
                }
                Op::GlobalPool(x) => {
                    let d = kernels::global_avg_pool_backward(self.value(*x).shape(), &dy);
                    send(&mut grads, *x, d)?;
                }
                Op::Upsample(x) => send(&mut grads, *x, kernels::upsample_nearest2x_backward(&dy))?,
                Op::Concat(xs) => {
                    let widths: Vec<usize> = xs.iter().map(|x| self.value(*x).dim(1)).collect();
                    for (x, d) in xs.iter().zip(kernels::split_channels(&dy, &widths)) {
                        send(&mut grads, *x, d)?;
                    }
                }
                Op::Binary(a, b, Binary::Add) => {
                    if needs(*b) {
                        send(&mut grads, *b, dy.clone())?;
                    }
                    send(&mut grads, *a, dy)?;
                }
                Op::Binary(a, b, Binary::Mul) => {
                    if needs(*a) {
                        let d = kernels::elementwise(&dy, self.value(*b), Binary::Mul)?;
                        send(&mut grads, *a, d)?;
                    }
                    if needs(*b) {
                        let d = kernels::elementwise(&dy, self.value(*a), Binary::Mul)?;
                        send(&mut grads, *b, d)?;
                    }
                }
                Op::ChannelScale { x, s } => {
                    let (dx, ds) = kernels::channel_scale_backward(self.value(*x), self.value(*s), &dy);
                    send(&mut grads, *x, dx)?;
                    send(&mut grads, *s, ds)?;
                }
                Op::Reshape(x) => {
                    let d = dy.reshape(self.value(*x).shape())?;
                    send(&mut grads, *x, d)?;
                }
                Op::IndexRows { x, idx } => {
                    let xv = self.value(*x);
                    let width = xv.len() / xv.dim(0).max(1);
                    let mut d = vec![T::zero(); xv.len()];
                    for (r, &src) in idx.iter().enumerate() {
                        for (a, &g) in d[src * width..(src + 1) * width]
                            .iter_mut()
                            .zip(&dy.data()[r * width..(r + 1) * width])
                        {
                            *a += g;
                        }
                    }
                    send(&mut grads, *x, Tensor::from_vec(xv.shape(), d))?;
                }
                Op::RoiAlign { levels, rois } => {
                    let mut dl: Vec<Option<Vec<T>>> = levels
                        .iter()
                        .map(|l| needs(*l).then(|| vec![T::zero(); self.value(*l).len()]))
                        .collect();
                    let (_, c, out, _) = dy.nchw();
                    let nb = out * out;
                    for (r, roi) in rois.iter().enumerate() {
                        let Some(buf) = dl[roi.level].as_mut() else { continue };
                        let (_, _, h, w) = self.value(levels[roi.level]).nchw();
                        let planes = &mut buf[roi.batch * c * h * w..(roi.batch + 1) * c * h * w];
                        kernels::roi_apply_backward(&roi.plan, &dy.data()[r * c * nb..(r + 1) * c * nb], h * w, planes);
                    }
                    for (l, d) in levels.iter().zip(dl) {
                        if let Some(d) = d {
                            send(&mut grads, *l, Tensor::from_vec(self.value(*l).shape(), d))?;
                        }
                    }
                }
                Op::Sum(x) => {
                    let g = dy.data()[0];
                    send(&mut grads, *x, Tensor::full(self.value(*x).shape(), g))?;
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    send(&mut grads, *x, dy.map(|v| v * c))?;
                }
                Op::Bce { x, target, weight } => {
                    let g = dy.data()[0];
                    let xv = self.value(*x);
                    let d: Vec<T> = xv
                        .data()
                        .iter()
                        .zip(target)
                        .zip(weight)
                        .map(|((&l, &t), &w)| g * w * (kernels::sigmoid_scalar(l) - t))
                        .collect();
                    send(&mut grads, *x, Tensor::from_vec(xv.shape(), d))?;
                }
                Op::SmoothL1 { x, target, weight } => {
                    let g = dy.data()[0];
                    let xv = self.value(*x);
                    let d: Vec<T> = xv
                        .data()
                        .iter()
                        .zip(target)
                        .zip(weight)
                        .map(|((&v, &t), &w)| g * w * (v - t).max(-T::one()).min(T::one()))
                        .collect();
                    send(&mut grads, *x, Tensor::from_vec(xv.shape(), d))?;
                }
                Op::SoftmaxCe { x, labels, weight } => {
                    let g = dy.data()[0];
                    let xv = self.value(*x);
                    let k = xv.dim(1);
                    let mut d = kernels::softmax_rows(xv).into_data();
                    for ((row, &l), &w) in d.chunks_mut(k).zip(labels).zip(weight) {
                        row[l] -= T::one();
                        row.iter_mut().for_each(|v| *v *= g * w);
                    }
                    send(&mut grads, *x, Tensor::from_vec(xv.shape(), d))?;
                }
            }
        }
        out.params.sort_by_key(|(p, _)| *p);
        out.inputs.sort_by_key(|(n, _)| n.0);
        Ok(out)
    }
}
