//! Forward and backward kernels on raw tensors. The graph in `graph.rs`
//! dispatches to these; they are also usable directly for inference.

use super::gemm::matmul;
use super::{Element, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

fn conv_out(extent: usize, k: usize, g: ConvGeom) -> Option<usize> {
    let padded = extent + 2 * g.pad;
    if padded < k || g.stride == 0 {
        return None;
    }
    Some((padded - k) / g.stride + 1)
}

/// Output extents for a convolution, or an error for empty outputs.
pub fn conv2d_out_shape(
    x: &[usize],
    w: &[usize],
    g: ConvGeom,
) -> Result<(usize, usize, usize, usize)> {
    if x.len() != 4 || w.len() != 4 {
        return shape_err("conv2d", format!("x {x:?}, w {w:?} must be 4-D"));
    }
    if x[1] != w[1] {
        return shape_err("conv2d", format!("input channels {} vs kernel {}", x[1], w[1]));
    }
    match (conv_out(x[2], w[2], g), conv_out(x[3], w[3], g)) {
        (Some(h), Some(wo)) if h > 0 && wo > 0 => Ok((x[0], w[0], h, wo)),
        _ => shape_err("conv2d", format!("non-positive output for x {x:?}, w {w:?}, {g:?}")),
    }
}

fn is_pointwise(kh: usize, kw: usize, g: ConvGeom) -> bool {
    kh == 1 && kw == 1 && g.stride == 1 && g.pad == 0
}

/// Unfold one sample `[C,H,W]` into `[C·kh·kw, Ho·Wo]` columns.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((ci * kh + ky) * kw + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
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

/// Fold columns back, accumulating into `dx` (`[C,H,W]`).
#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ci * kh + ky) * kw + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with zero padding. Lowered to one GEMM per sample
/// (columns ordered in-channel → kernel row → kernel col).
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    let (n, cout, ho, wo) = conv2d_out_shape(x.shape(), w.shape(), g)?;
    let (_, cin, h, wi) = x.nchw();
    let (kh, kw) = (w.dim(2), w.dim(3));
    if let Some(b) = b {
        if b.len() != cout {
            return shape_err("conv2d", format!("bias {:?} vs {cout} outputs", b.shape()));
        }
    }
    let k = cin * kh * kw;
    let p = ho * wo;
    let mut out = vec![T::zero(); n * cout * p];
    let mut cols = if is_pointwise(kh, kw, g) {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for s in 0..n {
        let xs = &x.data()[s * cin * h * wi..(s + 1) * cin * h * wi];
        let rhs: &[T] = if cols.is_empty() {
            xs
        } else {
            im2col(xs, cin, h, wi, kh, kw, g, ho, wo, &mut cols);
            &cols
        };
        let os = &mut out[s * cout * p..(s + 1) * cout * p];
        if let Some(b) = b {
            for (co, chunk) in os.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[co]);
            }
        }
        matmul(cout, k, p, w.data(), false, rhs, false, os, b.is_some());
    }
    Tensor::new(&[n, cout, ho, wo], out)
}

pub struct ConvGrads<T: Element> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: ConvGeom,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let (n, cout, ho, wo) = conv2d_out_shape(x.shape(), w.shape(), g)?;
    if dy.shape() != [n, cout, ho, wo] {
        return shape_err("conv2d_backward", format!("dy {:?}", dy.shape()));
    }
    let (_, cin, h, wi) = x.nchw();
    let (kh, kw) = (w.dim(2), w.dim(3));
    let k = cin * kh * kw;
    let p = ho * wo;
    let pointwise = is_pointwise(kh, kw, g);
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut db = need.2.then(|| vec![T::zero(); cout]);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = if pointwise || !need.0 { Vec::new() } else { vec![T::zero(); k * p] };
    for s in 0..n {
        let xs = &x.data()[s * cin * h * wi..(s + 1) * cin * h * wi];
        let dys = &dy.data()[s * cout * p..(s + 1) * cout * p];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dys.chunks(p).enumerate() {
                db[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let rhs: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, cin, h, wi, kh, kw, g, ho, wo, &mut cols);
                &cols
            };
            matmul(cout, p, k, dys, false, rhs, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * cin * h * wi..(s + 1) * cin * h * wi];
            if pointwise {
                matmul(k, cout, p, w.data(), true, dys, false, dxs, true);
            } else {
                matmul(k, cout, p, w.data(), true, dys, false, &mut dcols, false);
                col2im(&dcols, cin, h, wi, kh, kw, g, ho, wo, dxs);
            }
        }
    }
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::from_vec(x.shape(), d)),
        dw: dw.map(|d| Tensor::from_vec(w.shape(), d)),
        db: db.map(|d| Tensor::from_vec(&[cout], d)),
    })
}

fn check_linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<(usize, usize, usize)> {
    if x.shape().len() != 2 || w.shape().len() != 2 {
        return shape_err("linear", format!("x {:?}, w {:?} must be 2-D", x.shape(), w.shape()));
    }
    let (n, din) = (x.dim(0), x.dim(1));
    let (dout, wdin) = (w.dim(0), w.dim(1));
    if din != wdin {
        return shape_err("linear", format!("input width {din} vs weight {wdin}"));
    }
    if let Some(b) = b {
        if b.len() != dout {
            return shape_err("linear", format!("bias {:?} vs {dout}", b.shape()));
        }
    }
    Ok((n, din, dout))
}

/// `y[n,o] = b[o] + Σ_i w[o,i]·x[n,i]`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, din, dout) = check_linear(x, w, b)?;
    let mut y = vec![T::zero(); n * dout];
    if let Some(b) = b {
        for row in y.chunks_mut(dout) {
            row.copy_from_slice(b.data());
        }
    }
    matmul(n, din, dout, x.data(), false, w.data(), true, &mut y, b.is_some());
    Tensor::new(&[n, dout], y)
}

pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let (n, din, dout) = check_linear(x, w, None)?;
    if dy.shape() != [n, dout] {
        return shape_err("linear_backward", format!("dy {:?}", dy.shape()));
    }
    let dx = need.0.then(|| {
        let mut d = vec![T::zero(); n * din];
        matmul(n, dout, din, dy.data(), false, w.data(), false, &mut d, false);
        Tensor::from_vec(&[n, din], d)
    });
    let dw = need.1.then(|| {
        let mut d = vec![T::zero(); dout * din];
        matmul(dout, n, din, dy.data(), true, x.data(), false, &mut d, false);
        Tensor::from_vec(&[dout, din], d)
    });
    let db = need.2.then(|| {
        let mut d = vec![T::zero(); dout];
        for row in dy.data().chunks(dout) {
            for (a, &g) in d.iter_mut().zip(row) {
                *a += g;
            }
        }
        Tensor::from_vec(&[dout], d)
    });
    Ok(ConvGrads { dx, dw, db })
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_scalar<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn bin(i: usize, out: usize, inp: usize) -> (usize, usize) {
    let start = i * inp / out;
    let end = ((i + 1) * inp).div_ceil(out);
    (start, end)
}

fn check_pool<T: Element>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<()> {
    if x.shape().len() != 4 {
        return shape_err("adaptive_avg_pool", format!("{:?} must be 4-D", x.shape()));
    }
    let (_, _, h, w) = x.nchw();
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return shape_err("adaptive_avg_pool", format!("output {oh}x{ow} from input {h}x{w}"));
    }
    Ok(())
}

/// Bin `(i,j)` averages rows `[⌊iH/oh⌋, ⌈(i+1)H/oh⌉)` and likewise columns.
pub fn adaptive_avg_pool<T: Element>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    check_pool(x, oh, ow)?;
    let (n, c, h, w) = x.nchw();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for i in 0..oh {
            let (y0, y1) = bin(i, oh, h);
            for j in 0..ow {
                let (x0, x1) = bin(j, ow, w);
                let mut acc = T::zero();
                for y in y0..y1 {
                    for v in &plane[y * w + x0..y * w + x1] {
                        acc += *v;
                    }
                }
                out.push(acc / T::of(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn adaptive_avg_pool_backward<T: Element>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (dy.dim(2), dy.dim(3));
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, g) in dx.chunks_mut(h * w).zip(dy.data().chunks(oh * ow)) {
        for i in 0..oh {
            let (y0, y1) = bin(i, oh, h);
            for j in 0..ow {
                let (x0, x1) = bin(j, ow, w);
                let share = g[i * ow + j] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for v in &mut plane[y * w + x0..y * w + x1] {
                        *v += share;
                    }
                }
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}

/// Spatial mean per channel: `[N,C,H,W] → [N,C]`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 4 {
        return shape_err("global_avg_pool", format!("{:?} must be 4-D", x.shape()));
    }
    let (n, c, h, w) = x.nchw();
    let denom = T::of((h * w) as f64);
    let out = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() / denom)
        .collect();
    Tensor::new(&[n, c], out)
}

pub fn global_avg_pool_backward<T: Element>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let hw = x_shape[2] * x_shape[3];
    let denom = T::of(hw as f64);
    let mut dx = Vec::with_capacity(dy.len() * hw);
    for &g in dy.data() {
        dx.extend(std::iter::repeat(g / denom).take(hw));
    }
    Tensor::from_vec(x_shape, dx)
}

pub fn upsample_nearest2x<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 4 {
        return shape_err("upsample_nearest2x", format!("{:?} must be 4-D", x.shape()));
    }
    let (n, c, h, w) = x.nchw();
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[n, c, 2 * h, 2 * w], out)
}

pub fn upsample_nearest2x_backward<T: Element>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = dy.nchw();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (g, d) in dy.data().chunks(h2 * w2).zip(dx.chunks_mut(h * w)) {
        for y in 0..h2 {
            for x in 0..w2 {
                d[(y / 2) * w + x / 2] += g[y * w2 + x];
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], dx)
}

/// Stack along axis 1, for 2-D or 4-D inputs that agree on all other axes.
pub fn concat_channels<T: Element>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = match xs.first() {
        Some(f) => f,
        None => return shape_err("concat_channels", "empty input list"),
    };
    let rank = first.shape().len();
    if rank != 2 && rank != 4 {
        return shape_err("concat_channels", format!("rank {rank} unsupported"));
    }
    for x in xs {
        let s = x.shape();
        if s.len() != rank || s[0] != first.dim(0) || s[2..] != first.shape()[2..] {
            return shape_err("concat_channels", format!("{:?} vs {:?}", s, first.shape()));
        }
    }
    let (n, _, h, w) = first.nchw();
    let plane = h * w;
    let total: usize = xs.iter().map(|x| x.dim(1)).sum();
    let mut out = Vec::with_capacity(n * total * plane);
    for s in 0..n {
        for x in xs {
            let c = x.dim(1);
            out.extend_from_slice(&x.data()[s * c * plane..(s + 1) * c * plane]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = total;
    Tensor::new(&shape, out)
}

/// Split a gradient of a channel concatenation back into its parts.
pub fn split_channels<T: Element>(dy: &Tensor<T>, widths: &[usize]) -> Vec<Tensor<T>> {
    let (n, total, h, w) = dy.nchw();
    let plane = h * w;
    let mut parts: Vec<Vec<T>> = widths.iter().map(|c| Vec::with_capacity(n * c * plane)).collect();
    for s in 0..n {
        let mut off = 0;
        for (part, &c) in parts.iter_mut().zip(widths) {
            let base = (s * total + off) * plane;
            part.extend_from_slice(&dy.data()[base..base + c * plane]);
            off += c;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(d, &c)| {
            let mut shape = dy.shape().to_vec();
            shape[1] = c;
            Tensor::from_vec(&shape, d)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Mul,
}

pub fn elementwise<T: Element>(a: &Tensor<T>, b: &Tensor<T>, kind: Binary) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err("elementwise", format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match kind {
            Binary::Add => x + y,
            Binary::Mul => x * y,
        })
        .collect();
    Tensor::new(a.shape(), data)
}

/// Multiply every element of channel `c` in sample `n` by `s[n,c]`.
pub fn channel_scale<T: Element>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw();
    if s.shape() != [n, c] {
        return shape_err("channel_scale", format!("x {:?}, s {:?}", x.shape(), s.shape()));
    }
    let plane = h * w;
    let mut out = x.data().to_vec();
    for (chunk, &g) in out.chunks_mut(plane).zip(s.data()) {
        chunk.iter_mut().for_each(|v| *v *= g);
    }
    Tensor::new(x.shape(), out)
}

pub fn channel_scale_backward<T: Element>(
    x: &Tensor<T>,
    s: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (_, _, h, w) = x.nchw();
    let plane = h * w;
    let mut dx = dy.data().to_vec();
    let mut ds = vec![T::zero(); s.len()];
    for (i, (chunk, &g)) in dx.chunks_mut(plane).zip(s.data()).enumerate() {
        let xs = &x.data()[i * plane..(i + 1) * plane];
        let mut acc = T::zero();
        for (d, &xv) in chunk.iter_mut().zip(xs) {
            acc += *d * xv;
            *d *= g;
        }
        ds[i] = acc;
    }
    (
        Tensor::from_vec(x.shape(), dx),
        Tensor::from_vec(s.shape(), ds),
    )
}

/// `[N,C,H,W] → [N, C·H·W]`, row-major order preserved.
pub fn flatten<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.dim(0);
    x.clone().reshape(&[n, x.len() / n.max(1)])
}

/// Bilinear taps at `(y, x)` in cell units, cell `i` centred at `i` (the
/// half-pixel shift is applied by the caller). Points more than one cell
/// outside the map contribute zero; points within that margin are clamped
/// onto the border cells.
pub fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let mut taps = [(0usize, 0.0f64); 4];
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return taps;
    }
    let axis = |v: f64, n: usize| -> (usize, usize, f64) {
        let v = v.max(0.0);
        let lo = v.floor() as usize;
        if lo >= n - 1 {
            (n - 1, n - 1, 0.0)
        } else {
            (lo, lo + 1, v - lo as f64)
        }
    };
    let (y0, y1, ly) = axis(y, h);
    let (x0, x1, lx) = axis(x, w);
    taps[0] = (y0 * w + x0, (1.0 - ly) * (1.0 - lx));
    taps[1] = (y0 * w + x1, (1.0 - ly) * lx);
    taps[2] = (y1 * w + x0, ly * (1.0 - lx));
    taps[3] = (y1 * w + x1, ly * lx);
    taps
}

/// Sample points of a RoI: for each output bin, the flat taps of every
/// sample point and the weight each sample contributes to the bin mean.
#[derive(Clone, Debug)]
pub struct RoiPlan {
    pub out: usize,
    /// per bin (row-major), the list of `(flat index, weight)` contributions
    pub bins: Vec<Vec<(usize, f64)>>,
}

/// Build the bilinear sampling plan for a box given in feature-map units
/// (image coordinates divided by the stride). Cell centres sit at
/// integer + 0.5 in these units.
pub fn roi_plan(
    fx1: f64,
    fy1: f64,
    fx2: f64,
    fy2: f64,
    h: usize,
    w: usize,
    out: usize,
    sampling: usize,
) -> RoiPlan {
    let (x1, y1) = (fx1 - 0.5, fy1 - 0.5);
    let bw = (fx2 - fx1).max(0.0) / out as f64;
    let bh = (fy2 - fy1).max(0.0) / out as f64;
    let inv = 1.0 / (sampling * sampling) as f64;
    let mut bins = Vec::with_capacity(out * out);
    for by in 0..out {
        for bx in 0..out {
            let mut taps = Vec::with_capacity(4 * sampling * sampling);
            for sy in 0..sampling {
                let y = y1 + by as f64 * bh + (sy as f64 + 0.5) * bh / sampling as f64;
                for sx in 0..sampling {
                    let x = x1 + bx as f64 * bw + (sx as f64 + 0.5) * bw / sampling as f64;
                    for (idx, wt) in bilinear_taps(y, x, h, w) {
                        if wt != 0.0 {
                            taps.push((idx, wt * inv));
                        }
                    }
                }
            }
            bins.push(taps);
        }
    }
    RoiPlan { out, bins }
}

/// Apply a plan to every channel of one sample (`planes` is `[C,H,W]`),
/// writing `[C,out,out]` into `dst`.
pub fn roi_apply<T: Element>(plan: &RoiPlan, planes: &[T], hw: usize, dst: &mut [T]) {
    let nb = plan.out * plan.out;
    for (plane, o) in planes.chunks(hw).zip(dst.chunks_mut(nb)) {
        for (v, taps) in o.iter_mut().zip(&plan.bins) {
            let mut acc = T::zero();
            for &(i, wt) in taps {
                acc += plane[i] * T::of(wt);
            }
            *v = acc;
        }
    }
}

pub fn roi_apply_backward<T: Element>(plan: &RoiPlan, dy: &[T], hw: usize, dplanes: &mut [T]) {
    let nb = plan.out * plan.out;
    for (dp, g) in dplanes.chunks_mut(hw).zip(dy.chunks(nb)) {
        for (gv, taps) in g.iter().zip(&plan.bins) {
            for &(i, wt) in taps {
                dp[i] += *gv * T::of(wt);
            }
        }
    }
}

/// Numerically stable `softmax` over the last axis of a 2-D tensor.
pub fn softmax_rows<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let cols = *x.shape().last().unwrap_or(&1);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / z);
    }
    Tensor::from_vec(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_all_ones_stride2() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, Some(&b), ConvGeom { stride: 2, pad: 1 }).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 4, 4], (0..16).map(|v| v as f32).collect());
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d(&x, &w, None, ConvGeom { stride: 1, pad: 0 }).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_empty_output() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &w, None, ConvGeom { stride: 1, pad: 0 }).is_err());
        let x = Tensor::<f32>::zeros(&[1, 3, 2, 2]);
        assert!(conv2d(&x, &w, None, ConvGeom { stride: 1, pad: 0 }).is_err());
    }

    #[test]
    fn linear_small_cases() {
        let x = Tensor::<f64>::from_vec(&[1, 2], vec![1.0, 2.0]);
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::zeros(&[2]);
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[1.0, 2.0]);

        let x = Tensor::<f64>::from_vec(&[1, 2], vec![1.0, 1.0]);
        let w = Tensor::from_vec(&[1, 2], vec![2.0, 3.0]);
        let b = Tensor::from_vec(&[1], vec![5.0]);
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[10.0]);
        assert!(linear(&x, &Tensor::zeros(&[1, 3]), None).is_err());
    }

    #[test]
    fn activations() {
        let x = Tensor::<f64>::from_vec(&[3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(&Tensor::<f64>::zeros(&[1])).data(), &[0.5]);
        assert!(sigmoid_scalar(-800.0f64) > 0.0 || sigmoid_scalar(-800.0f64) == 0.0);
        assert!(sigmoid_scalar(40.0f32) <= 1.0);
    }

    #[test]
    fn adaptive_pool_block_means() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 4, 4], (1..=16).map(f64::from).collect());
        let y = adaptive_avg_pool(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[3.5, 5.5, 11.5, 13.5]);
        assert_eq!(adaptive_avg_pool(&x, 4, 4).unwrap(), x);
        assert!(adaptive_avg_pool(&x, 5, 4).is_err());
    }

    #[test]
    fn adaptive_pool_uneven_bins_overlap() {
        // 5 rows into 3 bins: [0,2), [1,4), [3,5)
        assert_eq!(bin(0, 3, 5), (0, 2));
        assert_eq!(bin(1, 3, 5), (1, 4));
        assert_eq!(bin(2, 3, 5), (3, 5));
    }

    #[test]
    fn global_pool_small_cases() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5, 0.0]);
    }

    #[test]
    fn upsample_replicates() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = upsample_nearest2x(&x).unwrap();
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn concat_shapes_and_errors() {
        let a = Tensor::<f32>::zeros(&[1, 256, 2, 2]);
        let b = Tensor::<f32>::ones(&[1, 256, 2, 2]);
        assert_eq!(concat_channels(&[&a, &b]).unwrap().shape(), &[1, 512, 2, 2]);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        assert!(concat_channels::<f32>(&[]).is_err());
        assert!(concat_channels(&[&a, &Tensor::zeros(&[1, 1, 3, 2])]).is_err());
    }

    #[test]
    fn elementwise_identities() {
        let x = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]);
        assert_eq!(elementwise(&x, &Tensor::zeros(&[2, 2]), Binary::Add).unwrap(), x);
        assert_eq!(elementwise(&x, &Tensor::ones(&[2, 2]), Binary::Mul).unwrap(), x);
        assert!(elementwise(&x, &Tensor::zeros(&[4]), Binary::Add).is_err());
    }

    #[test]
    fn channel_scale_cases() {
        let x = Tensor::<f32>::full(&[1, 3, 2, 2], 2.0);
        assert_eq!(channel_scale(&x, &Tensor::ones(&[1, 3])).unwrap(), x);
        let y = channel_scale(&x, &Tensor::full(&[1, 3], 0.5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));
        assert!(channel_scale(&x, &Tensor::ones(&[1, 2])).is_err());
    }

    #[test]
    fn flatten_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 256, 7, 7]);
        assert_eq!(flatten(&x).unwrap().shape(), &[1, 12544]);
        assert_eq!(flatten(&Tensor::<f32>::zeros(&[1, 1, 1, 1])).unwrap().shape(), &[1, 1]);
    }

    #[test]
    fn roi_whole_map_single_sample() {
        let plan = roi_plan(0.0, 0.0, 2.0, 2.0, 2, 2, 1, 1);
        let mut out = [0.0f64];
        roi_apply(&plan, &[1.0, 2.0, 3.0, 4.0], 4, &mut out);
        assert!((out[0] - 2.5).abs() < 1e-12);
    }
}
