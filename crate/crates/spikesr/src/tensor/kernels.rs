//! Raw tensor kernels: forward math and the adjoint pieces the graph's
//! backward closures are assembled from. Everything is deterministic: rayon
//! only ever parallelizes over disjoint output slices, each computed by a
//! sequential reduction, so results are bit-identical regardless of thread
//! count.

use rayon::prelude::*;

use super::{num, Real, Tensor};

/// Zero-padding amount or reflect-padding amount for conv-style ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero(usize),
    Reflect(usize),
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

/// NumPy-style broadcast of two shapes (right-aligned, 1s stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {:?} and {:?} are not broadcast-compatible",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides of `shape` right-aligned inside `out_shape`, 0 on stretched axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out_shape.len() - shape.len();
    let mut s = vec![0usize; out_shape.len()];
    for i in 0..out_shape.len() {
        if i >= off {
            let d = shape[i - off];
            s[i] = if d == 1 { 0 } else { own[i - off] };
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[inline]
fn bin_apply<T: Real>(kind: BinKind, a: T, b: T) -> T {
    match kind {
        BinKind::Add => a + b,
        BinKind::Sub => a - b,
        BinKind::Mul => a * b,
        BinKind::Div => a / b,
    }
}

/// Elementwise binary op with general broadcasting.
pub fn bin<T: Real>(kind: BinKind, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| bin_apply(kind, x, y))
            .collect();
        return Tensor::new(a.shape(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..n {
        data.push(bin_apply(kind, a.data()[ia], b.data()[ib]));
        // odometer increment
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
        }
    }
    Tensor::new(&out_shape, data)
}

/// Sum `t` down to `target` shape (inverse of broadcasting) for backward.
pub fn reduce_to<T: Real>(t: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if t.shape() == target {
        return t.clone();
    }
    let out_n: usize = target.iter().product();
    let st = broadcast_strides(target, t.shape());
    let rank = t.shape().len();
    let mut out = vec![T::zero(); out_n];
    let mut idx = vec![0usize; rank];
    let mut io = 0usize;
    for &v in t.data() {
        out[io] += v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            io += st[ax];
            if idx[ax] < t.shape()[ax] {
                break;
            }
            idx[ax] = 0;
            io -= st[ax] * t.shape()[ax];
        }
    }
    Tensor::new(target, out)
}

// ---------------------------------------------------------------------------
// Elementwise maps
// ---------------------------------------------------------------------------

pub fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// GELU, tanh approximation.
pub fn gelu<T: Real>(x: T) -> T {
    let c: T = num(0.7978845608028654); // sqrt(2/pi)
    let k: T = num(0.044715);
    let half: T = num(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_deriv<T: Real>(x: T) -> T {
    let c: T = num(0.7978845608028654);
    let k: T = num(0.044715);
    let half: T = num(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + num::<T>(3.0) * k * x * x)
}

/// Smooth spike surrogate: 1/2 + atan(pi*w*u/2)/pi. Its derivative is the
/// arctan surrogate w / (2(1+(pi*w*u/2)^2)).
pub fn spike_relaxed<T: Real>(u: T, width: T) -> T {
    let pi: T = num(std::f64::consts::PI);
    let half: T = num(0.5);
    half + (pi * width * u * half).atan() / pi
}

pub fn spike_surrogate_deriv<T: Real>(u: T, width: T) -> T {
    let pi: T = num(std::f64::consts::PI);
    let half: T = num(0.5);
    let z = pi * width * u * half;
    width / (num::<T>(2.0) * (T::one() + z * z))
}

// ---------------------------------------------------------------------------
// Matmul family
// ---------------------------------------------------------------------------

/// (M,K) x (K,N) -> (M,N), rows in parallel.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = a.d2();
    let (k2, n) = b.d2();
    assert_eq!(k, k2, "matmul inner dims differ: {:?} x {:?}", a.shape(), b.shape());
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for kk in 0..k {
            let av = ad[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[kk * n..kk * n + n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    Tensor::new(&[m, n], out)
}

/// Batched (G,M,K) x (G,K,N) -> (G,M,N).
pub fn bmm<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (g, m, k) = a.d3();
    let (g2, k2, n) = b.d3();
    assert_eq!(g, g2, "bmm batch dims differ: {:?} x {:?}", a.shape(), b.shape());
    assert_eq!(k, k2, "bmm inner dims differ: {:?} x {:?}", a.shape(), b.shape());
    let mut out = vec![T::zero(); g * m * n];
    let (ad, bd) = (a.data(), b.data());
    out.par_chunks_mut(m * n).enumerate().for_each(|(gi, chunk)| {
        let ab = &ad[gi * m * k..(gi + 1) * m * k];
        let bb = &bd[gi * k * n..(gi + 1) * k * n];
        for i in 0..m {
            for kk in 0..k {
                let av = ab[i * k + kk];
                if av == T::zero() {
                    continue;
                }
                let brow = &bb[kk * n..kk * n + n];
                let orow = &mut chunk[i * n..i * n + n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    });
    Tensor::new(&[g, m, n], out)
}

/// Swap the last two axes of a rank-2 or rank-3 tensor.
pub fn transpose_last2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    match x.rank() {
        2 => {
            let (m, n) = x.d2();
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = x.data()[i * n + j];
                }
            }
            Tensor::new(&[n, m], out)
        }
        3 => {
            let (g, m, n) = x.d3();
            let mut out = vec![T::zero(); g * m * n];
            for gi in 0..g {
                let base = gi * m * n;
                for i in 0..m {
                    for j in 0..n {
                        out[base + j * m + i] = x.data()[base + i * n + j];
                    }
                }
            }
            Tensor::new(&[g, n, m], out)
        }
        r => panic!("transpose_last2 expects rank 2 or 3, got rank {r} {:?}", x.shape()),
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

/// Sum over the given axes, keeping them as size-1 if `keepdims`.
pub fn sum_axes<T: Real>(x: &Tensor<T>, axes: &[usize], keepdims: bool) -> Tensor<T> {
    let rank = x.rank();
    for &a in axes {
        assert!(a < rank, "sum axis {a} out of range for shape {:?}", x.shape());
    }
    let mut keep_shape: Vec<usize> = x.shape().to_vec();
    for &a in axes {
        keep_shape[a] = 1;
    }
    let out = reduce_to(x, &keep_shape);
    if keepdims {
        out
    } else {
        let dropped: Vec<usize> = x
            .shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        out.reshaped(&dropped)
    }
}

// ---------------------------------------------------------------------------
// Softmax (last dim, numerically stabilized)
// ---------------------------------------------------------------------------

pub fn softmax_lastdim<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let last = *x.shape().last().expect("softmax on rank-0 tensor");
    assert!(last > 0, "softmax over empty axis, shape {:?}", x.shape());
    let mut out = vec![T::zero(); x.numel()];
    for (row, orow) in x.data().chunks(last).zip(out.chunks_mut(last)) {
        let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            s += e;
        }
        for o in orow.iter_mut() {
            *o = *o / s;
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn softmax_lastdim_vjp<T: Real>(y: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let last = *y.shape().last().unwrap();
    let mut dx = vec![T::zero(); y.numel()];
    for ((yr, dr), xr) in y
        .data()
        .chunks(last)
        .zip(dout.data().chunks(last))
        .zip(dx.chunks_mut(last))
    {
        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
        for ((x, &yv), &dv) in xr.iter_mut().zip(yr).zip(dr) {
            *x = yv * (dv - dot);
        }
    }
    Tensor::new(y.shape(), dx)
}

// ---------------------------------------------------------------------------
// Reflect padding
// ---------------------------------------------------------------------------

#[inline]
fn reflect_index(i: isize, n: usize) -> usize {
    // torch-style reflect (no edge repeat); requires pad <= n-1
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    debug_assert!(i >= 0 && i < n);
    i as usize
}

pub fn pad_reflect2d<T: Real>(x: &Tensor<T>, p: usize) -> Tensor<T> {
    let (b, c, h, w) = x.d4();
    assert!(p < h && p < w, "reflect pad {p} too large for {h}x{w}");
    let (oh, ow) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); b * c * oh * ow];
    for bc in 0..b * c {
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            let iy = reflect_index(oy as isize - p as isize, h);
            for ox in 0..ow {
                let ix = reflect_index(ox as isize - p as isize, w);
                dst[oy * ow + ox] = src[iy * w + ix];
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

pub fn pad_reflect2d_vjp<T: Real>(dout: &Tensor<T>, h: usize, w: usize, p: usize) -> Tensor<T> {
    let (b, c, oh, ow) = dout.d4();
    let mut dx = vec![T::zero(); b * c * h * w];
    for bc in 0..b * c {
        let src = &dout.data()[bc * oh * ow..(bc + 1) * oh * ow];
        let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            let iy = reflect_index(oy as isize - p as isize, h);
            for ox in 0..ow {
                let ix = reflect_index(ox as isize - p as isize, w);
                dst[iy * w + ix] += src[oy * ow + ox];
            }
        }
    }
    Tensor::new(&[b, c, h, w], dx)
}

// ---------------------------------------------------------------------------
// Convolution (NCHW, zero padding, grouped)
// ---------------------------------------------------------------------------

pub fn conv2d_out_hw(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv kernel {kh}x{kw} larger than padded input {h}x{w}+{pad}");
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

/// Cross-correlation of x (B,Ci,H,W) with w (Co,Ci/g,Kh,Kw), zero padding.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<T> {
    let (b, ci, h, wd) = x.d4();
    let (co, cig, kh, kw) = w.d4();
    assert!(stride >= 1, "conv stride must be >= 1");
    assert_eq!(
        ci,
        cig * groups,
        "conv channel mismatch: input has {ci} channels, kernel expects {} x {groups} groups",
        cig
    );
    assert_eq!(co % groups, 0, "output channels {co} not divisible by {groups} groups");
    if let Some(bt) = bias {
        assert_eq!(bt.numel(), co, "conv bias has {} entries for {co} output channels", bt.numel());
    }
    let (oh, ow) = conv2d_out_hw(h, wd, kh, kw, stride, pad);
    let cog = co / groups;
    let mut out = vec![T::zero(); b * co * oh * ow];
    let xd = x.data();
    let wdat = w.data();
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(bc, plane)| {
        let bi = bc / co;
        let c_out = bc % co;
        let g = c_out / cog;
        let bv = bias.map(|t| t.data()[c_out]).unwrap_or_else(T::zero);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bv;
                for cin in 0..cig {
                    let c_in = g * cig + cin;
                    let xplane = &xd[(bi * ci + c_in) * h * wd..(bi * ci + c_in + 1) * h * wd];
                    let wbase = ((c_out * cig + cin) * kh) * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += xplane[iy as usize * wd + ix as usize] * wdat[wbase + ky * kw + kx];
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    });
    Tensor::new(&[b, co, oh, ow], out)
}

/// Gradient w.r.t. the conv input (gather form, deterministic).
pub fn conv2d_vjp_x<T: Real>(
    dout: &Tensor<T>,
    w: &Tensor<T>,
    xshape: &[usize],
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<T> {
    let (b, ci, h, wd) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (co, cig, kh, kw) = w.d4();
    let (_, _, oh, ow) = dout.d4();
    let cog = co / groups;
    let mut dx = vec![T::zero(); b * ci * h * wd];
    let dd = dout.data();
    let wdat = w.data();
    dx.par_chunks_mut(h * wd).enumerate().for_each(|(bc, plane)| {
        let bi = bc / ci;
        let c_in = bc % ci;
        let g = c_in / cig;
        let cin = c_in % cig;
        for iy in 0..h {
            for ix in 0..wd {
                let mut acc = T::zero();
                for cg in 0..cog {
                    let c_out = g * cog + cg;
                    let dplane = &dd[(bi * co + c_out) * oh * ow..(bi * co + c_out + 1) * oh * ow];
                    let wbase = ((c_out * cig + cin) * kh) * kw;
                    for ky in 0..kh {
                        let oy_num = iy as isize + pad as isize - ky as isize;
                        if oy_num < 0 || oy_num % stride as isize != 0 {
                            continue;
                        }
                        let oy = (oy_num / stride as isize) as usize;
                        if oy >= oh {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox_num = ix as isize + pad as isize - kx as isize;
                            if ox_num < 0 || ox_num % stride as isize != 0 {
                                continue;
                            }
                            let ox = (ox_num / stride as isize) as usize;
                            if ox >= ow {
                                continue;
                            }
                            acc += dplane[oy * ow + ox] * wdat[wbase + ky * kw + kx];
                        }
                    }
                }
                plane[iy * wd + ix] += acc;
            }
        }
    });
    Tensor::new(xshape, dx)
}

/// Gradient w.r.t. the conv kernel.
pub fn conv2d_vjp_w<T: Real>(
    dout: &Tensor<T>,
    x: &Tensor<T>,
    wshape: &[usize],
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<T> {
    let (b, ci, h, wd) = x.d4();
    let (co, cig, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    let (_, _, oh, ow) = dout.d4();
    let cog = co / groups;
    let mut dw = vec![T::zero(); co * cig * kh * kw];
    let dd = dout.data();
    let xd = x.data();
    dw.par_chunks_mut(cig * kh * kw).enumerate().for_each(|(c_out, chunk)| {
        let g = c_out / cog;
        for cin in 0..cig {
            let c_in = g * cig + cin;
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = T::zero();
                    for bi in 0..b {
                        let dplane = &dd[(bi * co + c_out) * oh * ow..(bi * co + c_out + 1) * oh * ow];
                        let xplane = &xd[(bi * ci + c_in) * h * wd..(bi * ci + c_in + 1) * h * wd];
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += dplane[oy * ow + ox] * xplane[iy as usize * wd + ix as usize];
                            }
                        }
                    }
                    chunk[(cin * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });
    Tensor::new(wshape, dw)
}

pub fn conv2d_vjp_b<T: Real>(dout: &Tensor<T>) -> Tensor<T> {
    let (b, co, oh, ow) = dout.d4();
    let mut db = vec![T::zero(); co];
    for bi in 0..b {
        for c in 0..co {
            let plane = &dout.data()[(bi * co + c) * oh * ow..(bi * co + c + 1) * oh * ow];
            let mut s = T::zero();
            for &v in plane {
                s += v;
            }
            db[c] += s;
        }
    }
    Tensor::new(&[co], db)
}

// ---------------------------------------------------------------------------
// Average pooling (non-overlapping)
// ---------------------------------------------------------------------------

pub fn avg_pool2d<T: Real>(x: &Tensor<T>, kh: usize, kw: usize) -> Tensor<T> {
    let (b, c, h, w) = x.d4();
    assert!(kh > 0 && kw > 0, "empty pooling kernel");
    assert!(
        h % kh == 0 && w % kw == 0,
        "pool kernel {kh}x{kw} does not tile input {h}x{w}"
    );
    let (oh, ow) = (h / kh, w / kw);
    let inv: T = num(1.0 / (kh * kw) as f64);
    let mut out = vec![T::zero(); b * c * oh * ow];
    for bc in 0..b * c {
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for ky in 0..kh {
                    for kx in 0..kw {
                        s += src[(oy * kh + ky) * w + ox * kw + kx];
                    }
                }
                dst[oy * ow + ox] = s * inv;
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

pub fn avg_pool2d_vjp<T: Real>(dout: &Tensor<T>, kh: usize, kw: usize) -> Tensor<T> {
    let (b, c, oh, ow) = dout.d4();
    let (h, w) = (oh * kh, ow * kw);
    let inv: T = num(1.0 / (kh * kw) as f64);
    let mut dx = vec![T::zero(); b * c * h * w];
    for bc in 0..b * c {
        let src = &dout.data()[bc * oh * ow..(bc + 1) * oh * ow];
        let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * inv;
                for ky in 0..kh {
                    for kx in 0..kw {
                        dst[(oy * kh + ky) * w + ox * kw + kx] = g;
                    }
                }
            }
        }
    }
    Tensor::new(&[b, c, h, w], dx)
}

// ---------------------------------------------------------------------------
// Bilinear resize (align_corners = false, edge-clamped taps)
// ---------------------------------------------------------------------------

#[inline]
fn bilinear_src<T: Real>(o: usize, scale_in_over_out: T) -> (usize, usize, T) {
    // src = (o + 0.5) * (in/out) - 0.5, taps at floor and floor+1, clamped later
    let half: T = num(0.5);
    let s = (num::<T>(o as f64) + half) * scale_in_over_out - half;
    let s0 = s.floor();
    let f = s - s0;
    (s0.to_f64().unwrap() as isize as usize, 0, f) // placeholder; real clamp in caller
}

pub fn bilinear_resize<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (b, c, h, w) = x.d4();
    assert!(oh >= 1 && ow >= 1, "bilinear target {oh}x{ow} is degenerate");
    let ry: T = num(h as f64 / oh as f64);
    let rx: T = num(w as f64 / ow as f64);
    let mut out = vec![T::zero(); b * c * oh * ow];
    let clamp = |i: isize, n: usize| -> usize { i.clamp(0, n as isize - 1) as usize };
    for bc in 0..b * c {
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            let half: T = num(0.5);
            let sy = (num::<T>(oy as f64) + half) * ry - half;
            let y0 = sy.floor();
            let fy = sy - y0;
            let y0i = y0.to_f64().unwrap() as isize;
            let (ya, yb) = (clamp(y0i, h), clamp(y0i + 1, h));
            for ox in 0..ow {
                let sx = (num::<T>(ox as f64) + half) * rx - half;
                let x0 = sx.floor();
                let fx = sx - x0;
                let x0i = x0.to_f64().unwrap() as isize;
                let (xa, xb) = (clamp(x0i, w), clamp(x0i + 1, w));
                let one = T::one();
                let v = src[ya * w + xa] * (one - fy) * (one - fx)
                    + src[ya * w + xb] * (one - fy) * fx
                    + src[yb * w + xa] * fy * (one - fx)
                    + src[yb * w + xb] * fy * fx;
                dst[oy * ow + ox] = v;
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

pub fn bilinear_resize_vjp<T: Real>(dout: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (b, c, oh, ow) = dout.d4();
    let ry: T = num(h as f64 / oh as f64);
    let rx: T = num(w as f64 / ow as f64);
    let clamp = |i: isize, n: usize| -> usize { i.clamp(0, n as isize - 1) as usize };
    let mut dx = vec![T::zero(); b * c * h * w];
    for bc in 0..b * c {
        let src = &dout.data()[bc * oh * ow..(bc + 1) * oh * ow];
        let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            let half: T = num(0.5);
            let sy = (num::<T>(oy as f64) + half) * ry - half;
            let y0 = sy.floor();
            let fy = sy - y0;
            let y0i = y0.to_f64().unwrap() as isize;
            let (ya, yb) = (clamp(y0i, h), clamp(y0i + 1, h));
            for ox in 0..ow {
                let sx = (num::<T>(ox as f64) + half) * rx - half;
                let x0 = sx.floor();
                let fx = sx - x0;
                let x0i = x0.to_f64().unwrap() as isize;
                let (xa, xb) = (clamp(x0i, w), clamp(x0i + 1, w));
                let one = T::one();
                let g = src[oy * ow + ox];
                dst[ya * w + xa] += g * (one - fy) * (one - fx);
                dst[ya * w + xb] += g * (one - fy) * fx;
                dst[yb * w + xa] += g * fy * (one - fx);
                dst[yb * w + xb] += g * fy * fx;
            }
        }
    }
    Tensor::new(&[b, c, h, w], dx)
}

// ---------------------------------------------------------------------------
// Pixel shuffle
// ---------------------------------------------------------------------------

pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (b, c, h, w) = x.d4();
    assert!(r >= 1, "pixel_shuffle factor must be >= 1");
    assert_eq!(c % (r * r), 0, "pixel_shuffle: {c} channels not divisible by r^2 = {}", r * r);
    let co = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); b * co * oh * ow];
    for bi in 0..b {
        for c_out in 0..co {
            for y in 0..h {
                for i in 0..r {
                    for x_ in 0..w {
                        for j in 0..r {
                            let c_in = c_out * r * r + i * r + j;
                            out[((bi * co + c_out) * oh + y * r + i) * ow + x_ * r + j] =
                                x.data()[((bi * c + c_in) * h + y) * w + x_];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, co, oh, ow], out)
}

pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (b, c, h, w) = x.d4();
    assert!(h % r == 0 && w % r == 0, "pixel_unshuffle: {h}x{w} not divisible by {r}");
    let co = c * r * r;
    let (oh, ow) = (h / r, w / r);
    let mut out = vec![T::zero(); b * co * oh * ow];
    for bi in 0..b {
        for c_in in 0..c {
            for oy in 0..oh {
                for i in 0..r {
                    for ox in 0..ow {
                        for j in 0..r {
                            let c_out = c_in * r * r + i * r + j;
                            out[((bi * co + c_out) * oh + oy) * ow + ox] =
                                x.data()[((bi * c + c_in) * h + oy * r + i) * w + ox * r + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, co, oh, ow], out)
}

// ---------------------------------------------------------------------------
// Patch extraction (grid of g x g patches -> rows)
// ---------------------------------------------------------------------------

/// (B,C,H,W) -> (B, g*g, C*ph*pw) with ph = H/g, pw = W/g.
pub fn extract_patches<T: Real>(x: &Tensor<T>, g: usize) -> Tensor<T> {
    let (b, c, h, w) = x.d4();
    assert!(g >= 1 && h % g == 0 && w % g == 0, "patch grid {g}x{g} does not tile {h}x{w}");
    let (ph, pw) = (h / g, w / g);
    let pd = c * ph * pw;
    let mut out = vec![T::zero(); b * g * g * pd];
    for bi in 0..b {
        for gi in 0..g * g {
            let (gy, gx) = (gi / g, gi % g);
            let dst = &mut out[(bi * g * g + gi) * pd..(bi * g * g + gi + 1) * pd];
            for ci in 0..c {
                for py in 0..ph {
                    for px in 0..pw {
                        dst[(ci * ph + py) * pw + px] =
                            x.data()[((bi * c + ci) * h + gy * ph + py) * w + gx * pw + px];
                    }
                }
            }
        }
    }
    Tensor::new(&[b, g * g, pd], out)
}

/// Inverse of [`extract_patches`].
pub fn place_patches<T: Real>(p: &Tensor<T>, g: usize, c: usize, h: usize, w: usize) -> Tensor<T> {
    let (b, np, pd) = p.d3();
    let (ph, pw) = (h / g, w / g);
    assert_eq!(np, g * g, "patch count {np} != {}", g * g);
    assert_eq!(pd, c * ph * pw, "patch dim {pd} != {}", c * ph * pw);
    let mut out = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for gi in 0..np {
            let (gy, gx) = (gi / g, gi % g);
            let src = &p.data()[(bi * np + gi) * pd..(bi * np + gi + 1) * pd];
            for ci in 0..c {
                for py in 0..ph {
                    for px in 0..pw {
                        out[((bi * c + ci) * h + gy * ph + py) * w + gx * pw + px] =
                            src[(ci * ph + py) * pw + px];
                    }
                }
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

// ---------------------------------------------------------------------------
// Spatial crop / merge (windowed attention plumbing)
// ---------------------------------------------------------------------------

pub fn crop2d<T: Real>(x: &Tensor<T>, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor<T> {
    let (b, c, h, w) = x.d4();
    assert!(y0 + ch <= h && x0 + cw <= w, "crop [{y0}+{ch}, {x0}+{cw}] exceeds {h}x{w}");
    let mut out = vec![T::zero(); b * c * ch * cw];
    for bc in 0..b * c {
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * ch * cw..(bc + 1) * ch * cw];
        for y in 0..ch {
            let srow = &src[(y0 + y) * w + x0..(y0 + y) * w + x0 + cw];
            dst[y * cw..(y + 1) * cw].copy_from_slice(srow);
        }
    }
    Tensor::new(&[b, c, ch, cw], out)
}

/// Scatter a cropped gradient back into a zero tensor of the original size.
pub fn uncrop2d<T: Real>(d: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<T> {
    let (b, c, ch, cw) = d.d4();
    let mut out = vec![T::zero(); b * c * h * w];
    for bc in 0..b * c {
        let src = &d.data()[bc * ch * cw..(bc + 1) * ch * cw];
        let dst = &mut out[bc * h * w..(bc + 1) * h * w];
        for y in 0..ch {
            dst[(y0 + y) * w + x0..(y0 + y) * w + x0 + cw].copy_from_slice(&src[y * cw..(y + 1) * cw]);
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

// ---------------------------------------------------------------------------
// Deformable depthwise 3x3 convolution
// ---------------------------------------------------------------------------

pub const DEFORM_TAPS: usize = 9;

#[inline]
fn deform_grid(m: usize) -> (isize, isize) {
    ((m / 3) as isize - 1, (m % 3) as isize - 1)
}

/// Bilinear sample with zero outside bounds. Returns value.
#[inline]
fn sample_zero<T: Real>(plane: &[T], h: usize, w: usize, sy: T, sx: T) -> T {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = sy - y0;
    let fx = sx - x0;
    let y0 = y0.to_f64().unwrap() as isize;
    let x0 = x0.to_f64().unwrap() as isize;
    let at = |y: isize, x: isize| -> T {
        if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
            T::zero()
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let one = T::one();
    at(y0, x0) * (one - fy) * (one - fx)
        + at(y0, x0 + 1) * (one - fy) * fx
        + at(y0 + 1, x0) * fy * (one - fx)
        + at(y0 + 1, x0 + 1) * fy * fx
}

/// Depthwise deformable 3x3 conv. `x`: (B,C,H,W), `off`: (B,18,H,W) laid out
/// as (dy_0, dx_0, dy_1, dx_1, ...), `w`: (C,9), `bias`: (C). Offsets are
/// shared across channels; sampling is bilinear with zeros outside bounds.
pub fn deform_dwconv<T: Real>(
    x: &Tensor<T>,
    off: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
) -> Tensor<T> {
    let (b, c, h, wd) = x.d4();
    let (b2, oc, oh, ow2) = off.d4();
    assert_eq!(b, b2, "deform offset batch mismatch");
    assert_eq!(oc, 2 * DEFORM_TAPS, "deform offsets need {} channels, got {oc}", 2 * DEFORM_TAPS);
    assert!(oh == h && ow2 == wd, "deform offset plane {oh}x{ow2} != {h}x{wd}");
    assert_eq!(w.shape(), &[c, DEFORM_TAPS], "deform weights must be (C,9)");
    assert_eq!(bias.numel(), c, "deform bias size mismatch");
    let mut out = vec![T::zero(); b * c * h * wd];
    let xd = x.data();
    let od = off.data();
    let wdat = w.data();
    out.par_chunks_mut(h * wd).enumerate().for_each(|(bc, plane)| {
        let bi = bc / c;
        let ci = bc % c;
        let xplane = &xd[bc * h * wd..(bc + 1) * h * wd];
        let obase = bi * 2 * DEFORM_TAPS * h * wd;
        let bv = bias.data()[ci];
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = bv;
                for m in 0..DEFORM_TAPS {
                    let (gy, gx) = deform_grid(m);
                    let dy = od[obase + (2 * m) * h * wd + y * wd + xx];
                    let dx = od[obase + (2 * m + 1) * h * wd + y * wd + xx];
                    let sy = num::<T>((y as isize + gy) as f64) + dy;
                    let sx = num::<T>((xx as isize + gx) as f64) + dx;
                    acc += wdat[ci * DEFORM_TAPS + m] * sample_zero(xplane, h, wd, sy, sx);
                }
                plane[y * wd + xx] = acc;
            }
        }
    });
    Tensor::new(&[b, c, h, wd], out)
}

/// All four gradients of [`deform_dwconv`] in one pass.
pub fn deform_dwconv_vjp<T: Real>(
    dout: &Tensor<T>,
    x: &Tensor<T>,
    off: &Tensor<T>,
    w: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, c, h, wd) = x.d4();
    let xd = x.data();
    let od = off.data();
    let wdat = w.data();
    let dd = dout.data();
    let mut dx = vec![T::zero(); b * c * h * wd];
    let mut dw = vec![T::zero(); c * DEFORM_TAPS];
    let mut db = vec![T::zero(); c];
    let mut doff = vec![T::zero(); b * 2 * DEFORM_TAPS * h * wd];
    let one = T::one();
    for bi in 0..b {
        let obase = bi * 2 * DEFORM_TAPS * h * wd;
        for ci in 0..c {
            let bc = bi * c + ci;
            let xplane = &xd[bc * h * wd..(bc + 1) * h * wd];
            let dplane = &dd[bc * h * wd..(bc + 1) * h * wd];
            let dxplane = &mut dx[bc * h * wd..(bc + 1) * h * wd];
            for y in 0..h {
                for xx in 0..wd {
                    let g = dplane[y * wd + xx];
                    if g == T::zero() {
                        continue;
                    }
                    db[ci] += g;
                    for m in 0..DEFORM_TAPS {
                        let (gy, gx) = deform_grid(m);
                        let dy = od[obase + (2 * m) * h * wd + y * wd + xx];
                        let dxo = od[obase + (2 * m + 1) * h * wd + y * wd + xx];
                        let sy = num::<T>((y as isize + gy) as f64) + dy;
                        let sx = num::<T>((xx as isize + gx) as f64) + dxo;
                        let y0f = sy.floor();
                        let x0f = sx.floor();
                        let fy = sy - y0f;
                        let fx = sx - x0f;
                        let y0 = y0f.to_f64().unwrap() as isize;
                        let x0 = x0f.to_f64().unwrap() as isize;
                        let wv = wdat[ci * DEFORM_TAPS + m];
                        let mut val = T::zero();
                        let mut d_sy = T::zero();
                        let mut d_sx = T::zero();
                        // four taps; weights and their derivatives w.r.t. (sy,sx)
                        let taps = [
                            (y0, x0, (one - fy) * (one - fx), -(one - fx), -(one - fy)),
                            (y0, x0 + 1, (one - fy) * fx, -fx, one - fy),
                            (y0 + 1, x0, fy * (one - fx), one - fx, -fy),
                            (y0 + 1, x0 + 1, fy * fx, fx, fy),
                        ];
                        for (ty, tx, tw, dwy, dwx) in taps {
                            if ty < 0 || ty >= h as isize || tx < 0 || tx >= wd as isize {
                                continue;
                            }
                            let xi = ty as usize * wd + tx as usize;
                            let xv = xplane[xi];
                            val += tw * xv;
                            d_sy += dwy * xv;
                            d_sx += dwx * xv;
                            dxplane[xi] += g * wv * tw;
                        }
                        dw[ci * DEFORM_TAPS + m] += g * val;
                        doff[obase + (2 * m) * h * wd + y * wd + xx] += g * wv * d_sy;
                        doff[obase + (2 * m + 1) * h * wd + y * wd + xx] += g * wv * d_sx;
                    }
                }
            }
        }
    }
    (
        Tensor::new(&[b, c, h, wd], dx),
        Tensor::new(&[b, 2 * DEFORM_TAPS, h, wd], doff),
        Tensor::new(&[c, DEFORM_TAPS], dw),
        Tensor::new(&[c], db),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 1]), vec![2, 4, 3]);
        assert_eq!(broadcast_shape(&[5], &[3, 5]), vec![3, 5]);
    }

    #[test]
    #[should_panic(expected = "not broadcast-compatible")]
    fn broadcast_rejects_mismatch() {
        broadcast_shape(&[2, 3], &[4, 3]);
    }

    #[test]
    fn reduce_to_inverts_broadcast() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let r = reduce_to(&t, &[1, 3]);
        assert_eq!(r.data(), &[3.0, 5.0, 7.0]);
        let r2 = reduce_to(&t, &[2, 1]);
        assert_eq!(r2.data(), &[3.0, 12.0]);
    }

    #[test]
    fn matmul_identity() {
        let i3 = Tensor::<f64>::from_fn(&[3, 3], |k| if k / 3 == k % 3 { 1.0 } else { 0.0 });
        let a = Tensor::<f64>::from_fn(&[3, 3], |k| (k as f64) * 0.7 - 1.0);
        assert_eq!(matmul(&i3, &a), a);
    }

    #[test]
    fn pixel_shuffle_2x2_block() {
        // (1,4,1,1) [a,b,c,d] with r=2 -> [[a,b],[c,d]]
        let x = Tensor::<f64>::new(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle(&x, 2);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_roundtrip_bit_exact() {
        let x = Tensor::<f64>::from_fn(&[2, 8, 3, 5], |i| (i as f64).sin());
        let y = pixel_unshuffle(&pixel_shuffle(&x, 2), 2);
        assert_eq!(x, y);
    }

    #[test]
    fn patches_roundtrip() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |i| i as f64);
        let p = extract_patches(&x, 2);
        assert_eq!(p.shape(), &[2, 4, 3 * 2 * 2]);
        let back = place_patches(&p, 2, 3, 4, 4);
        assert_eq!(x, back);
    }

    #[test]
    fn reflect_pad_constant_preserved() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 2.5);
        let p = pad_reflect2d(&x, 1);
        assert!(p.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn bilinear_identity_at_scale_1() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 5, 7], |i| (i as f64) * 0.3);
        let y = bilinear_resize(&x, 5, 7);
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_pool_mean() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]);
        let y = avg_pool2d(&x, 2, 2);
        assert_eq!(y.data(), &[4.0]);
    }
}
