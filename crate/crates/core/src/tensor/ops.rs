//! Differentiable primitives. Each public method on [`Graph`] computes its
//! forward value eagerly and records an [`Op`] whose `backward` applies the
//! vector-Jacobian product.

use std::ops::Range;

use super::graph::GradAcc;
use super::kernels::{col2im, im2col, matmul, softmax_rows, ConvGeom};
use super::{Float, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) enum Op<T> {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Sum { a: Var },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Matmul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu { a: Var },
    Sigmoid { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize },
    Gather { a: Var, rows: Vec<usize> },
    SliceLast { a: Var, start: usize },
    Attention { q: Var, k: Var, v: Var, probs: Vec<T>, scale: T },
    StraightThrough { z: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: Vec<bool>, probs: Vec<T>, denom: T },
    MaskedMse { pred: Var, target: Vec<T>, valid: Vec<bool>, denom: T },
    BceLogits { logits: Var, target: Vec<T>, valid: Vec<bool>, denom: T },
}

impl<T: Float> Op<T> {
    pub fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add { a, b } | Sub { a, b } | Mul { a, b } | Matmul { a, b } => vec![*a, *b],
            Scale { a, .. }
            | Sum { a }
            | Reshape { a }
            | Permute { a, .. }
            | Relu { a }
            | Sigmoid { a }
            | Softmax { a, .. }
            | Gather { a, .. }
            | SliceLast { a, .. } => vec![*a],
            Linear { x, w, b } | Conv2d { x, w, b, .. } | ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            LayerNorm { x, gamma, beta, .. } | GroupNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            StraightThrough { z } => vec![*z],
            CrossEntropy { logits, .. } | BceLogits { logits, .. } => vec![*logits],
            MaskedMse { pred, .. } => vec![*pred],
        }
    }

    pub fn backward(&self, g: &Graph<T>, out: &Tensor<T>, gout: &[T], acc: &mut GradAcc<T>) {
        use Op::*;
        match self {
            Leaf => {}
            Add { a, b } => {
                let n = gout.len();
                if let Some(ga) = acc.slot(*a, n) {
                    add_into(ga, gout);
                }
                let nb = g.value(*b).numel();
                if let Some(gb) = acc.slot(*b, nb) {
                    for chunk in gout.chunks(nb) {
                        add_into(gb, chunk);
                    }
                }
            }
            Sub { a, b } => {
                let n = gout.len();
                if let Some(ga) = acc.slot(*a, n) {
                    add_into(ga, gout);
                }
                if let Some(gb) = acc.slot(*b, n) {
                    gb.iter_mut().zip(gout).for_each(|(x, &y)| *x -= y);
                }
            }
            Mul { a, b } => {
                let av = g.value(*a).data();
                let bv = g.value(*b).data();
                let nb = bv.len();
                if let Some(ga) = acc.slot(*a, av.len()) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += gout[i] * bv[i % nb];
                    }
                }
                if let Some(gb) = acc.slot(*b, nb) {
                    for (i, (&go, &a)) in gout.iter().zip(av).enumerate() {
                        gb[i % nb] += go * a;
                    }
                }
            }
            Scale { a, c } => {
                if let Some(ga) = acc.slot(*a, gout.len()) {
                    ga.iter_mut().zip(gout).for_each(|(x, &y)| *x += y * *c);
                }
            }
            Sum { a } => {
                let n = g.value(*a).numel();
                if let Some(ga) = acc.slot(*a, n) {
                    ga.iter_mut().for_each(|x| *x += gout[0]);
                }
            }
            Reshape { a } | StraightThrough { z: a } => {
                if let Some(ga) = acc.slot(*a, gout.len()) {
                    add_into(ga, gout);
                }
            }
            Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(gout, out.shape(), &inv);
                if let Some(ga) = acc.slot(*a, back.len()) {
                    add_into(ga, &back);
                }
            }
            Matmul { a, b } => {
                let (m, k) = (g.shape(*a)[0], g.shape(*a)[1]);
                let n = g.shape(*b)[1];
                if acc.wants(*a) {
                    let bv = g.value(*b).data();
                    let ga = acc.slot(*a, m * k).unwrap();
                    matmul(m, n, k, gout, false, bv, true, ga, true);
                }
                if acc.wants(*b) {
                    let av = g.value(*a).data();
                    let gb = acc.slot(*b, k * n).unwrap();
                    matmul(k, m, n, av, true, gout, false, gb, true);
                }
            }
            Linear { x, w, b } => {
                let (fin, fout) = (g.shape(*w)[0], g.shape(*w)[1]);
                let rows = gout.len() / fout;
                if acc.wants(*x) {
                    let wv = g.value(*w).data();
                    let gx = acc.slot(*x, rows * fin).unwrap();
                    matmul(rows, fout, fin, gout, false, wv, true, gx, true);
                }
                if acc.wants(*w) {
                    let xv = g.value(*x).data();
                    let gw = acc.slot(*w, fin * fout).unwrap();
                    matmul(fin, rows, fout, xv, true, gout, false, gw, true);
                }
                if let Some(b) = b {
                    if let Some(gb) = acc.slot(*b, fout) {
                        for row in gout.chunks(fout) {
                            add_into(gb, row);
                        }
                    }
                }
            }
            Relu { a } => {
                let av = g.value(*a).data();
                if let Some(ga) = acc.slot(*a, av.len()) {
                    for i in 0..av.len() {
                        if av[i] > T::zero() {
                            ga[i] += gout[i];
                        }
                    }
                }
            }
            Sigmoid { a } => {
                let y = out.data();
                if let Some(ga) = acc.slot(*a, y.len()) {
                    for i in 0..y.len() {
                        ga[i] += gout[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                if let Some(ga) = acc.slot(*a, y.len()) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot += gout[idx] * y[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                ga[idx] += y[idx] * (gout[idx] - dot);
                            }
                        }
                    }
                }
            }
            LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = g.value(*gamma).numel();
                let gam = g.value(*gamma).data();
                if let Some(gg) = acc.slot(*gamma, d) {
                    for (go, xh) in gout.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += go[j] * xh[j];
                        }
                    }
                }
                if let Some(gb) = acc.slot(*beta, d) {
                    for go in gout.chunks(d) {
                        add_into(gb, go);
                    }
                }
                if let Some(gx) = acc.slot(*x, gout.len()) {
                    let inv_d = T::one() / T::from_usize(d);
                    for (r, ((go, xh), gxr)) in gout
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = go[j] * gam[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dxh = go[j] * gam[j];
                            gxr[j] += rstd[r] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let shape = out.shape();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let cg = c / groups;
                let gam = g.value(*gamma).data();
                if let Some(gg) = acc.slot(*gamma, c) {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * s;
                            let mut acc_v = T::zero();
                            for i in 0..s {
                                acc_v += gout[off + i] * xhat[off + i];
                            }
                            gg[ch] += acc_v;
                        }
                    }
                }
                if let Some(gb) = acc.slot(*beta, c) {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * s;
                            gb[ch] += gout[off..off + s].iter().copied().sum::<T>();
                        }
                    }
                }
                if let Some(gx) = acc.slot(*x, gout.len()) {
                    let cnt = T::from_usize(cg * s);
                    for b in 0..n {
                        for gi in 0..*groups {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for ch in gi * cg..(gi + 1) * cg {
                                let off = (b * c + ch) * s;
                                for i in 0..s {
                                    let dxh = gout[off + i] * gam[ch];
                                    m1 += dxh;
                                    m2 += dxh * xhat[off + i];
                                }
                            }
                            m1 = m1 / cnt;
                            m2 = m2 / cnt;
                            let r = rstd[b * groups + gi];
                            for ch in gi * cg..(gi + 1) * cg {
                                let off = (b * c + ch) * s;
                                for i in 0..s {
                                    let dxh = gout[off + i] * gam[ch];
                                    gx[off + i] += r * (dxh - m1 - xhat[off + i] * m2);
                                }
                            }
                        }
                    }
                }
            }
            Conv2d { x, w, b, stride, padding } => {
                conv2d_backward(g, out, gout, acc, *x, *w, *b, *stride, *padding)
            }
            ConvTranspose2d { x, w, b, stride, padding } => {
                conv_transpose2d_backward(g, out, gout, acc, *x, *w, *b, *stride, *padding)
            }
            Gather { a, rows } => {
                let av = g.value(*a);
                let w = av.numel() / av.shape()[0];
                if let Some(ga) = acc.slot(*a, av.numel()) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * w..(r + 1) * w], &gout[i * w..(i + 1) * w]);
                    }
                }
            }
            SliceLast { a, start } => {
                let av = g.value(*a);
                let full = *av.shape().last().unwrap();
                let len = *out.shape().last().unwrap();
                if let Some(ga) = acc.slot(*a, av.numel()) {
                    for (r, go) in gout.chunks(len).enumerate() {
                        add_into(&mut ga[r * full + start..r * full + start + len], go);
                    }
                }
            }
            Attention { q, k, v, probs, scale } => {
                attention_backward(g, gout, acc, *q, *k, *v, probs, *scale)
            }
            CrossEntropy { logits, targets, ignore, probs, denom } => {
                let kk = *g.shape(*logits).last().unwrap();
                if let Some(gl) = acc.slot(*logits, probs.len()) {
                    let s = gout[0] / *denom;
                    for (i, (&t, &ig)) in targets.iter().zip(ignore).enumerate() {
                        if ig {
                            continue;
                        }
                        let row = &mut gl[i * kk..(i + 1) * kk];
                        for (j, r) in row.iter_mut().enumerate() {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *r += s * (probs[i * kk + j] - onehot);
                        }
                    }
                }
            }
            MaskedMse { pred, target, valid, denom } => {
                let p = g.value(*pred).data();
                if let Some(gp) = acc.slot(*pred, p.len()) {
                    let s = gout[0] * T::of_f64(2.0) / *denom;
                    for i in 0..p.len() {
                        if valid[i] {
                            gp[i] += s * (p[i] - target[i]);
                        }
                    }
                }
            }
            BceLogits { logits, target, valid, denom } => {
                let x = g.value(*logits).data();
                if let Some(gx) = acc.slot(*logits, x.len()) {
                    let s = gout[0] / *denom;
                    for i in 0..x.len() {
                        if valid[i] {
                            let sig = T::one() / (T::one() + (-x[i]).exp());
                            gx[i] += s * (sig - target[i]);
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Float>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn conv_out(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Float>(
    g: &Graph<T>,
    out: &Tensor<T>,
    gout: &[T],
    acc: &mut GradAcc<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    padding: usize,
) {
    let xs = g.shape(x);
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let ws = g.shape(w);
    let (o, k) = (ws[0], ws[2]);
    let os = out.shape();
    let geom = ConvGeom {
        channels: c,
        in_h: h,
        in_w: wd,
        out_h: os[2],
        out_w: os[3],
        kernel: k,
        stride,
        padding,
    };
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let xv = g.value(x).data();
    let wv = g.value(w).data();
    let want_x = acc.wants(x);
    let want_w = acc.wants(w);
    let mut colbuf = vec![T::zero(); rows * cols];
    let mut dw = vec![T::zero(); if want_w { o * rows } else { 0 }];
    for s in 0..n {
        let go = &gout[s * o * cols..(s + 1) * o * cols];
        if want_w {
            im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], &geom, &mut colbuf);
            matmul(o, cols, rows, go, false, &colbuf, true, &mut dw, true);
        }
        if want_x {
            matmul(rows, o, cols, wv, true, go, false, &mut colbuf, false);
            let gx = acc.slot(x, n * c * h * wd).unwrap();
            col2im(&colbuf, &geom, &mut gx[s * c * h * wd..(s + 1) * c * h * wd]);
        }
    }
    if want_w {
        add_into(acc.slot(w, o * rows).unwrap(), &dw);
    }
    if let Some(b) = b {
        if let Some(gb) = acc.slot(b, o) {
            for s in 0..n {
                for ch in 0..o {
                    let off = (s * o + ch) * cols;
                    gb[ch] += gout[off..off + cols].iter().copied().sum::<T>();
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_transpose2d_backward<T: Float>(
    g: &Graph<T>,
    out: &Tensor<T>,
    gout: &[T],
    acc: &mut GradAcc<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    padding: usize,
) {
    let xs = g.shape(x);
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let ws = g.shape(w);
    let (o, k) = (ws[1], ws[2]);
    let os = out.shape();
    let (oh, ow) = (os[2], os[3]);
    // The output plays the role of the "image" and the input of the column grid.
    let geom = ConvGeom {
        channels: o,
        in_h: oh,
        in_w: ow,
        out_h: h,
        out_w: wd,
        kernel: k,
        stride,
        padding,
    };
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let xv = g.value(x).data();
    let wv = g.value(w).data();
    let want_x = acc.wants(x);
    let want_w = acc.wants(w);
    let mut colbuf = vec![T::zero(); rows * cols];
    let mut dw = vec![T::zero(); if want_w { c * rows } else { 0 }];
    for s in 0..n {
        if !(want_x || want_w) {
            break;
        }
        im2col(&gout[s * o * oh * ow..(s + 1) * o * oh * ow], &geom, &mut colbuf);
        if want_x {
            let gx = acc.slot(x, n * c * cols).unwrap();
            matmul(c, rows, cols, wv, false, &colbuf, false, &mut gx[s * c * cols..(s + 1) * c * cols], true);
        }
        if want_w {
            matmul(c, cols, rows, &xv[s * c * cols..(s + 1) * c * cols], false, &colbuf, true, &mut dw, true);
        }
    }
    if want_w {
        add_into(acc.slot(w, c * rows).unwrap(), &dw);
    }
    if let Some(b) = b {
        if let Some(gb) = acc.slot(b, o) {
            let plane = oh * ow;
            for s in 0..n {
                for ch in 0..o {
                    let off = (s * o + ch) * plane;
                    gb[ch] += gout[off..off + plane].iter().copied().sum::<T>();
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Float>(
    g: &Graph<T>,
    gout: &[T],
    acc: &mut GradAcc<T>,
    q: Var,
    k: Var,
    v: Var,
    probs: &[T],
    scale: T,
) {
    let qs = g.shape(q);
    let nd = qs.len();
    let (tq, d) = (qs[nd - 2], qs[nd - 1]);
    let tk = g.shape(k)[nd - 2];
    let dv = g.shape(v)[nd - 1];
    let heads = g.value(q).numel() / (tq * d);
    let qv = g.value(q).data();
    let kv = g.value(k).data();
    let vv = g.value(v).data();
    let mut dp = vec![T::zero(); tq * tk];
    let mut ds = vec![T::zero(); tq * tk];
    let (wq, wk, wv) = (acc.wants(q), acc.wants(k), acc.wants(v));
    for h in 0..heads {
        let p = &probs[h * tq * tk..(h + 1) * tq * tk];
        let go = &gout[h * tq * dv..(h + 1) * tq * dv];
        let qh = &qv[h * tq * d..(h + 1) * tq * d];
        let kh = &kv[h * tk * d..(h + 1) * tk * d];
        let vh = &vv[h * tk * dv..(h + 1) * tk * dv];
        if wv {
            let gvs = acc.slot(v, vv.len()).unwrap();
            matmul(tk, tq, dv, p, true, go, false, &mut gvs[h * tk * dv..(h + 1) * tk * dv], true);
        }
        if !(wq || wk) {
            continue;
        }
        matmul(tq, dv, tk, go, false, vh, true, &mut dp, false);
        for i in 0..tq {
            let row = i * tk..(i + 1) * tk;
            let dot: T = p[row.clone()].iter().zip(&dp[row.clone()]).map(|(&a, &b)| a * b).sum();
            for j in row {
                ds[j] = p[j] * (dp[j] - dot) * scale;
            }
        }
        if wq {
            let gqs = acc.slot(q, qv.len()).unwrap();
            matmul(tq, tk, d, &ds, false, kh, false, &mut gqs[h * tq * d..(h + 1) * tq * d], true);
        }
        if wk {
            let gks = acc.slot(k, kv.len()).unwrap();
            matmul(tk, tq, d, &ds, true, qh, false, &mut gks[h * tk * d..(h + 1) * tk * d], true);
        }
    }
}

/// Attention weights `softmax(q k^T * scale)` for `q [.., Tq, d]`,
/// `k [.., Tk, d]`, laid out as `[heads, Tq, Tk]`. With `causal`, query `i`
/// only sees keys `j <= i`.
pub fn attention_probs<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    causal: bool,
) -> Result<(Vec<T>, T)> {
    let qs = q.shape();
    let ks = k.shape();
    let nd = qs.len();
    if nd < 2 || ks.len() != nd || qs[..nd - 2] != ks[..nd - 2] || qs[nd - 1] != ks[nd - 1] {
        return Err(Error::shape("attention", format!("q {qs:?} vs k {ks:?}")));
    }
    let (tq, d, tk) = (qs[nd - 2], qs[nd - 1], ks[nd - 2]);
    if causal && tq != tk {
        return Err(Error::shape(
            "attention",
            format!("causal mask needs square scores, got {tq}x{tk}"),
        ));
    }
    let heads = q.numel() / (tq * d).max(1);
    let scale = T::one() / T::from_usize(d).sqrt();
    let mut probs = vec![T::zero(); heads * tq * tk];
    for h in 0..heads {
        let s = &mut probs[h * tq * tk..(h + 1) * tq * tk];
        matmul(
            tq,
            d,
            tk,
            &q.data()[h * tq * d..],
            false,
            &k.data()[h * tk * d..],
            true,
            s,
            false,
        );
        for i in 0..tq {
            for j in 0..tk {
                let idx = i * tk + j;
                s[idx] = if causal && j > i {
                    T::neg_infinity()
                } else {
                    s[idx] * scale
                };
            }
        }
        softmax_rows(s, tk);
    }
    Ok((probs, scale))
}

impl<T: Float> Graph<T> {
    /// Elementwise `a + b`, where `b`'s shape may be a trailing suffix of
    /// `a`'s (broadcast over leading dims).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_binary(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("sub", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    /// Elementwise product with the same suffix broadcast as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_binary(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale { a, c })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize(n))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let nd = av.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("perm {perm:?} for shape {:?}", av.shape())));
        }
        let data = permute_data(av.data(), av.shape(), perm);
        let shape: Vec<usize> = perm.iter().map(|&p| av.shape()[p]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Permute { a, perm: perm.to_vec() }))
    }

    /// 2-D matrix product `[M, K] x [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(Error::shape("matmul", format!("{as_:?} x {bs:?}")));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let mut data = vec![T::zero(); m * n];
        matmul(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut data, false);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    /// `x [.., in] * w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::shape("linear", format!("x {xs:?} vs w {ws:?}")));
        }
        let (fin, fout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape("linear", format!("bias {:?} vs out {fout}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / fin;
        let mut data = vec![T::zero(); rows * fout];
        matmul(rows, fin, fout, self.value(x).data(), false, self.value(w).data(), false, &mut data, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in data.chunks_mut(fout) {
                add_into(row, bv);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = fout;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push(value, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(value, Op::Sigmoid { a })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.ndim() {
            return Err(Error::Index { op: "softmax", index: axis, limit: av.ndim() });
        }
        let (outer, len, inner) = axis_split(av.shape(), axis);
        let mut data = av.data().to_vec();
        if inner == 1 {
            softmax_rows(&mut data, len);
        } else {
            let mut buf = vec![T::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    for j in 0..len {
                        buf[j] = data[base + j * inner];
                    }
                    softmax_rows(&mut buf, len);
                    for j in 0..len {
                        data[base + j * inner] = buf[j];
                    }
                }
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax { a, axis }))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", format!("x {:?} vs gamma {:?}", xv.shape(), self.shape(gamma))));
        }
        let (gam, bet) = (self.value(gamma).data(), self.value(beta).data());
        let eps = T::of_f64(eps);
        let rows = xv.numel() / d;
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut data = vec![T::zero(); xv.numel()];
        let inv_d = T::one() / T::from_usize(d);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                data[r * d + j] = xh * gam[j] + bet[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.len() < 2 || groups == 0 || !shape[1].is_multiple_of(groups) {
            return Err(Error::shape("group_norm", format!("{shape:?} with {groups} groups")));
        }
        let (n, c) = (shape[0], shape[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm", format!("channels {c} vs gamma {:?}", self.shape(gamma))));
        }
        let s: usize = shape[2..].iter().product();
        let cg = c / groups;
        let (gam, bet) = (self.value(gamma).data(), self.value(beta).data());
        let eps = T::of_f64(eps);
        let cnt = T::from_usize(cg * s);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); n * groups];
        let mut data = vec![T::zero(); xv.numel()];
        let xd = xv.data();
        for b in 0..n {
            for gi in 0..groups {
                let lo = (b * c + gi * cg) * s;
                let hi = lo + cg * s;
                let mean = xd[lo..hi].iter().copied().sum::<T>() / cnt;
                let var = xd[lo..hi].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
                let rs = T::one() / (var + eps).sqrt();
                rstd[b * groups + gi] = rs;
                for idx in lo..hi {
                    let ch = (idx / s) % c;
                    let xh = (xd[idx] - mean) * rs;
                    xhat[idx] = xh;
                    data[idx] = xh * gam[ch] + bet[ch];
                }
            }
        }
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }))
    }

    /// 2-D convolution: `x [N, C, H, W]`, `w [O, C, k, k]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("input {xs:?} vs weight {ws:?}")));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        check_bias(self, b, o, "conv2d")?;
        let (Some(oh), Some(ow)) = (conv_out(h, k, stride, padding), conv_out(wd, k, stride, padding)) else {
            return Err(Error::shape("conv2d", format!("kernel {k} stride {stride} padding {padding} on {h}x{wd}")));
        };
        let geom = ConvGeom { channels: c, in_h: h, in_w: wd, out_h: oh, out_w: ow, kernel: k, stride, padding };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut colbuf = vec![T::zero(); rows * cols];
        let mut data = vec![T::zero(); n * o * cols];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], &geom, &mut colbuf);
            matmul(o, rows, cols, wv, false, &colbuf, false, &mut data[s * o * cols..(s + 1) * o * cols], false);
        }
        if let Some(b) = b {
            add_channel_bias(&mut data, self.value(b).data(), cols);
        }
        let value = Tensor::new(vec![n, o, oh, ow], data)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, padding }))
    }

    /// Transposed convolution: `x [N, C, H, W]`, `w [C, O, k, k]`, `b [O]`;
    /// output side `(H - 1) * stride - 2 * padding + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::shape("conv_transpose2d", format!("input {xs:?} vs weight {ws:?}")));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[1], ws[2]);
        check_bias(self, b, o, "conv_transpose2d")?;
        let oh = ((h - 1) * stride + k).checked_sub(2 * padding).filter(|&v| v > 0);
        let ow = ((wd - 1) * stride + k).checked_sub(2 * padding).filter(|&v| v > 0);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape("conv_transpose2d", format!("padding {padding} too large for kernel {k}")));
        };
        let geom = ConvGeom { channels: o, in_h: oh, in_w: ow, out_h: h, out_w: wd, kernel: k, stride, padding };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut colbuf = vec![T::zero(); rows * cols];
        let plane = oh * ow;
        let mut data = vec![T::zero(); n * o * plane];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            matmul(rows, c, cols, wv, true, &xv[s * c * cols..(s + 1) * c * cols], false, &mut colbuf, false);
            col2im(&colbuf, &geom, &mut data[s * o * plane..(s + 1) * o * plane]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut data, self.value(b).data(), plane);
        }
        let value = Tensor::new(vec![n, o, oh, ow], data)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, stride, padding }))
    }

    /// Selects rows of `a` viewed as `[M, ...]`; used for embedding lookup.
    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let m = *av.shape().first().ok_or_else(|| Error::shape("gather", "scalar input"))?;
        let w = av.numel() / m.max(1);
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            if r >= m {
                return Err(Error::Index { op: "gather", index: r, limit: m });
            }
            data.extend_from_slice(&av.data()[r * w..(r + 1) * w]);
        }
        let mut shape = av.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { a, rows: rows.to_vec() }))
    }

    /// Embedding lookup: rows of `table [V, D]` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather(table, ids)
    }

    /// Columns `range` of the last axis.
    pub fn slice_last(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let av = self.value(a);
        let full = *av.shape().last().ok_or_else(|| Error::shape("slice_last", "scalar input"))?;
        if range.start > range.end || range.end > full {
            return Err(Error::Index { op: "slice_last", index: range.end, limit: full });
        }
        let len = range.len();
        let mut data = Vec::with_capacity(av.numel() / full.max(1) * len);
        for row in av.data().chunks(full) {
            data.extend_from_slice(&row[range.clone()]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SliceLast { a, start: range.start }))
    }

    /// Scaled dot-product attention over `[.., T, d]` blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let (probs, scale) = attention_probs(self.value(q), self.value(k), causal)?;
        let qs = self.shape(q).to_vec();
        let vs = self.shape(v);
        let nd = qs.len();
        let tk = self.shape(k)[nd - 2];
        if vs.len() != nd || vs[..nd - 1] != self.shape(k)[..nd - 1] {
            return Err(Error::shape("attention", format!("k {:?} vs v {vs:?}", self.shape(k))));
        }
        let (tq, dv) = (qs[nd - 2], vs[nd - 1]);
        let heads = probs.len() / (tq * tk).max(1);
        let mut data = vec![T::zero(); heads * tq * dv];
        let vv = self.value(v).data();
        for h in 0..heads {
            matmul(
                tq,
                tk,
                dv,
                &probs[h * tq * tk..],
                false,
                &vv[h * tk * dv..],
                false,
                &mut data[h * tq * dv..(h + 1) * tq * dv],
                false,
            );
        }
        let mut shape = qs;
        shape[nd - 1] = dv;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Attention { q, k, v, probs, scale }))
    }

    /// Forward value of `z_q`, identity gradient to `z`; `z_q` receives none.
    pub fn straight_through(&mut self, z: Var, z_q: Var) -> Result<Var> {
        if self.shape(z) != self.shape(z_q) {
            return Err(Error::shape("straight_through", format!("{:?} vs {:?}", self.shape(z), self.shape(z_q))));
        }
        let value = self.value(z_q).clone();
        Ok(self.push(value, Op::StraightThrough { z }))
    }

    /// A gradient-blocking copy of `a`.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    /// Mean negative log-likelihood over rows of `logits [N, K]` that are not
    /// flagged in `ignore`. Returns 0 when every row is ignored.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.shape()[0] != targets.len() || ignore.len() != targets.len() {
            return Err(Error::shape(
                "masked_cross_entropy",
                format!("logits {:?}, {} targets, {} flags", lv.shape(), targets.len(), ignore.len()),
            ));
        }
        let kk = lv.shape()[1];
        for (&t, &ig) in targets.iter().zip(ignore) {
            if !ig && t >= kk {
                return Err(Error::Index { op: "masked_cross_entropy", index: t, limit: kk });
            }
        }
        let mut probs = lv.data().to_vec();
        softmax_rows(&mut probs, kk);
        let count = ignore.iter().filter(|&&i| !i).count();
        let denom = T::from_usize(count.max(1));
        let mut loss = T::zero();
        for (i, (&t, &ig)) in targets.iter().zip(ignore).enumerate() {
            if ig {
                continue;
            }
            let row = &lv.data()[i * kk..(i + 1) * kk];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
        }
        let value = Tensor::scalar(if count == 0 { T::zero() } else { loss / denom });
        Ok(self.push(
            value,
            Op::CrossEntropy { logits, targets: targets.to_vec(), ignore: ignore.to_vec(), probs, denom },
        ))
    }

    /// Mean squared error over entries with `valid` set; 0 if none are.
    pub fn masked_mse(&mut self, pred: Var, target: &[T], valid: &[bool]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != target.len() || pv.numel() != valid.len() {
            return Err(Error::shape(
                "masked_mse",
                format!("pred {:?}, target {}, mask {}", pv.shape(), target.len(), valid.len()),
            ));
        }
        let count = valid.iter().filter(|&&v| v).count();
        let denom = T::from_usize(count.max(1));
        let mut sum = T::zero();
        for i in 0..target.len() {
            if valid[i] {
                let d = pv.data()[i] - target[i];
                sum += d * d;
            }
        }
        let value = Tensor::scalar(sum / denom);
        Ok(self.push(value, Op::MaskedMse { pred, target: target.to_vec(), valid: valid.to_vec(), denom }))
    }

    /// Binary cross-entropy on logits, averaged over `valid` entries.
    pub fn masked_bce_with_logits(&mut self, logits: Var, target: &[T], valid: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != target.len() || lv.numel() != valid.len() {
            return Err(Error::shape(
                "masked_bce_with_logits",
                format!("logits {:?}, target {}, mask {}", lv.shape(), target.len(), valid.len()),
            ));
        }
        let count = valid.iter().filter(|&&v| v).count();
        let denom = T::from_usize(count.max(1));
        let mut sum = T::zero();
        for i in 0..target.len() {
            if valid[i] {
                let x = lv.data()[i];
                sum += x.max(T::zero()) - x * target[i] + (T::one() + (-x.abs()).exp()).ln();
            }
        }
        let value = Tensor::scalar(sum / denom);
        Ok(self.push(value, Op::BceLogits { logits, target: target.to_vec(), valid: valid.to_vec(), denom }))
    }
}

fn check_bias<T: Float>(g: &Graph<T>, b: Option<Var>, o: usize, op: &'static str) -> Result<()> {
    match b {
        Some(b) if g.shape(b) != [o] => Err(Error::shape(op, format!("bias {:?} vs {o} channels", g.shape(b)))),
        _ => Ok(()),
    }
}

fn add_channel_bias<T: Float>(data: &mut [T], bias: &[T], plane: usize) {
    let o = bias.len();
    for (i, chunk) in data.chunks_mut(plane).enumerate() {
        let b = bias[i % o];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn broadcast_binary<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let (as_, bs) = (a.shape(), b.shape());
    if bs.len() > as_.len() || as_[as_.len() - bs.len()..] != *bs {
        return Err(Error::shape(op, format!("{as_:?} vs {bs:?}")));
    }
    let nb = b.numel();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data()[i % nb]))
        .collect();
    Tensor::new(as_.to_vec(), data)
}
